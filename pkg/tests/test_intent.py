import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erraware.events import Utterance
from erraware.intent import (
    Category,
    HttpIntentBackend,
    Polarity,
    RuleBasedBackend,
    TaskLexicon,
    classify_intent,
    normalize,
    polarity_of_response,
)


def classify(text, lex, pending=False):
    return classify_intent(Utterance(0, text), lex, pending)


def test_normalize():
    assert normalize("  That's   NOT, it! ") == "thats not it"


def test_explicit_report_packing(packing_lexicon):
    text = "You made a mistake. You put the nuts in the office box instead of the food box."
    i = classify(text, packing_lexicon)
    assert i.category is Category.EXPLICIT_ERROR_REPORT
    assert i.description == text


def test_reaction(assembly_lexicon):
    assert classify("you missed it", assembly_lexicon).category is Category.IMPLICIT_ERROR_REACTION
    assert classify("drop it", assembly_lexicon).category is Category.IMPLICIT_ERROR_REACTION


def test_action_request(assembly_lexicon):
    i = classify("Can I have the red pipe?", assembly_lexicon)
    assert i.category is Category.ACTION_REQUEST
    assert i.action == "give_pipe"
    assert dict(i.params) == {"color": "red"}


def test_negative_query_response_keeps_supplemental(assembly_lexicon):
    i = classify("no, it grabbed the wrong one", assembly_lexicon, pending=True)
    assert i.category is Category.QUERY_RESPONSE
    assert i.polarity is Polarity.NEGATIVE
    assert i.supplemental == "it grabbed the wrong one"


def test_same_text_without_pending_query_is_a_report(assembly_lexicon):
    i = classify("no, it grabbed the wrong one", assembly_lexicon, pending=False)
    assert i.category is Category.EXPLICIT_ERROR_REPORT


def test_irrelevant(assembly_lexicon):
    assert classify("nice weather today", assembly_lexicon).category is Category.IRRELEVANT


@pytest.mark.parametrize(
    "text,polarity",
    [
        ("yes, all good", Polarity.AFFIRMATIVE),
        ("everything is fine", Polarity.AFFIRMATIVE),
        ("no", Polarity.NEGATIVE),
        ("not really", Polarity.NEGATIVE),
        ("it is not good", Polarity.NEGATIVE),
        ("um, what?", Polarity.UNCLEAR),
    ],
)
def test_polarity(text, polarity, assembly_lexicon):
    assert polarity_of_response(text, assembly_lexicon) is polarity


def test_unclear_response_while_pending_falls_through(assembly_lexicon):
    assert classify("um, what?", assembly_lexicon, pending=True).category is Category.IRRELEVANT


def test_lexicon_rejects_overlapping_markers():
    with pytest.raises(ValueError):
        TaskLexicon.from_dict({
            "task": "x", "error_report_markers": ["oops"], "reaction_markers": ["oops"],
        })


words = st.sampled_from(
    ["you", "made", "a", "mistake", "put", "the", "nuts", "box", "red", "pipe", "no", "yes",
     "oops", "hey", "can", "i", "have", "wrong", "not", "fine", "missed", "it", "dropped", "um"]
)
texts = st.one_of(st.lists(words, min_size=1, max_size=12).map(" ".join), st.text(min_size=1, max_size=40))


@settings(max_examples=300, deadline=None)
@given(texts, st.booleans(), st.sampled_from(["assembly", "packing"]))
def test_totality_and_determinism(text, pending, task):
    lex = TaskLexicon.shipped(task)
    a = classify(text, lex, pending)
    b = classify(text, lex, pending)
    assert a == b
    assert a.category in set(Category)
    if not pending:
        assert a.category is not Category.QUERY_RESPONSE


@settings(max_examples=200, deadline=None)
@given(reaction=st.sampled_from(["oops", "hey", "whoa", "oh no", "wait"]), where=st.sampled_from(["before", "after"]))
def test_priority_soundness(reaction, where, packing_lexicon):
    report = "you put the nuts in the wrong box"
    text = f"{reaction} {report}" if where == "before" else f"{report} {reaction}"
    assert classify(text, packing_lexicon).category is Category.EXPLICIT_ERROR_REPORT


class _Handler(BaseHTTPRequestHandler):
    delay = 0.0
    reply: dict = {}

    def do_POST(self):
        n = int(self.headers["Content-Length"])
        self.server.seen.append(json.loads(self.rfile.read(n)))
        time.sleep(self.delay)
        body = json.dumps(self.reply).encode()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    servers = []

    def start(reply, delay=0.0):
        handler = type("H", (_Handler,), {"reply": reply, "delay": delay})
        srv = HTTPServer(("127.0.0.1", 0), handler)
        srv.seen = []
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return srv, f"http://127.0.0.1:{srv.server_address[1]}/classify"

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


def test_http_backend_uses_reply(stub_server, assembly_lexicon):
    srv, url = stub_server({"category": "action_request", "payload": {"action": "give_pipe", "params": {"color": "blue"}}})
    be = HttpIntentBackend(url, "assembly", RuleBasedBackend(assembly_lexicon))
    i = be.classify(Utterance(0, "blue one please"), False)
    assert i.category is Category.ACTION_REQUEST and dict(i.params) == {"color": "blue"}
    assert srv.seen == [{"text": "blue one please", "task": "assembly", "query_pending": False}]
    assert be.fallbacks == 0


def test_http_backend_timeout_falls_back(stub_server, assembly_lexicon):
    _, url = stub_server({"category": "irrelevant"}, delay=1.0)
    be = HttpIntentBackend(url, "assembly", RuleBasedBackend(assembly_lexicon), timeout_s=0.2)
    t0 = time.monotonic()
    i = be.classify(Utterance(0, "you missed it"), False)
    assert time.monotonic() - t0 < 0.9
    assert i.category is Category.IMPLICIT_ERROR_REACTION
    assert be.fallbacks == 1


def test_http_backend_unreachable_and_bad_reply(stub_server, assembly_lexicon):
    fallback = RuleBasedBackend(assembly_lexicon)
    be = HttpIntentBackend("http://127.0.0.1:9/none", "assembly", fallback, timeout_s=0.2)
    assert be.classify(Utterance(0, "nice weather"), False).category is Category.IRRELEVANT
    _, url = stub_server({"category": "not-a-category"})
    be2 = HttpIntentBackend(url, "assembly", fallback)
    assert be2.classify(Utterance(0, "oops"), False).category is Category.IMPLICIT_ERROR_REACTION
    assert be.fallbacks == 1 and be2.fallbacks == 1
