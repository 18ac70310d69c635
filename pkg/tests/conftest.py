import copy
import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from erraware.intent import TaskLexicon  # noqa: E402
from erraware.orchestrator import EngineConfig  # noqa: E402
from erraware.scenario import load_scenario, shipped_path  # noqa: E402

ACCEPTANCE_RESULTS: list[tuple[int, str, str]] = []


def scenario_doc(name: str) -> dict:
    """Fresh decoded copy of a shipped scenario file, for editing in tests."""
    return json.loads(shipped_path("scenarios", name).read_text(encoding="utf-8"))


def repeated_doc(name: str, total_millis: int) -> dict:
    """Shipped scenario tiled end to end (ids suffixed per copy) to fill
    ``total_millis`` of script time."""
    base = scenario_doc(name)
    acts = base["actions"]
    period = acts[-1]["start"] + acts[-1]["duration_millis"] + 6000
    actions, errors = [], []
    k = 0
    while (k + 1) * period <= total_millis:
        for a in acts:
            b = copy.deepcopy(a)
            b["id"] = f"{a['id']}_r{k}"
            b["start"] += k * period
            if a.get("is_error"):
                b["is_error"] = f"{a['is_error']}_r{k}"
            actions.append(b)
        for e in base["errors"]:
            f = copy.deepcopy(e)
            f["error_id"] += f"_r{k}"
            f["action"] += f"_r{k}"
            errors.append(f)
        k += 1
    base["actions"], base["errors"] = actions, errors
    base["human"]["perceives_error"] = {}
    last = actions[-1]
    base["robot"]["tail_millis"] = total_millis - last["start"] - last["duration_millis"]
    return base


@pytest.fixture(scope="session")
def assembly():
    return load_scenario(shipped_path("scenarios", "assembly"))


@pytest.fixture(scope="session")
def packing():
    return load_scenario(shipped_path("scenarios", "packing"))


@pytest.fixture(scope="session")
def proactive():
    return EngineConfig.load(shipped_path("configs", "proactive"))


@pytest.fixture(scope="session")
def reactive():
    return EngineConfig.load(shipped_path("configs", "reactive"))


@pytest.fixture(scope="session")
def assembly_lexicon():
    return TaskLexicon.shipped("assembly")


@pytest.fixture(scope="session")
def packing_lexicon():
    return TaskLexicon.shipped("packing")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    # parametrized criteria report once; any failing case fails the line
    merged: dict[int, tuple[str, str]] = {}
    for n, title, verdict in ACCEPTANCE_RESULTS:
        prev = merged.get(n)
        if prev is None or verdict == "FAIL":
            merged[n] = (title, verdict)
    terminalreporter.section("acceptance criteria")
    for n in sorted(merged):
        title, verdict = merged[n]
        terminalreporter.write_line(f"[{verdict}] #{n:>2} {title}")
