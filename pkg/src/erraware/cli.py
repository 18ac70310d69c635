"""Command-line front end.

Exit codes: 0 success, 2 invalid input (missing file, schema violation,
bad parameter), 1 internal error or replay mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import harness
from .events import MalformedEventError, read_ndjson
from .orchestrator import EngineConfig
from .scenario import ScenarioError, load_scenario, shipped_path

log = logging.getLogger("erraware")


class UsageError(Exception):
    """Bad user input; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _resolve(arg: str, kind: str) -> Path:
    p = Path(arg)
    if p.is_file():
        return p
    shipped = shipped_path(kind, arg)
    if not p.suffix and shipped.is_file():
        return shipped
    raise UsageError(f"file not found: {arg}")


def _scenario(arg: str):
    return load_scenario(_resolve(arg, "scenarios"))


def _config(arg: str) -> EngineConfig:
    try:
        return EngineConfig.load(_resolve(arg, "configs"))
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid engine config {arg}: {exc}") from exc


def _parse_seeds(spec: str) -> list[int]:
    try:
        if ".." in spec:
            lo, hi = spec.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in spec.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --seeds value {spec!r}; use A..B or a,b,c") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _write_run(out: Path, result: harness.RunResult, fmt: str | None, stem: str = "") -> None:
    if fmt in (None, "json"):
        _write_json(out / f"{stem}metrics.json", {
            "scenario": result.scenario, "config": result.config, "seed": result.seed,
            **result.metrics.to_dict()})
        (out / f"{stem}trace.ndjson").write_text(result.trace_ndjson(), encoding="utf-8")
    if fmt in (None, "csv"):
        (out / f"{stem}metrics.csv").write_text(harness.rows_to_csv(result.csv_rows()), encoding="utf-8")


def _interactive_responder(t: int, query: str) -> str | None:
    print(f"[t={t / 1000:.1f}s] robot: {query}", file=sys.stderr)
    try:
        reply = input("you> ").strip()
    except EOFError:
        return None
    return reply or None


def cmd_run(args) -> int:
    sc = _scenario(args.scenario)
    cfg = _config(args.config)
    responder = _interactive_responder if args.interactive else None
    result = harness.run_scenario(sc, cfg, seed=args.seed, responder=responder)
    _write_run(_out_dir(args), result, args.format)
    m = result.metrics
    log.info("%s/%s: mean delay %s s, %s%% detected", result.scenario, result.config,
             m.mean_delay_s, m.percent_detected)
    return 0


def cmd_compare(args) -> int:
    sc = _scenario(args.scenario)
    cfgs = [_config(args.config_a), _config(args.config_b)]
    out = _out_dir(args)
    if args.seeds:
        seeds = _parse_seeds(args.seeds)
        rows = harness.seed_sweep(sc, cfgs, seeds)
        agg = harness.aggregate_rows(rows)
        if args.format in (None, "csv"):
            (out / "sweep.csv").write_text(harness.rows_to_csv(rows + agg, harness.SWEEP_FIELDS), encoding="utf-8")
        if args.format in (None, "json"):
            _write_json(out / "sweep.json", {"rows": rows, "aggregate": agg})
        return 0
    comp = harness.compare_configs(sc, cfgs, seed=args.seed)
    for r in comp.runs:
        _write_run(out, r, args.format, stem=f"{r.config}.")
    if args.format in (None, "json"):
        _write_json(out / "comparison.json", {
            "scenario": comp.scenario, "baseline": comp.baseline,
            "runs": [{"config": r.config, **r.metrics.to_dict()} for r in comp.runs],
            "deltas": comp.deltas})
    if args.format in (None, "csv"):
        fields = ["config", "baseline", "delta_mean_delay_s", "delta_percent_detected"]
        (out / "comparison.csv").write_text(harness.rows_to_csv(comp.deltas, fields), encoding="utf-8")
    for d in comp.deltas:
        log.info("%s vs %s: delta mean delay %s s", d["config"], d["baseline"], d["delta_mean_delay_s"])
    return 0


def _parse_grid(items: Sequence[str]) -> dict[str, list]:
    grid: dict[str, list] = {}
    for item in items:
        name, _, values = item.partition("=")
        if not name or not values:
            raise UsageError(f"bad --grid entry {item!r}; use name=v1,v2")
        try:
            grid[name] = [json.loads(v) for v in values.split(",")]
        except json.JSONDecodeError as exc:
            raise UsageError(f"bad value in --grid {item!r}") from exc
    return grid


def cmd_sweep(args) -> int:
    sc = _scenario(args.scenario)
    base = _config(args.config)
    grid = _parse_grid(args.grid or [])
    if not grid:
        raise UsageError("empty parameter grid")
    names = list(grid)
    points = []
    for combo in itertools.product(*(grid[n] for n in names)):
        params = dict(zip(names, combo))
        try:
            det = dataclasses.replace(base.detector, **params)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid grid point {params}: {exc}") from exc
        points.append((params, dataclasses.replace(base, detector=det)))
    rows = []
    for params, cfg in points:
        r = harness.run_scenario(sc, cfg, seed=args.seed)
        m = r.metrics
        rows.append({**params, "scenario": r.scenario, "config": r.config, "seed": r.seed,
                     "mean_delay_s": m.mean_delay_s, "percent_detected": m.percent_detected,
                     "implicit_share": m.implicit_share, "false_positive_queries": m.false_positive_queries,
                     "query_count": m.query_count})
    out = _out_dir(args)
    if args.format in (None, "csv"):
        (out / "sweep.csv").write_text(harness.rows_to_csv(rows, names + harness.SWEEP_FIELDS), encoding="utf-8")
    if args.format in (None, "json"):
        _write_json(out / "sweep.json", {"grid": grid, "rows": rows})
    return 0


def cmd_validate(args) -> int:
    bad = 0
    for path in args.scenarios:
        try:
            sc = _scenario(path)
        except (ScenarioError, UsageError) as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            bad += 1
            continue
        print(f"{path}: ok ({len(sc.robot_actions)} actions, {len(sc.injected_errors)} errors)")
    return 2 if bad else 0


def cmd_replay(args) -> int:
    path = Path(args.trace)
    if not path.is_file():
        raise UsageError(f"file not found: {args.trace}")
    records = list(read_ndjson(path))
    if not records:
        raise UsageError("empty trace")
    metrics = harness.replay_trace(records)
    header = records[0]
    out = _out_dir(args)
    if args.format in (None, "json"):
        _write_json(out / "metrics.json", {"scenario": header["scenario"], "config": header["config"]["name"],
                                           "seed": header["seed"], **metrics.to_dict()})
    if args.format in (None, "csv"):
        fake = harness.RunResult(header["scenario"], header["config"]["name"] or header["config"]["mode"],
                                 header["seed"], metrics, records, None)
        (out / "metrics.csv").write_text(harness.rows_to_csv(fake.csv_rows()), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--out", default="out", help="output directory (created if absent)")
    common.add_argument("--format", choices=["json", "csv"], default=None,
                        help="json: metrics.json + trace.ndjson; csv: metrics.csv only; default both")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = _Parser(prog="erraware", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", parents=[common], help="simulate one scenario with one engine config")
    r.add_argument("scenario")
    r.add_argument("config")
    r.add_argument("--interactive", action="store_true", help="type answers to robot queries")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", parents=[common], help="compare two engine configs on one scenario")
    c.add_argument("scenario")
    c.add_argument("config_a")
    c.add_argument("config_b")
    c.add_argument("--seeds", help="seed sweep, e.g. 0..19 or 1,2,3")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", parents=[common], help="grid over detector parameters")
    s.add_argument("scenario")
    s.add_argument("config")
    s.add_argument("--grid", action="append", metavar="NAME=V1,V2",
                   help="detector field and values; repeat for more axes")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", parents=[common], help="validate scenario files")
    v.add_argument("scenarios", nargs="+")
    v.set_defaults(func=cmd_validate)

    rp = sub.add_parser("replay", parents=[common], help="recompute metrics from trace.ndjson")
    rp.add_argument("trace")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"erraware: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScenarioError, MalformedEventError) as exc:
        print(f"erraware: error: {exc}", file=sys.stderr)
        return 2
    except harness.ReplayMismatch as exc:
        print(f"erraware: replay mismatch: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"erraware: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
