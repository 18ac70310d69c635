"""Proactive vs reactive detection delay on the shipped scenarios.

Prints one row per (scenario, config) for the scenario seed, then the
mean over a seed sweep. Optional CSV output for plotting.

    python scripts/compare_modes.py --seeds 20 --csv out/modes.csv
"""

import argparse
from pathlib import Path

from erraware import harness
from erraware.orchestrator import EngineConfig
from erraware.scenario import load_scenario, shipped_path


def fmt(x, spec=".2f"):
    return "-" if x is None else format(x, spec)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20, help="number of seeds in the sweep")
    ap.add_argument("--csv", type=Path, help="write per-seed rows here")
    args = ap.parse_args()

    configs = [EngineConfig.load(shipped_path("configs", n)) for n in ("proactive", "reactive")]
    all_rows = []
    print(f"{'scenario':<10} {'config':<10} {'delay_s':>8} {'confirm_s':>9} {'detected%':>9} "
          f"{'implicit%':>9} {'AU%':>6} {'speech%':>7} {'queries':>7}")
    for name in ("assembly", "packing"):
        sc = load_scenario(shipped_path("scenarios", name))
        for cfg in configs:
            m = harness.run_scenario(sc, cfg).metrics
            print(f"{name:<10} {cfg.label:<10} {fmt(m.mean_delay_s):>8} {fmt(m.mean_delay_confirmed_s):>9} "
                  f"{fmt(m.percent_detected, '.0f'):>9} {m.implicit_share:>9.1f} {m.implicit_au_share:>6.1f} "
                  f"{m.implicit_speech_share:>7.1f} {m.query_count:>7}")
        rows = harness.seed_sweep(sc, configs, range(args.seeds))
        all_rows += rows
        for agg in harness.aggregate_rows(rows):
            print(f"{name:<10} {agg['config'] + '*':<10} {fmt(agg['mean_delay_s']):>8} {'':>9} "
                  f"{fmt(agg['percent_detected'], '.0f'):>9} {agg['implicit_share']:>9.1f}")
    print(f"* mean over seeds 0..{args.seeds - 1}")
    if args.csv:
        args.csv.parent.mkdir(parents=True, exist_ok=True)
        args.csv.write_text(harness.rows_to_csv(all_rows, harness.SWEEP_FIELDS))


if __name__ == "__main__":
    main()
