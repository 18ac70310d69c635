"""False-positive queries vs AU vote fraction under spontaneous expression noise.

The human always answers "all fine", so every implicit query is denied
and the adaptive threshold is exercised.

    python scripts/noise_sweep.py --rate 4 --seeds 10
"""

import argparse
import dataclasses
import json
import statistics

from erraware import harness
from erraware.orchestrator import EngineConfig
from erraware.scenario import parse_scenario, shipped_path


def noisy_scenario(name: str, rate: float):
    doc = json.loads(shipped_path("scenarios", name).read_text())
    doc["human"]["query_response_policy"] = "always_fine"
    doc["noise"]["spontaneous_au_burst_rate"] = rate
    return parse_scenario(doc)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="assembly")
    ap.add_argument("--rate", type=float, default=4.0, help="noise bursts per minute")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--fractions", default="0.3,0.4,0.5,0.6,0.7")
    args = ap.parse_args()

    sc = noisy_scenario(args.scenario, args.rate)
    base = EngineConfig.load(shipped_path("configs", "proactive"))
    print(f"{'fraction':>8} {'fp_queries':>10} {'queries':>8} {'boosts':>7} {'implicit%':>9}")
    for frac in (float(x) for x in args.fractions.split(",")):
        cfg = dataclasses.replace(base, detector=dataclasses.replace(base.detector, vote_fraction_base=frac))
        ms = [harness.run_scenario(sc, cfg, seed=s).metrics for s in range(args.seeds)]
        print(f"{frac:>8.2f} {statistics.fmean(m.false_positive_queries for m in ms):>10.2f} "
              f"{statistics.fmean(m.query_count for m in ms):>8.2f} "
              f"{statistics.fmean(m.boosts for m in ms):>7.2f} "
              f"{statistics.fmean(m.implicit_share for m in ms):>9.1f}")


if __name__ == "__main__":
    main()
