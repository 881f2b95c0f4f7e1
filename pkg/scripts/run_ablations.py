"""Run both ablations, sharing the cache used by the acceptance tests, and
print their summaries. Sequence augmentation uses the full toy schedule,
ordering the shorter one.

    python scripts/run_ablations.py --out runs/ablations --seeds 0,1,2
"""

import argparse
import math

from seqdet.ablation import matched_ap_gaps, ordering_medians, run_ablation_ordering, run_ablation_seqaug
from seqdet.codec import OrderingStrategy
from seqdet.config import ablation_config, toy_config
from seqdet.train import set_deterministic

EOS_OFFSETS = [0.0, -1.0, -2.0, -4.0, -8.0, -math.inf]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--cache", default="runs/acceptance")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--only", choices=["ordering", "seqaug"])
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    set_deterministic()

    def show(line):
        if not line.startswith("step=") or line.split()[0].endswith("00"):
            print(line, flush=True)

    if args.only in (None, "seqaug"):
        rows = run_ablation_seqaug(toy_config(), EOS_OFFSETS, seeds, f"{args.out}/seqaug", args.cache, show)
        for seed, gap in matched_ap_gaps(rows).items():
            print(f"seqaug seed {seed}: matched-recall AP gap {gap:+.4f}")
    if args.only in (None, "ordering"):
        strategies = [s.value for s in OrderingStrategy]
        rows = run_ablation_ordering(ablation_config(), strategies, seeds, f"{args.out}/ordering", args.cache, show)
        for name, ap_median in ordering_medians(rows).items():
            print(f"ordering {name}: median AP {ap_median:.4f}")


if __name__ == "__main__":
    main()
