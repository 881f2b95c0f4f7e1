"""Train the toy model once and report validation metrics and wall time.

    python scripts/calibrate_toy.py --out runs/calib training.epochs=12 data.n_bins=32
"""

import argparse
import time

import yaml

from seqdet.config import toy_config
from seqdet.train import fit, set_deterministic


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/calibrate")
    ap.add_argument("overrides", nargs="*", help="dotted key=value pairs")
    args = ap.parse_args()
    overrides = {}
    for item in args.overrides:
        k, v = item.split("=", 1)
        overrides[k] = yaml.safe_load(v)
    set_deterministic()
    cfg = toy_config(overrides)
    t0 = time.perf_counter()

    def show(line):
        if line.startswith("eval") or line.split()[0].endswith("00"):
            print(f"[{time.perf_counter() - t0:7.1f}s] {line}", flush=True)

    result = fit(cfg, args.out, on_log=show)
    print(f"done in {result.seconds:.1f}s: {result.metrics}")


if __name__ == "__main__":
    main()
