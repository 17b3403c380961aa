"""Run collect, train, verify, sweep, plot and report for one experiment config.

    python scripts/run_pipeline.py configs/noise.toml
    python scripts/run_pipeline.py configs/toy.toml --out runs/toy_seed3 --seed 3
"""
import argparse
import sys
import time

from rhcbf.cli import EXIT_OK, EXIT_VERIFY, main
from rhcbf.config import load_config


def run(config, out=None, seed=None, force=False):
    common = ["--config", config]
    if out:
        common += ["--out", out]
    if seed is not None:
        common += ["--seed", str(seed)]
    if force:
        common.append("--force")
    stages = ["collect", "train", "verify"]
    if load_config(config).sweep.controllers:
        stages += ["sweep", "plot"]
    stages.append("report")
    for stage in stages:
        t0 = time.time()
        code = main([stage, *common])
        print(f"[{stage}] exit {code} in {time.time() - t0:.0f} s", flush=True)
        # a failed certificate is reported but does not stop the sweep
        if code not in (EXIT_OK, EXIT_VERIFY):
            return code
    return EXIT_OK


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--out")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--force", action="store_true")
    a = ap.parse_args()
    sys.exit(run(a.config, a.out, a.seed, a.force))
