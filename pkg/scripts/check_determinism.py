"""Run a config twice into separate directories and compare every CSV byte for byte.

    python scripts/check_determinism.py configs/toy.toml
"""
import sys
import tempfile
from pathlib import Path

from run_pipeline import run


def csv_bytes(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*.csv"))}


if __name__ == "__main__":
    config = sys.argv[1]
    with tempfile.TemporaryDirectory() as tmp:
        outs = [Path(tmp) / f"run{i}" for i in (0, 1)]
        for o in outs:
            run(config, str(o))
        a, b = (csv_bytes(o) for o in outs)
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    print(f"{len(a)} CSV files, {len(diff)} differ" + (": " + ", ".join(diff) if diff else ""))
    sys.exit(1 if diff else 0)
