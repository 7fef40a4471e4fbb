"""Run the full desk pipeline (pretrain, plan, fine-tune, fold, eval).

    python3 scripts/run_desk.py [--config configs/desk.yaml] [--out runs/desk]
"""
import argparse
import os
import sys
from pathlib import Path

from vitcompress.cli import main as cli_main
from vitcompress.config import OUT_ENV

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--out", help="output directory (overrides out_dir in the config)")
    args = ap.parse_args()
    if args.out:
        os.environ[OUT_ENV] = args.out
    return cli_main(["-v", "pipeline", "--config", args.config])


if __name__ == "__main__":
    sys.exit(main())
