"""Run every config in a directory and print one verdict line per run."""
import argparse
import io
import sys
from pathlib import Path

from rediff.cli import parse_config, run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("configs", nargs="?", default=Path(__file__).resolve().parents[1] / "configs", type=Path)
    ap.add_argument("--out", default="results", type=Path)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only", nargs="*", help="substring filter on config file names")
    args = ap.parse_args(argv)

    worst = 0
    for path in sorted(args.configs.glob("*.*")):
        if args.only and not any(s in path.name for s in args.only):
            continue
        cfg = parse_config(path)
        cfg.workers = args.workers
        status, report = run(cfg, out=args.out / path.stem, stream=io.StringIO())
        print(f"{path.name:32s} {report['verdict']:4s}  {report['message']}", flush=True)
        worst = max(worst, status)
    return worst


if __name__ == "__main__":
    sys.exit(main())
