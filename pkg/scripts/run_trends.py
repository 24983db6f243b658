"""Run the paired conditioning comparisons and write one JSON report per comparison.

    python3 scripts/run_trends.py --out results/trends --seeds 0 1 2
    python3 scripts/run_trends.py --only alignment --steps 500
"""

import argparse
import json
import sys
import time
from pathlib import Path

from subjvid.experiments import COMPARISONS, Profile, run_comparison, save_report


def main(argv=None) -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results/trends")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=Profile.steps)
    p.add_argument("--only", nargs="+", choices=COMPARISONS, default=list(COMPARISONS))
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    t0 = time.time()
    for name in args.only:
        rep = run_comparison(name, seeds=tuple(args.seeds), profile=Profile(steps=args.steps),
                             log=lambda m: print(m, flush=True))
        save_report(rep, out / f"{name}.json")
        summary[name] = {"means": rep.means(), "holds": rep.holds()}
        print(json.dumps({name: summary[name]}), flush=True)
    summary["seconds"] = time.time() - t0
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return 0 if all(all(v["holds"].values()) for k, v in summary.items() if k != "seconds") else 1


if __name__ == "__main__":
    sys.exit(main())
