"""Reliability weighting against global bottom-r% filtering under corrupted pseudo-labels."""
from pathlib import Path

from common import base_config, describe, dump, parser, run_arm


def main():
    p = parser(__doc__, "runs/reliability_filtering")
    p.add_argument("--corruption", type=float, default=0.2)
    p.add_argument("--percents", type=float, nargs="+", default=[25, 50, 75])
    args = p.parse_args()
    base, out = base_config(args), Path(args.out_dir)
    arms = [("rdl", "rdl"), ("none", "none")] + [(f"global_r_{r:g}", f"global_r:{r:g}") for r in args.percents]
    results = {}
    for name, arm in arms:
        results[name] = run_arm(base, out, name, reliability_arm=arm, corruption_fraction=args.corruption)
        print(describe(name, results[name]), flush=True)
    dump(out, "reliability_filtering.json", results)


if __name__ == "__main__":
    main()
