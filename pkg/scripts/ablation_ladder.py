"""Ablation ladder: fixed temperature, then ITA, then ITA with reliability weighting."""
from pathlib import Path

import numpy as np

from common import base_config, describe, dump, parser, run_arm

ARMS = [
    ("baseline_fixed_tau", {"temperature_arm": "fixed_tau:0.07"}, "none"),
    ("ita", {"temperature_arm": "ita"}, "none"),
    ("ita_rdl", {"temperature_arm": "ita"}, "rdl"),
]


def main():
    args = parser(__doc__, "runs/ablation_ladder").parse_args()
    base, out = base_config(args), Path(args.out_dir)
    results = {}
    for name, gcd, rel in ARMS:
        results[name] = run_arm(base, out, name, gcd, reliability_arm=rel)
        print(describe(name, results[name]), flush=True)
    med = [np.median(results[n]["acc_all"]) for n, *_ in ARMS]
    results["monotone"] = bool(med[0] < med[1] < med[2])
    print("strictly increasing medians:", results["monotone"])
    dump(out, "ladder.json", results)


if __name__ == "__main__":
    main()
