"""ITA against a cosine temperature schedule, for two temperature ceilings."""
from pathlib import Path

import numpy as np

from common import base_config, describe, dump, parser, run_arm


def main():
    p = parser(__doc__, "runs/temperature_schedule")
    p.add_argument("--tau-max", type=float, nargs="+", default=[1.0, 0.5])
    p.add_argument("--reliability-arm", default="none")
    args = p.parse_args()
    base, out = base_config(args), Path(args.out_dir)
    results = {}
    for tmax in args.tau_max:
        row = {}
        for arm in ("ita", "ts"):
            name = f"{arm}_taumax_{tmax:g}"
            row[arm] = run_arm(base, out, name, {"temperature_arm": arm, "tau_max": tmax},
                               reliability_arm=args.reliability_arm)
            print(describe(name, row[arm]), flush=True)
        a, t = np.array(row["ita"]["acc_novel"]), np.array(row["ts"]["acc_novel"])
        row["ita_wins"] = int(np.sum(a >= t))
        print(f"  ITA >= TS on acc_novel in {row['ita_wins']}/{a.size} seeds")
        results[f"{tmax:g}"] = row
    dump(out, "temperature_schedule.json", results)


if __name__ == "__main__":
    main()
