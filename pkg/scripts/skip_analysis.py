"""Which samples does AGC skip? Duplicates versus unique samples, and the
spatial and spectral character of the most- and least-skipped deciles."""

import numpy as np

from _common import parser, write_rows
from ietagc.experiments import desk_spec, run_summary


def main():
    p = parser(__doc__, "results/skip_analysis.csv")
    p.add_argument("--datasets", nargs="+", default=["mixture", "patterns"])
    p.add_argument("--K", type=int, default=4)
    args = p.parse_args()
    rows = []
    for dataset in args.datasets:
        for seed in args.seeds:
            r = run_summary(desk_spec("agc", seed, K=args.K, dataset=dataset), audit=False)
            a = r["skip_analysis"]
            row = {"dataset": dataset, "seed": seed, "skips": r["skips"],
                   "median_skips_duplicated": a["median_skips_duplicated"],
                   "median_skips_unique": a["median_skips_unique"],
                   "distance_most": float(a["dist_most"].mean()), "distance_least": float(a["dist_least"].mean()),
                   "energy_most": float(np.mean(a["energy_most"])) if "energy_most" in a else "",
                   "energy_least": float(np.mean(a["energy_least"])) if "energy_least" in a else ""}
            rows.append(row)
            print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
    write_rows(args.out, rows)


if __name__ == "__main__":
    main()
