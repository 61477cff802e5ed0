"""Memorization and sample quality for every training method on the mixture dataset.

All methods see the same number of sample presentations (3000 passes over
the data). Prints per-seed rows and a median summary.
"""

from _common import parser, write_rows
from ietagc.experiments import desk_spec, median, run_summary

METHODS = [
    ("default", "default", 1),
    ("dp_sgd", "dp_sgd", 1),
    ("input_noise", "input_noise", 1),
    ("agc", "agc", 1),
    ("iet", "default", 4),
    ("iet-agc", "agc", 4),
]


def main():
    p = parser(__doc__, "results/table1.csv")
    p.add_argument("--methods", nargs="+", default=[m for m, _, _ in METHODS])
    args = p.parse_args()
    rows = []
    for label, method, K in METHODS:
        if label not in args.methods:
            continue
        for seed in args.seeds:
            r = run_summary(desk_spec(method, seed, K=K))
            rows.append({"method": label, "seed": seed, **{f"mq_{k}": v for k, v in r["mq"].items()},
                         "frechet": r["frechet"], "skips": r["skips"]})
            print(f"{label:12s} seed {seed}  MQ {r['mq']}  frechet {r['frechet']:.4f}", flush=True)
    write_rows(args.out, rows)
    print("\nmethod        MQ_0.4  MQ_0.5  MQ_0.6  frechet   (medians)")
    for label in dict.fromkeys(r["method"] for r in rows):
        sub = [r for r in rows if r["method"] == label]
        cols = [median([r[k] for r in sub]) for k in ("mq_0.4", "mq_0.5", "mq_0.6", "frechet")]
        print(f"{label:12s} {cols[0]:7g} {cols[1]:7g} {cols[2]:7g}  {cols[3]:.4f}")


if __name__ == "__main__":
    main()
