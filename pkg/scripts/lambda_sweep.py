"""Skip threshold ablation: IET-AGC (K=4) at several lambda values."""

from _common import parser, write_rows
from ietagc.experiments import desk_spec, median, run_summary


def main():
    p = parser(__doc__, "results/lambda_sweep.csv")
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.4, 0.5, 0.8])
    p.add_argument("--K", type=int, default=4)
    args = p.parse_args()
    rows = []
    for lam in args.lambdas:
        for seed in args.seeds:
            r = run_summary(desk_spec("agc", seed, K=args.K, lam=lam))
            rows.append({"lambda": lam, "seed": seed, **{f"mq_{k}": v for k, v in r["mq"].items()},
                         "frechet": r["frechet"], "skips": r["skips"]})
            print(f"lambda {lam}  seed {seed}  MQ {r['mq']}  skips {r['skips']}", flush=True)
    write_rows(args.out, rows)
    for lam in args.lambdas:
        sub = [r for r in rows if r["lambda"] == lam]
        print(f"lambda {lam}: median MQ_0.5 {median([r['mq_0.5'] for r in sub]):g}, "
              f"median frechet {median([r['frechet'] for r in sub]):.4f}")


if __name__ == "__main__":
    main()
