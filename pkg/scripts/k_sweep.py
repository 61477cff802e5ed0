"""Number of shards: IET-AGC memorization as K grows, at a fixed epoch budget."""

from _common import parser, write_rows
from ietagc.experiments import desk_spec, median, run_summary


def main():
    p = parser(__doc__, "results/k_sweep.csv")
    p.add_argument("--ks", type=int, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--method", default="agc", choices=["agc", "default"])
    args = p.parse_args()
    rows = []
    for K in args.ks:
        for seed in args.seeds:
            # K=1 with the round structure kept, so only the sharding changes
            r = run_summary(desk_spec(args.method, seed, K=K, **({"iet.m": 30, "iet.e": 100} if K == 1 else {})))
            rows.append({"K": K, "seed": seed, **{f"mq_{k}": v for k, v in r["mq"].items()},
                         "frechet": r["frechet"]})
            print(f"K={K}  seed {seed}  MQ {r['mq']}  frechet {r['frechet']:.4f}", flush=True)
    write_rows(args.out, rows)
    for K in args.ks:
        sub = [r for r in rows if r["K"] == K]
        print(f"K={K}: median MQ_0.5 {median([r['mq_0.5'] for r in sub]):g}")


if __name__ == "__main__":
    main()
