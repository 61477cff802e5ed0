"""Command-line driver: ``ietagc {gen-data,train,audit,analyze,compare}``.

Every command takes ``--out DIR``; config keys are set with ``--config FILE``,
``IETAGC_*`` environment variables, or ``--key value`` flags (``--iet.k 4``).
Run ``ietagc keys`` to list the schema.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import audit, pipeline
from .agc import read_skip_csv, write_skip_csv
from .config import KEYS, SCHEMA, ExperimentSpec, format_config, resolve
from .data import export_csv, load_dataset, save_dataset
from .diffusion import load_checkpoint, save_checkpoint
from .errors import ConfigError, FormatError, IetAgcError, IncompatibleArtifacts, TrainingDiverged
from .trainer import write_epoch_csv

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARSE = 2
EXIT_DIVERGED = 3
EXIT_INCOMPATIBLE = 4
EXIT_MISSING = 5
EXIT_FORMAT = 6

MANIFEST = "experiment.json"
CHECKPOINT = "checkpoint.bin"
DATASET = "dataset.bin"
REPORT = "report.json"


class MissingInput(IetAgcError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"missing input: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def _require(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing input: {path}")
    return path


def _split_overrides(extra):
    """``["--iet.k", "4", "--agc.lambda=0.8"]`` -> {"iet.k": "4", "agc.lambda": "0.8"}."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        name = tok[2:]
        if "=" in name:
            name, value = name.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"--{name}: missing value")
            value = extra[i + 1]
            i += 2
        name = name.replace("-", "_") if name not in KEYS else name
        if name not in KEYS:
            raise ConfigError(f"unknown option --{name}")
        out[name] = value
    return out


def _spec_from_args(args, extra) -> ExperimentSpec:
    base = None
    if getattr(args, "manifest", None):
        man = _read_json(args.manifest)
        base = ExperimentSpec.defaults().updated(man["spec"], str(args.manifest))
    return resolve(args.config, _split_overrides(extra), base=base)


def _sweep_points(sweeps):
    """``["iet.k=1,5", "agc.lambda=0.4,0.8"]`` -> list of override dicts (cartesian product)."""
    axes = []
    for item in sweeps or ():
        name, sep, values = item.partition("=")
        if not sep or name not in KEYS:
            raise ConfigError(f"--sweep {item!r}: expected key=v1,v2,... with a known key")
        axes.append([(name, v.strip()) for v in values.split(",") if v.strip()])
    return [dict(p) for p in itertools.product(*axes)] if axes else [{}]


# ---------------------------------------------------------------------------
# commands


def _materialize_dataset(spec, out: Path):
    data = pipeline.build_dataset(spec)
    save_dataset(out / DATASET, data)
    return data


def cmd_gen_data(args, extra):
    spec = _spec_from_args(args, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _materialize_dataset(spec, out)
    export_csv(out / "dataset.csv", data)
    _write_json(out / "dataset.json", {"samples": len(data), "d": data.d,
                                       "labels_present": data.labels_present,
                                       "duplication_map": {str(k): v for k, v in data.duplication_map.items()},
                                       "dataset_sha256": data.content_hash()})
    print(f"wrote {len(data)} samples (d={data.d}) to {out / DATASET}")
    return EXIT_OK


def train_one(spec: ExperimentSpec, out: Path, log=print):
    """Train and write checkpoint, logs, and the manifest into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    data = _materialize_dataset(spec, out)
    every = spec["run.checkpoint_every"]
    schedule = pipeline.build_schedule_for(spec)

    def on_round(m, params, bank):
        log(f"round {m + 1}/{spec['iet.m']} done")
        if every and (m + 1) % every == 0 and m + 1 < spec["iet.m"]:
            save_checkpoint(out / f"checkpoint_round{m + 1:04d}.bin", params, schedule, bank)

    try:
        result = pipeline.train(spec, data, on_round=on_round)
    except TrainingDiverged as exc:
        info = {"error": str(exc), "epoch": exc.epoch, "last_good_epoch": exc.last_good,
                "last_good_checkpoint": None}
        if exc.params is not None:
            save_checkpoint(out / "last_good.bin", exc.params, schedule)
            info["last_good_checkpoint"] = "last_good.bin"
        _write_json(out / "diverged.json", info)
        raise
    save_checkpoint(out / CHECKPOINT, result.params, result.schedule, result.bank)
    stats = [s for _, _, s in result.log["epoch_stats"]]
    extra = [{"round": m, "shard": i} for m, i, _ in result.log["epoch_stats"]]
    write_epoch_csv(out / "epochs.csv", stats, extra)
    write_skip_csv(out / "skips.csv", result.skips)
    _write_json(out / "rounds.json", {"rounds": result.log["rounds"], "shard_sizes": result.log["shard_sizes"]})
    (out / "config.txt").write_text(format_config(spec))
    manifest = {
        "spec": spec.as_text(),
        "method": spec.method_label(),
        "dataset_sha256": data.content_hash(),
        "checkpoint_sha256": _sha256(out / CHECKPOINT),
        "schedule": {"T": result.schedule.T, "beta_max": result.schedule.beta_max,
                     "beta_max_adjusted": result.schedule.adjusted},
        "total_epochs": result.total_epochs,
        "skips": len(result.skips),
        "final_mean_loss": stats[-1].mean_loss if stats else None,
    }
    _write_json(out / MANIFEST, manifest)
    return result, manifest


def cmd_train(args, extra):
    spec = _spec_from_args(args, extra)
    root = Path(args.out)
    points = _sweep_points(args.sweep)
    quiet = (lambda *_: None) if args.quiet else print
    for point in points:
        sub = spec.updated(point, "--sweep") if point else spec
        out = root / "_".join(f"{k}={v}" for k, v in point.items()) if point else root
        _, manifest = train_one(sub, out, log=quiet)
        print(f"{out}: method={manifest['method']} skips={manifest['skips']} "
              f"checkpoint={manifest['checkpoint_sha256'][:12]}")
        if args.audit:
            _audit_dir(out, sub)
    return EXIT_OK


def _load_run(run: Path):
    man = _read_json(run / MANIFEST)
    spec = ExperimentSpec.defaults().updated(man["spec"], str(run / MANIFEST))
    params, schedule, bank = load_checkpoint(_require(run / CHECKPOINT))
    data = load_dataset(_require(run / DATASET))
    if data.content_hash() != man["dataset_sha256"]:
        raise IncompatibleArtifacts(f"{run / DATASET} does not match the manifest's dataset hash")
    return spec, params, schedule, bank, data, man


def _audit_dir(out: Path, spec, params=None, schedule=None, data=None):
    if params is None:
        _, params, schedule, _, data, _ = _load_run(out)
    report, vs = pipeline.audit_model(params, schedule, data, spec)
    _write_json(out / REPORT, report)
    audit.write_verdicts_csv(out / "verdicts.csv", vs, spec["audit.thresholds"])
    mq = " ".join(f"MQ_{k}={v}" for k, v in report["mq"].items())
    print(f"{out / REPORT}: {mq} frechet={report['frechet']:.6g}")
    return report


def cmd_audit(args, extra):
    overrides = _split_overrides(extra)
    if args.run:
        run = Path(args.run)
        spec, params, schedule, _, data, _ = _load_run(run)
        spec = resolve(args.config, overrides, base=spec)
        out = Path(args.out) if args.out else run
    else:
        if not (args.checkpoint and args.dataset and args.out):
            raise ConfigError("audit needs --run DIR, or --checkpoint, --dataset and --out")
        spec = resolve(args.config, overrides)
        params, schedule, _ = load_checkpoint(_require(args.checkpoint))
        data = load_dataset(_require(args.dataset))
        out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _audit_dir(out, spec, params, schedule, data)
    return EXIT_OK


def cmd_analyze(args, extra):
    run = Path(args.run)
    spec, params, schedule, _, data, man = _load_run(run)
    spec = resolve(args.config, _split_overrides(extra), base=spec)
    skips = read_skip_csv(_require(run / "skips.csv"))
    out = Path(args.out) if args.out else run / "analysis"
    out.mkdir(parents=True, exist_ok=True)

    prof = pipeline.loss_profile_for(params, schedule, data, spec)
    if prof is not None:
        audit.write_table_csv(out / "loss_profile.csv", prof)
    else:
        print("no duplicate groups in the dataset: loss profile skipped")

    sa = pipeline.skip_analysis(data, skips, man["total_epochs"])
    hist = sa["histogram"]
    audit.write_table_csv(out / "skip_counts.csv", {
        "sample_id": data.ids, "skips": hist["counts"],
        "duplicated": data.duplicated_mask.astype(int)})
    audit.write_table_csv(out / "skip_histogram.csv", {
        "skips": np.arange(hist["histogram"].size), "samples": hist["histogram"]})
    groups = {"most": sa["most_rows"], "least": sa["least_rows"]}
    rows = [(g, int(data.ids[r])) for g, rr in groups.items() for r in rr]
    audit.write_table_csv(out / "skip_groups.csv", {"group": [g for g, _ in rows],
                                                    "sample_id": [i for _, i in rows]})
    audit.write_table_csv(out / "distances.csv", {
        "group": ["most"] * sa["dist_most"].size + ["least"] * sa["dist_least"].size,
        "distance": np.concatenate([sa["dist_most"], sa["dist_least"]])})
    summary = {
        "skip_quantiles": hist["quantiles"],
        "median_skips_duplicated": sa["median_skips_duplicated"],
        "median_skips_unique": sa["median_skips_unique"],
        "mean_distance_most": float(sa["dist_most"].mean()) if sa["dist_most"].size else None,
        "mean_distance_least": float(sa["dist_least"].mean()) if sa["dist_least"].size else None,
    }
    if "energy_most" in sa:
        audit.write_table_csv(out / "energy.csv", {
            "group": ["most"] * sa["energy_most"].size + ["least"] * sa["energy_least"].size,
            "sample_id": np.concatenate([data.ids[sa["most_rows"]], data.ids[sa["least_rows"]]]),
            "energy": np.concatenate([sa["energy_most"], sa["energy_least"]])})
        summary["mean_energy_most"] = float(sa["energy_most"].mean())
        summary["mean_energy_least"] = float(sa["energy_least"].mean())
    _write_json(out / "analysis.json", summary)
    print(f"wrote analysis tables to {out}")
    return EXIT_OK


COMPARE_FIELDS = ["report", "method", "generated", "n", "mq_0.4", "mq_0.5", "mq_0.6", "frechet"]


def compare_rows(reports):
    """One row per report; absent fields become empty cells."""
    rows = []
    for path, rep in reports:
        mq = rep.get("mq", {}) or {}
        rows.append({"report": str(path), "method": rep.get("method", ""),
                     "generated": rep.get("generated", ""), "n": rep.get("n", ""),
                     "mq_0.4": mq.get("0.4", ""), "mq_0.5": mq.get("0.5", ""),
                     "mq_0.6": mq.get("0.6", ""), "frechet": rep.get("frechet", "")})
    warnings = []
    for key in ("generated", "n", "thresholds", "exclude_nearest"):
        seen = {json.dumps(rep.get(key)) for _, rep in reports}
        if len(seen) > 1:
            warnings.append(f"warning: reports differ in audit setting {key!r}")
    return rows, warnings


def cmd_compare(args, extra):
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    if len(args.reports) < 2:
        raise ConfigError("compare needs at least two reports")
    reports = []
    for p in args.reports:
        p = Path(p)
        reports.append((p, _read_json(p / REPORT if p.is_dir() else p)))
    rows, warnings = compare_rows(reports)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, COMPARE_FIELDS)
            w.writeheader()
            w.writerows(rows)
    widths = {f: max(len(f), *(len(_show(r[f])) for r in rows)) for f in COMPARE_FIELDS}
    print("  ".join(f.ljust(widths[f]) for f in COMPARE_FIELDS))
    for r in rows:
        print("  ".join(_show(r[f]).ljust(widths[f]) for f in COMPARE_FIELDS))
    for w in warnings:
        print(w, file=sys.stderr)
    return EXIT_OK


def _show(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_keys(args, extra):
    for k in SCHEMA:
        print(f"{k.name:26s} {ExperimentSpec.defaults().as_text()[k.name]:24s} {k.doc}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ietagc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("gen-data", help="generate and save a dataset")
    common(g)
    g.add_argument("--manifest", help="take the settings from an experiment.json")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a run directory")
    common(t)
    t.add_argument("--manifest", help="rerun the settings recorded in an experiment.json")
    t.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                   help="one subdirectory per value (repeat for a grid)")
    t.add_argument("--audit", action="store_true", help="audit each trained model")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("audit", help="generate samples and measure memorization")
    common(a, out_required=False)
    a.add_argument("--run", help="run directory from train")
    a.add_argument("--checkpoint")
    a.add_argument("--dataset")
    a.set_defaults(func=cmd_audit)

    z = sub.add_parser("analyze", help="loss profiles and skip analyses for a run")
    common(z, out_required=False)
    z.add_argument("--run", required=True)
    z.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare", help="tabulate several audit reports")
    c.add_argument("reports", nargs="+", help="report.json files or run directories")
    c.add_argument("--out", help="CSV output path")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("keys", help="list config keys and defaults")
    k.set_defaults(func=cmd_keys)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IncompatibleArtifacts as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except IetAgcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
