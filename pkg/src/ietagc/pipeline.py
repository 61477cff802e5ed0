"""In-memory experiment pipeline shared by the CLI, the scripts, and the
acceptance tests: spec -> dataset -> training -> audit -> analyses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import audit
from .agc import MemoryBank
from .config import ExperimentSpec
from .data import Dataset, gen_mixture, gen_patterns, load_dataset
from .diffusion import Architecture, DenoiserParams, Schedule, build_schedule, init_params, sample_generate
from .errors import IncompatibleArtifacts
from .iet import RoundConfig, run_iet, split_dataset
from .seeding import derive_seed
from .trainer import TrainConfig


DEFAULT_DUPS = {"mixture": (("central", 16),), "patterns": (("flat", 16),)}


def build_dataset(spec: ExperimentSpec) -> Dataset:
    kind = spec["data.kind"]
    if kind == "file":
        return load_dataset(spec["data.path"])
    dups = DEFAULT_DUPS[kind] if spec["data.dup"] == "default" else spec["data.dup"]
    if kind == "mixture":
        return gen_mixture(spec["data.components"], spec["data.per_component"], spec["data.d"],
                           dup_spec=dups, seed=spec["data.seed"],
                           spread=spec["data.spread"], dup_location=spec["data.dup_location"])
    return gen_patterns(spec["data.count"], spec["data.grid"], dict(spec["data.mix"]),
                        dup_spec=dups, seed=spec["data.seed"])


def build_schedule_for(spec: ExperimentSpec) -> Schedule:
    return build_schedule(spec["schedule.t"], spec["schedule.beta_min"], spec["schedule.beta_max"])


def architecture_for(spec: ExperimentSpec, d: int) -> Architecture:
    return Architecture(d=d, T=spec["schedule.t"], emb_dim=spec["model.emb"], hidden=spec["model.hidden"])


def train_config_for(spec: ExperimentSpec) -> TrainConfig:
    return TrainConfig(method=spec["train.method"], eta=spec["train.eta"],
                       batch_size=spec["train.batch_size"], epochs=spec["iet.e"],
                       lam=spec["agc.lambda"], gamma=spec["agc.gamma"], tau=spec["dp.tau"],
                       input_noise_var=spec["noise.var"], seed=spec["run.seed"],
                       per_sample_update=spec["agc.per_sample_update"])


def round_config_for(spec: ExperimentSpec) -> RoundConfig:
    return RoundConfig(M=spec["iet.m"], E=spec["iet.e"], train=train_config_for(spec),
                       bank_policy=spec["iet.bank_policy"])


@dataclass
class TrainResult:
    spec: ExperimentSpec
    data: Dataset
    schedule: Schedule
    params: DenoiserParams
    bank: MemoryBank
    log: dict

    @property
    def skips(self):
        return self.log["skips"]

    @property
    def total_epochs(self) -> int:
        return self.spec["iet.m"] * self.spec["iet.e"]


def train(spec: ExperimentSpec, data: Dataset | None = None, on_round=None) -> TrainResult:
    """Train the model described by ``spec`` (IET with K = 1 is plain training)."""
    data = build_dataset(spec) if data is None else data
    schedule = build_schedule_for(spec)
    arch = architecture_for(spec, data.d)
    seed = spec["run.seed"]
    init = init_params(arch, derive_seed(seed, "init"))
    plan = split_dataset(data, spec["iet.k"], spec["iet.mode"], seed=derive_seed(seed, "split"),
                         alpha=spec["iet.alpha"] if spec["iet.mode"] == "dirichlet" else None)
    params, bank, log = run_iet(data, plan, round_config_for(spec), schedule, init,
                                base_seed=seed, on_round=on_round)
    log["shard_sizes"] = plan.sizes
    return TrainResult(spec, data, schedule, params, bank, log)


def check_compatible(params: DenoiserParams, schedule: Schedule, data: Dataset):
    if params.arch.d != data.d or params.arch.T != schedule.T:
        raise IncompatibleArtifacts(
            f"checkpoint descriptor (d={params.arch.d}, T={params.arch.T}) does not match "
            f"dataset descriptor (d={data.d}) / schedule (T={schedule.T})")


def sampling_seed(spec: ExperimentSpec) -> int:
    return derive_seed(spec["run.seed"], "audit", spec["audit.seed"])


def audit_model(params: DenoiserParams, schedule: Schedule, data: Dataset, spec: ExperimentSpec,
                generated=None):
    """Generate samples and score them. Returns (report dict, verdict list)."""
    check_compatible(params, schedule, data)
    if generated is None:
        generated = sample_generate(params, schedule, spec["audit.count"], sampling_seed(spec))
    thresholds = spec["audit.thresholds"]
    n = min(spec["audit.n"], len(data))
    vs = audit.verdicts(generated, data, n, thresholds, spec["audit.exclude_nearest"])
    mq = {f"{th:g}": sum(v.flags[float(th)] for v in vs) for th in thresholds}
    report = {
        "method": spec.method_label(),
        "generated": int(generated.shape[0]),
        "n": n,
        "exclude_nearest": spec["audit.exclude_nearest"],
        "thresholds": [float(t) for t in thresholds],
        "mq": mq,
        "frechet": audit.frechet_distance(generated, data.x),
        "nn_ratio_quantiles": {str(q): float(np.percentile([v.nn_ratio for v in vs], q))
                               for q in (1, 5, 25, 50)},
    }
    return report, vs


def memorized_rows(data: Dataset, min_dup: int = 2) -> np.ndarray:
    """Rows of one representative per duplicate group with >= min_dup copies."""
    rows = []
    for rep, count in data.duplication_map.items():
        if count >= min_dup:
            rows.append(int(np.flatnonzero(data.dup_rep == rep)[0]))
    return np.array(sorted(rows), dtype=np.int64)


def control_rows(data: Dataset, count: int, seed: int) -> np.ndarray:
    unique = np.flatnonzero(~data.duplicated_mask)
    if unique.size <= count:
        return unique
    rng = np.random.default_rng(derive_seed(seed, "control"))
    return np.sort(rng.choice(unique, size=count, replace=False))


def loss_profile_for(params, schedule, data, spec, t_max=None):
    mem = memorized_rows(data, spec["analyze.min_dup"])
    if mem.size == 0:
        return None
    ctrl = control_rows(data, spec["analyze.control"], spec["run.seed"])
    t_grid = np.arange(1, (t_max or schedule.T) + 1)
    return audit.loss_profile(params, data.x[mem], data.x[ctrl], schedule,
                              draws_per_t=spec["analyze.draws"],
                              seed=derive_seed(spec["run.seed"], "profile"), t_grid=t_grid)


def skip_analysis(data: Dataset, skips, total_epochs: int) -> dict:
    """Skip histogram plus decile-group distance and energy summaries."""
    hist = audit.skip_histogram(skips, data.ids, total_epochs)
    most, least = audit.decile_groups(hist["counts"])
    d_most, d_least = audit.clustering_analysis(most, least, data)
    out = {"histogram": hist, "most_rows": most, "least_rows": least,
           "dist_most": d_most, "dist_least": d_least}
    if math.isqrt(data.d) ** 2 == data.d:
        out["energy_most"] = audit.spectral_energy(data.x[most])
        out["energy_least"] = audit.spectral_energy(data.x[least])
    dup = data.duplicated_mask
    counts = hist["counts"]
    out["median_skips_duplicated"] = float(np.median(counts[dup])) if dup.any() else None
    out["median_skips_unique"] = float(np.median(counts[~dup])) if (~dup).any() else None
    return out
