"""Desk-scale experiment presets used by the scripts and the acceptance suite.

Every preset trains on 512 samples with the same total number of sample
presentations (3000 passes over the data): plain training runs 3000 epochs;
IET with K shards runs M=30 rounds of E=100 epochs per shard.
"""

from __future__ import annotations

import numpy as np

from . import pipeline
from .config import ExperimentSpec

DESK_EPOCHS = 3000
DESK_ROUNDS = 30
SEEDS = (0, 1, 2, 3, 4)


def desk_spec(method: str = "default", seed: int = 0, K: int = 1, lam: float = 0.5,
              dataset: str = "mixture", **extra) -> ExperimentSpec:
    """Spec for one desk run. ``method`` is a trainer method; K > 1 turns on IET."""
    raw = {"train.method": method, "run.seed": seed, "iet.k": K, "agc.lambda": lam,
           "data.kind": dataset}
    if K > 1:
        raw.update({"iet.m": DESK_ROUNDS, "iet.e": DESK_EPOCHS // DESK_ROUNDS})
    else:
        raw.update({"iet.m": 1, "iet.e": DESK_EPOCHS})
    raw.update(extra)
    return ExperimentSpec.defaults().updated({k: str(v) for k, v in raw.items()}, "preset")


def run_summary(spec: ExperimentSpec, audit: bool = True, profile: bool = False,
                profile_draws: int | None = None) -> dict:
    """Train, then collect the numbers the acceptance criteria look at."""
    result = pipeline.train(spec)
    out = {"spec": spec, "skips": len(result.skips)}
    if audit:
        report, _ = pipeline.audit_model(result.params, result.schedule, result.data, spec)
        out["report"] = report
        out["mq"] = report["mq"]
        out["frechet"] = report["frechet"]
    if profile:
        s = spec if profile_draws is None else spec.updated({"analyze.draws": str(profile_draws)})
        t_max = int(0.6 * result.schedule.T)
        out["profile"] = pipeline.loss_profile_for(result.params, result.schedule, result.data, s, t_max=t_max)
    if spec["train.method"] == "agc":
        out["skip_analysis"] = pipeline.skip_analysis(result.data, result.skips, result.total_epochs)
    return out


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
