"""Single-model training loop: default DDPM training, anti-gradient control,
input-noise baseline, and the norm-scaled DP-SGD baseline."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .agc import MemoryBank, SkipRecord, ratio, update_bank
from .diffusion import DenoiserParams, LossEvaluation, Schedule
from .errors import ConfigError, ShapeError, TrainingDiverged
from .seeding import derive_rng

METHODS = ("default", "agc", "dp_sgd", "input_noise")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "default"
    eta: float = 0.05
    batch_size: int = 64
    epochs: int = 1
    lam: float = 0.5
    gamma: float = 0.8
    tau: float = 0.0005
    input_noise_var: float = 0.1
    seed: int = 0
    per_sample_update: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.tau < 0 or self.input_noise_var < 0:
            raise ConfigError("tau and input_noise_var must be >= 0")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    skipped: int
    samples: int
    grad_norm_mean: float
    grad_norm_max: float


def sgd_step(params: DenoiserParams, grad, eta: float) -> DenoiserParams:
    """theta <- theta - eta * grad."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.flat.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingDiverged("non-finite gradient")
    return params.with_flat(params.flat - eta * grad)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def dp_noise(grad, tau: float, seed) -> np.ndarray:
    """grad + N(0, sigma^2 I) with sigma = ||grad||_2 * tau."""
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    grad = np.asarray(grad, dtype=np.float64)
    if tau == 0:
        return grad.copy()
    sigma = float(np.linalg.norm(grad)) * tau
    return grad + sigma * _rng(seed).standard_normal(grad.shape)


def add_input_noise(x, var: float, seed) -> np.ndarray:
    """x + N(0, var) elementwise."""
    if var < 0:
        raise ConfigError("var must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if var == 0:
        return x.copy()
    return x + math.sqrt(var) * _rng(seed).standard_normal(x.shape)


def epoch_rngs(seed: int, epoch: int):
    """Independent (batch, input-noise, dp-noise) generators for one epoch."""
    return (derive_rng(seed, "batches", epoch), derive_rng(seed, "input_noise", epoch),
            derive_rng(seed, "dp_noise", epoch))


def _agc_mask(losses, ids, t, bank, cfg, epoch):
    """Skip flags and records; updates the bank per the configured ordering."""
    if cfg.per_sample_update:
        skip = np.zeros(losses.shape[0], dtype=bool)
        r = np.empty(losses.shape[0])
        for i in range(losses.shape[0]):
            r[i] = ratio(losses[i], bank, t[i])
            skip[i] = r[i] < cfg.lam
            update_bank(bank, t[i], losses[i])
    else:
        r = np.atleast_1d(ratio(losses, bank, t))
        skip = r < cfg.lam
        update_bank(bank, t, losses)
    records = [SkipRecord(int(ids[i]), int(t[i]), float(losses[i]), float(r[i]), epoch)
               for i in np.flatnonzero(skip)]
    return skip, records


def train_epochs(params: DenoiserParams, data, cfg: TrainConfig, bank: MemoryBank | None,
                 schedule: Schedule, epoch_offset: int = 0, on_epoch=None):
    """Run ``cfg.epochs`` shuffled passes over ``data``.

    Each presentation draws its own t ~ U{1..T} and eps ~ N(0, I). The random
    streams for epoch e depend only on ``(cfg.seed, epoch_offset + e)``, so a
    run split into pieces with matching offsets reproduces the unsplit run.
    The bank is updated with unmasked losses for every method; it only
    influences training when ``cfg.method == "agc"``.

    Returns (params, bank, list of EpochStats, list of SkipRecord).
    """
    if len(data) == 0:
        raise ConfigError("empty dataset")
    if data.d != params.arch.d:
        raise ShapeError(f"data dimension {data.d} != model dimension {params.arch.d}")
    bank = MemoryBank.zeros(schedule.T, cfg.gamma) if bank is None else bank.copy()
    if bank.T != schedule.T:
        raise ShapeError(f"bank has {bank.T} entries, schedule has T={schedule.T}")
    n = len(data)
    stats, skips = [], []
    for e in range(cfg.epochs):
        epoch = epoch_offset + e
        rng, noise_rng, dp_rng = epoch_rngs(cfg.seed, epoch)
        order = rng.permutation(n)
        start = params
        loss_sum, n_skipped, norms = 0.0, 0, []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            B = idx.size
            t = rng.integers(1, schedule.T + 1, size=B)
            eps = rng.standard_normal((B, data.d))
            x0 = data.x[idx]
            if cfg.method == "input_noise":
                x0 = add_input_noise(x0, cfg.input_noise_var, noise_rng)
            ev = LossEvaluation(params, x0, eps, t, schedule)
            losses = ev.losses
            if not np.all(np.isfinite(losses)):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", epoch=epoch,
                                       last_good=epoch - 1, params=start)
            if cfg.method == "agc":
                skip, recs = _agc_mask(losses, data.ids[idx], t, bank, cfg, epoch)
                skips.extend(recs)
                n_skipped += len(recs)
                grad = ev.gradient(np.where(skip, 0.0, 1.0))
            else:
                update_bank(bank, t, losses)
                grad = ev.gradient()
            norms.append(float(np.linalg.norm(grad)))
            if cfg.method == "dp_sgd":
                grad = dp_noise(grad, cfg.tau, dp_rng)
            try:
                params = sgd_step(params, grad, cfg.eta)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), epoch=epoch, last_good=epoch - 1, params=start) from None
            loss_sum += float(losses.sum())
        st = EpochStats(epoch, loss_sum / n, n_skipped, n, float(np.mean(norms)), float(np.max(norms)))
        stats.append(st)
        if on_epoch is not None:
            on_epoch(st, params, bank)
    return params, bank, stats, skips


EPOCH_CSV_FIELDS = ["epoch", "mean_loss", "skipped", "grad_norm_mean", "grad_norm_max"]


def write_epoch_csv(path, stats, extra=None):
    """EpochStats rows; ``extra`` is a list of dicts of leading columns (e.g. round, shard)."""
    extra = extra or [{} for _ in stats]
    lead = list(extra[0].keys()) if extra else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(lead + EPOCH_CSV_FIELDS)
        for ex, s in zip(extra, stats):
            w.writerow([ex[k] for k in lead] + [s.epoch, repr(s.mean_loss), s.skipped,
                                                repr(s.grad_norm_mean), repr(s.grad_norm_max)])
