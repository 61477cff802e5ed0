"""Per-timestep loss memory bank and anti-gradient control masking."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

NEVER_SKIP = float("inf")


@dataclass
class MemoryBank:
    """EMA of training losses per diffusion timestep.

    ``l[t - 1]`` holds the running loss for timestep t (1-based steps are
    the public convention; the arrays are 0-based).
    """

    l: np.ndarray
    gamma: float = 0.8
    update_count: np.ndarray = field(default=None)

    def __post_init__(self):
        self.l = np.array(self.l, dtype=np.float64)
        if self.update_count is None:
            self.update_count = np.zeros(self.l.shape, dtype=np.int64)
        self.update_count = np.array(self.update_count, dtype=np.int64)
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.update_count.shape != self.l.shape:
            raise ShapeError("update_count and l differ in shape")

    @classmethod
    def zeros(cls, T: int, gamma: float = 0.8) -> "MemoryBank":
        return cls(l=np.zeros(T), gamma=gamma)

    @property
    def T(self) -> int:
        return self.l.shape[0]

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.l.copy(), self.gamma, self.update_count.copy())

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (self.gamma == other.gamma and np.array_equal(self.l, other.l)
                and np.array_equal(self.update_count, other.update_count))


@dataclass(frozen=True)
class SkipRecord:
    sample_id: int
    t: int
    loss: float
    ratio: float
    epoch: int


def ratio(loss, bank: MemoryBank, t):
    """loss / l_t, with +inf wherever the bank entry is still zero.

    Accepts scalars or matching arrays of losses and timesteps.
    """
    ref = bank.l[np.asarray(t) - 1]
    loss = np.asarray(loss, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = np.where(ref > 0, loss / np.where(ref > 0, ref, 1.0), NEVER_SKIP)
    return float(r) if r.ndim == 0 else r


def skip_mask(losses, t, bank: MemoryBank, lam: float) -> np.ndarray:
    """Boolean array, True where ``ratio < lam`` (strict)."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return np.atleast_1d(ratio(losses, bank, t)) < lam


def apply_mask(entries, bank: MemoryBank, lam: float, epoch: int = 0):
    """Zero the losses whose ratio to the bank falls below ``lam``.

    ``entries`` is a sequence of (sample_id, t, loss). Returns the masked
    losses as an array plus SkipRecords for the zeroed entries. The bank is
    read, never written.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if len(entries) == 0:
        return np.zeros(0), []
    ids = np.array([e[0] for e in entries], dtype=np.int64)
    ts = np.array([e[1] for e in entries], dtype=np.int64)
    losses = np.array([e[2] for e in entries], dtype=np.float64)
    r = np.atleast_1d(ratio(losses, bank, ts))
    skip = r < lam
    masked = np.where(skip, 0.0, losses)
    records = [SkipRecord(int(ids[i]), int(ts[i]), float(losses[i]), float(r[i]), int(epoch))
               for i in np.flatnonzero(skip)]
    return masked, records


def update_bank(bank: MemoryBank, t, loss) -> MemoryBank:
    """EMA update ``l_t <- gamma l_t + (1 - gamma) loss``, in place; returns the bank.

    ``t`` and ``loss`` may be arrays; updates are applied in order, so repeated
    timesteps compound.
    """
    g = bank.gamma
    for ti, li in zip(np.atleast_1d(t), np.atleast_1d(loss)):
        k = int(ti) - 1
        bank.l[k] = g * bank.l[k] + (1.0 - g) * float(li)
        bank.update_count[k] += 1
    return bank


def write_skip_csv(path, records, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["sample_id", "epoch", "t", "loss", "ratio"])
        for r in records:
            w.writerow([r.sample_id, r.epoch, r.t, repr(r.loss), repr(r.ratio)])


def read_skip_csv(path):
    with open(path, newline="") as fh:
        return [SkipRecord(int(row["sample_id"]), int(row["t"]), float(row["loss"]),
                           float(row["ratio"]), int(row["epoch"]))
                for row in csv.DictReader(fh)]
