"""Memorization extraction, sample-quality metric, and skip analyses."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .diffusion import DenoiserParams, Schedule, per_sample_loss
from .errors import ConfigError, NumericalError, ShapeError
from .seeding import derive_rng

DEFAULT_THRESHOLDS = (0.4, 0.5, 0.6)


@dataclass(frozen=True)
class MemorizationVerdict:
    generated_id: int
    nearest_train_id: int
    raw_l2: float
    nn_ratio: float
    flags: dict


def _pairwise(a, b, chunk=256):
    """Exact Euclidean distances (no expanded-square cancellation)."""
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        diff = a[lo:lo + chunk, None, :] - b[None, :, :]
        out[lo:lo + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def _ratios_from_distances(dist, n, exclude_nearest):
    k = n + 1 if exclude_nearest else n
    k = min(k, dist.shape[1])
    near = np.partition(dist, k - 1, axis=1)[:, :k] if k < dist.shape[1] else dist.copy()
    near.sort(axis=1)
    raw = near[:, 0]
    pool = near[:, 1:] if exclude_nearest else near
    denom = pool.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(denom > 0, raw / np.where(denom > 0, denom, 1.0),
                     np.where(raw == 0, 0.0, np.inf))
    return raw, r


def _check_train(train_x, n):
    if train_x.shape[0] < 2:
        raise ConfigError("need at least 2 training samples")
    if n < 1:
        raise ConfigError("n must be >= 1")


def nn_ratios(generated, train_x, n: int = 50, exclude_nearest: bool = False):
    """Vectorized nearest-neighbor ratio for every row of ``generated``.

    Returns (raw_l2, ratio, nearest_index) arrays. ``n`` is clamped to the
    training set size (minus one when the nearest point is excluded from
    the normalizing set).
    """
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    train_x = np.asarray(train_x, dtype=np.float64)
    _check_train(train_x, n)
    if generated.shape[1] != train_x.shape[1]:
        raise ShapeError("generated and training samples differ in dimension")
    n = min(n, train_x.shape[0] - (1 if exclude_nearest else 0))
    raws, ratios, nearest = [], [], []
    for lo in range(0, generated.shape[0], 512):
        dist = _pairwise(generated[lo:lo + 512], train_x)
        nearest.append(np.argmin(dist, axis=1))
        raw, r = _ratios_from_distances(dist, n, exclude_nearest)
        raws.append(raw)
        ratios.append(r)
    return np.concatenate(raws), np.concatenate(ratios), np.concatenate(nearest)


def nn_ratio(xbar, train, n: int = 50, exclude_nearest: bool = False):
    """(raw_l2, ratio, nearest_id) for one generated sample against a Dataset."""
    raw, r, idx = nn_ratios(np.asarray(xbar)[None, :], train.x, n, exclude_nearest)
    return float(raw[0]), float(r[0]), int(train.ids[idx[0]])


def verdicts(generated, train, n=50, thresholds=DEFAULT_THRESHOLDS, exclude_nearest=False):
    raw, r, idx = nn_ratios(generated, train.x, n, exclude_nearest)
    return [MemorizationVerdict(i, int(train.ids[idx[i]]), float(raw[i]), float(r[i]),
                                {float(th): bool(r[i] <= th) for th in thresholds})
            for i in range(raw.shape[0])]


def mq_counts(generated, train, n: int = 50, thresholds=DEFAULT_THRESHOLDS,
              exclude_nearest: bool = False) -> dict:
    """Number of generated samples with ratio <= threshold, per threshold."""
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    if generated.shape[0] == 0:
        raise ConfigError("generated set is empty")
    train_x = train.x if hasattr(train, "x") else np.asarray(train)
    _, r, _ = nn_ratios(generated, train_x, n, exclude_nearest)
    return {float(th): int(np.count_nonzero(r <= th)) for th in thresholds}


def frechet_from_stats(mu1, sigma1, mu2, sigma2, rtol: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    prod = sigma1 @ sigma2
    covmean = linalg.sqrtm(prod)
    if np.iscomplexobj(covmean):
        if not np.allclose(covmean.imag, 0, atol=1e-6 * max(1.0, np.abs(covmean).max())):
            raise NumericalError("matrix square root has a significant imaginary part")
        covmean = covmean.real
    scale = max(np.linalg.norm(prod), 1e-300)
    if np.linalg.norm(covmean @ covmean - prod) > rtol * scale + 1e-12:
        raise NumericalError("matrix square root residual exceeds tolerance")
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean), 0.0))


def gaussian_stats(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def frechet_distance(a, b) -> float:
    """Fréchet distance between Gaussian fits of two sample sets (raw space)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise ShapeError("sample sets differ in dimension")
    d = a.shape[1]
    if a.shape[0] <= d or b.shape[0] <= d:
        raise ConfigError(f"need more than d={d} samples in each set")
    return frechet_from_stats(*gaussian_stats(a), *gaussian_stats(b))


# ---------------------------------------------------------------------------
# Loss profiles


def default_t_grid(T: int):
    return np.arange(1, T + 1)


def loss_profile(params: DenoiserParams, memorized, control, schedule: Schedule,
                 draws_per_t: int = 16, seed: int = 0, t_grid=None) -> dict:
    """Monte-Carlo loss statistics per timestep for two groups of samples.

    At each t, the same ``draws_per_t`` noise vectors (stream ``(seed, t)``)
    are applied to every sample of both groups, so the groups are compared
    under common random numbers and identical groups give identical rows.
    Returns a dict of arrays keyed ``t``, ``{group}_mean``, ``{group}_p15``,
    ``{group}_p85`` with groups ``memorized`` and ``control``.
    """
    memorized = np.atleast_2d(np.asarray(memorized, dtype=np.float64))
    control = np.atleast_2d(np.asarray(control, dtype=np.float64))
    if memorized.shape[0] == 0 or control.shape[0] == 0:
        raise ConfigError("both groups must be nonempty")
    if draws_per_t < 1:
        raise ConfigError("draws_per_t must be >= 1")
    t_grid = default_t_grid(schedule.T) if t_grid is None else np.asarray(t_grid, dtype=np.int64)
    out = {"t": t_grid}
    stats = {name: ([], [], []) for name in ("memorized", "control")}
    for t in t_grid:
        eps = derive_rng(seed, "loss_profile", int(t)).standard_normal((draws_per_t, memorized.shape[1]))
        for name, group in (("memorized", memorized), ("control", control)):
            x = np.repeat(group, draws_per_t, axis=0)
            e = np.tile(eps, (group.shape[0], 1))
            losses = per_sample_loss(params, x, e, np.full(x.shape[0], t), schedule)
            means, p15, p85 = stats[name]
            means.append(losses.mean())
            p15.append(np.percentile(losses, 15))
            p85.append(np.percentile(losses, 85))
    for name, (means, p15, p85) in stats.items():
        out[f"{name}_mean"] = np.array(means)
        out[f"{name}_p15"] = np.array(p15)
        out[f"{name}_p85"] = np.array(p85)
    return out


# ---------------------------------------------------------------------------
# Skip analyses


def skip_counts(records, sample_ids) -> np.ndarray:
    """Skip count per id in ``sample_ids`` (same order)."""
    pos = {int(s): k for k, s in enumerate(sample_ids)}
    counts = np.zeros(len(pos), dtype=np.int64)
    for r in records:
        counts[pos[r.sample_id]] += 1
    return counts


def skip_histogram(records, sample_ids, total_epochs: int) -> dict:
    """Per-sample skip counts, their histogram on integer bins 0..total_epochs,
    and the 50th/90th/99th percentiles."""
    counts = skip_counts(records, sample_ids)
    top = max(int(total_epochs), int(counts.max()) if counts.size else 0)
    hist = np.bincount(counts, minlength=top + 1) if counts.size else np.zeros(top + 1, dtype=np.int64)
    q = np.percentile(counts, [50, 90, 99]) if counts.size else np.zeros(3)
    return {"ids": np.asarray(sample_ids), "counts": counts, "histogram": hist,
            "quantiles": {50: float(q[0]), 90: float(q[1]), 99: float(q[2])}}


def decile_groups(counts, fraction: float = 0.1):
    """Row indices of the most- and least-skipped ``fraction`` of samples.

    Ties are broken by row index, so the split is deterministic.
    """
    counts = np.asarray(counts)
    k = max(1, int(math.ceil(fraction * counts.size)))
    order = np.lexsort((np.arange(counts.size), -counts))
    most = order[:k]
    order_low = np.lexsort((np.arange(counts.size), counts))
    least = order_low[:k]
    return np.sort(most), np.sort(least)


def distances_to_others(rows, full_x) -> np.ndarray:
    """All l2 distances from each listed row of ``full_x`` to every other row."""
    rows = np.asarray(rows, dtype=np.int64)
    dist = _pairwise(full_x[rows], full_x)
    keep = np.ones(dist.shape, dtype=bool)
    keep[np.arange(rows.size), rows] = False
    return dist[keep]


def clustering_analysis(most_rows, least_rows, full) -> tuple:
    """Distance multisets from each group to the rest of the dataset."""
    if len(most_rows) == 0 or len(least_rows) == 0:
        raise ConfigError("both groups must be nonempty")
    return distances_to_others(most_rows, full.x), distances_to_others(least_rows, full.x)


def spectral_energy(x) -> float | np.ndarray:
    """DC-excluded energy of the orthonormal 2-D DFT of a square grid sample.

    Accepts a single flat vector or an (N, d) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    d = xb.shape[1]
    g = math.isqrt(d)
    if g * g != d:
        raise ShapeError(f"dimension {d} is not a perfect square")
    spec = np.fft.fft2(xb.reshape(-1, g, g), norm="ortho")
    power = np.abs(spec) ** 2
    energy = power.sum(axis=(1, 2)) - power[:, 0, 0]
    return float(energy[0]) if single else energy


# ---------------------------------------------------------------------------
# Output


def write_verdicts_csv(path, vs, thresholds=DEFAULT_THRESHOLDS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generated_id", "nearest_train_id", "raw_l2", "nn_ratio"]
                   + [f"mem_{th:g}" for th in thresholds])
        for v in vs:
            w.writerow([v.generated_id, v.nearest_train_id, repr(v.raw_l2), repr(v.nn_ratio)]
                       + [int(v.flags[float(th)]) for th in thresholds])


def write_table_csv(path, columns: dict):
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([_cell(columns[k][i]) for k in names])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
