"""Synthetic datasets with injected exact duplicates, and their binary format."""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

PATTERN_FAMILIES = ("flat", "gradient", "texture")


@dataclass
class Dataset:
    """Training samples as rows of ``x``.

    ``dup_rep[i]`` is the id of the representative of sample i's duplicate
    group, or -1 for samples that were not injected as duplicates.
    """

    x: np.ndarray
    labels: np.ndarray | None = None
    ids: np.ndarray | None = None
    dup_rep: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ShapeError("samples must form an (N, d) array")
        n = self.x.shape[0]
        self.ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        self.dup_rep = (np.full(n, -1, dtype=np.int64) if self.dup_rep is None
                        else np.asarray(self.dup_rep, dtype=np.int64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        for name, arr in (("ids", self.ids), ("dup_rep", self.dup_rep), ("labels", self.labels)):
            if arr is not None and arr.shape != (n,):
                raise ShapeError(f"{name} must have length {n}")
        if np.unique(self.ids).size != n:
            raise ConfigError("sample ids must be unique")

    def __len__(self):
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def labels_present(self) -> bool:
        return self.labels is not None

    @property
    def duplication_map(self) -> dict:
        reps, counts = np.unique(self.dup_rep[self.dup_rep >= 0], return_counts=True)
        return {int(r): int(c) for r, c in zip(reps, counts)}

    @property
    def duplicated_mask(self) -> np.ndarray:
        return self.dup_rep >= 0

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.x[index], None if self.labels is None else self.labels[index],
                       self.ids[index], self.dup_rep[index], dict(self.meta))

    def index_of(self, ids) -> np.ndarray:
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        return np.array([lookup[int(i)] for i in np.atleast_1d(ids)], dtype=np.int64)

    def content_hash(self) -> str:
        """SHA-256 over the serialized dataset."""
        return hashlib.sha256(dataset_bytes(self)).hexdigest()


def _parse_dup_spec(dup_spec):
    out = []
    for group, copies in dup_spec or ():
        if copies < 1:
            raise ConfigError("duplicate copies must be >= 1")
        out.append((group, int(copies)))
    return out


def _normalize(x):
    """Min-max scale each coordinate to [-1, 1] (constant coordinates map to -1)."""
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return 2.0 * (x - lo) / span - 1.0


def gen_mixture(components: int, per_component: int, d: int, dup_spec=(), seed: int = 0,
                spread: float = 0.35, box: float = 2.0, dup_location: str = "center") -> Dataset:
    """Isotropic Gaussian mixture plus exact-duplicate injections.

    Component means are uniform in ``[-box, box]^d``; each ``(component, copies)``
    in ``dup_spec`` appends ``copies`` identical samples drawn once from that
    component: its mean for ``dup_location="center"``, a fresh draw for
    ``"draw"``. A component given as ``"central"`` resolves to the component
    whose mean lies closest to the average of all means. Coordinates are
    then min-max scaled to [-1, 1].
    """
    if components < 1:
        raise ConfigError("components must be >= 1")
    if per_component < 0 or d < 1:
        raise ConfigError("per_component must be >= 0 and d >= 1")
    dup_spec = _parse_dup_spec(dup_spec)
    if dup_location not in ("center", "draw"):
        raise ConfigError(f"dup_location must be 'center' or 'draw', got {dup_location!r}")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-box, box, size=(components, d))
    labels = np.repeat(np.arange(components), per_component)
    x = means[labels] + spread * rng.standard_normal((labels.size, d))
    xs, ls, reps = [x], [labels], [np.full(labels.size, -1)]
    n = labels.size
    central = int(np.argmin(np.linalg.norm(means - means.mean(axis=0), axis=1)))
    for comp, copies in dup_spec:
        comp = central if comp == "central" else comp
        if not 0 <= comp < components:
            raise ConfigError(f"duplicate component {comp} out of range")
        offset = spread * rng.standard_normal(d)
        point = means[comp] + (offset if dup_location == "draw" else 0.0)
        xs.append(np.tile(point, (copies, 1)))
        ls.append(np.full(copies, comp))
        reps.append(np.full(copies, n))
        n += copies
    if n == 0:
        raise ConfigError("mixture would be empty")
    raw = np.concatenate(xs)
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    x = _normalize(raw)
    span = np.where(hi > lo, hi - lo, 1.0)
    return Dataset(x, np.concatenate(ls), dup_rep=np.concatenate(reps),
                   meta={"kind": "mixture", "components": components,
                         "per_component": per_component, "seed": seed,
                         "means": 2.0 * (means - lo) / span - 1.0, "central": central})


def _pattern(family, grid, rng):
    u, v = np.meshgrid(np.linspace(-1, 1, grid), np.linspace(-1, 1, grid), indexing="ij")
    if family == "flat":
        img = np.full((grid, grid), rng.uniform(-0.8, 0.8))
    elif family == "gradient":
        theta = rng.uniform(0, 2 * math.pi)
        slope = rng.uniform(0.2, 0.6)
        img = rng.uniform(-0.3, 0.3) + slope * (math.cos(theta) * u + math.sin(theta) * v)
    elif family == "texture":
        img = np.zeros((grid, grid))
        idx = np.arange(grid)
        for _ in range(3):
            ku, kv = rng.integers(grid // 4, grid // 2 + 1, size=2)
            phase = rng.uniform(0, 2 * math.pi)
            img += 0.3 * np.cos(2 * math.pi * (ku * idx[:, None] + kv * idx[None, :]) / grid + phase)
        img += 0.15 * rng.standard_normal((grid, grid))
    else:
        raise ConfigError(f"unknown pattern family {family!r}")
    return np.clip(img, -1.0, 1.0).ravel()


def gen_patterns(count: int, grid: int = 8, complexity_mix=None, dup_spec=(), seed: int = 0) -> Dataset:
    """Tiny grid images from low-frequency (flat, gradient) and high-frequency
    (texture) families; labels are family indices into ``PATTERN_FAMILIES``.

    ``complexity_mix`` maps family name to weight (default: equal thirds).
    ``dup_spec`` entries are ``(family, copies)`` by name or index.
    """
    if count < 0 or grid < 1:
        raise ConfigError("count must be >= 0 and grid >= 1")
    mix = complexity_mix or {f: 1.0 for f in PATTERN_FAMILIES}
    unknown = set(mix) - set(PATTERN_FAMILIES)
    if unknown:
        raise ConfigError(f"unknown pattern families {sorted(unknown)}")
    weights = np.array([mix.get(f, 0.0) for f in PATTERN_FAMILIES], dtype=np.float64)
    if weights.sum() <= 0:
        raise ConfigError("complexity_mix must have positive total weight")
    dup_spec = _parse_dup_spec(dup_spec)
    rng = np.random.default_rng(seed)
    # exact proportions, remainder to the earliest families
    counts = np.floor(weights / weights.sum() * count).astype(int)
    for k in np.argsort(-weights, kind="stable")[: count - counts.sum()]:
        counts[k] += 1
    labels = rng.permutation(np.repeat(np.arange(len(PATTERN_FAMILIES)), counts))
    xs = [np.stack([_pattern(PATTERN_FAMILIES[k], grid, rng) for k in labels])
          if count else np.zeros((0, grid * grid))]
    ls, reps = [labels], [np.full(count, -1)]
    n = count
    for fam, copies in dup_spec:
        if fam not in PATTERN_FAMILIES and not (isinstance(fam, int) and 0 <= fam < len(PATTERN_FAMILIES)):
            raise ConfigError(f"unknown pattern family {fam!r}")
        k = PATTERN_FAMILIES.index(fam) if isinstance(fam, str) else int(fam)
        point = _pattern(PATTERN_FAMILIES[k], grid, rng)
        xs.append(np.tile(point, (copies, 1)))
        ls.append(np.full(copies, k))
        reps.append(np.full(copies, n))
        n += copies
    return Dataset(np.concatenate(xs), np.concatenate(ls), dup_rep=np.concatenate(reps),
                   meta={"kind": "patterns", "grid": grid, "seed": seed})


def default_mixture(seed: int = 0) -> Dataset:
    """512 samples in d=8: 8 components x 62 plus the mean of the most
    central component copied 16 times."""
    return gen_mixture(8, 62, 8, dup_spec=[("central", 16)], seed=seed)


def default_patterns(seed: int = 0) -> Dataset:
    """512 8x8 images: 496 across the three families plus one flat image copied 16 times."""
    return gen_patterns(496, 8, dup_spec=[("flat", 16)], seed=seed)


# ---------------------------------------------------------------------------
# Binary format

DATASET_MAGIC = b"IETAGCDS"
DATASET_VERSION = 1


def dataset_bytes(ds: Dataset) -> bytes:
    """magic, version, d, N, label flag, samples, ids, labels, duplicate table."""
    n, d = ds.x.shape
    parts = [DATASET_MAGIC, struct.pack("<IQQB", DATASET_VERSION, d, n, int(ds.labels_present)),
             ds.x.astype("<f8").tobytes(), ds.ids.astype("<i8").tobytes()]
    if ds.labels_present:
        parts.append(ds.labels.astype("<i8").tobytes())
    parts.append(ds.dup_rep.astype("<i8").tobytes())
    return b"".join(parts)


def dataset_from_bytes(data: bytes) -> Dataset:
    head = len(DATASET_MAGIC) + struct.calcsize("<IQQB")
    if len(data) < head:
        raise FormatError("truncated dataset file")
    if data[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    version, d, n, has_labels = struct.unpack("<IQQB", data[len(DATASET_MAGIC):head])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    expected = head + 8 * (n * d + n * (2 + int(has_labels)))
    if len(data) != expected:
        raise FormatError(f"corrupt dataset file: {len(data)} bytes, expected {expected}")
    off = head

    def block(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += 8 * count
        return arr.astype(np.dtype(dtype).newbyteorder("="))

    x = block(n * d, "<f8").reshape(n, d)
    ids = block(n, "<i8")
    labels = block(n, "<i8") if has_labels else None
    dup_rep = block(n, "<i8")
    return Dataset(x, labels, ids, dup_rep)


def save_dataset(path, ds: Dataset):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def export_csv(path, ds: Dataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "dup_rep"] + [f"x{j}" for j in range(ds.d)])
        for i in range(len(ds)):
            label = "" if ds.labels is None else int(ds.labels[i])
            w.writerow([int(ds.ids[i]), label, int(ds.dup_rep[i])] + [repr(float(v)) for v in ds.x[i]])
