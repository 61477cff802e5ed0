"""Dataset sharding, per-shard training, and iterative parameter averaging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agc import MemoryBank
from .diffusion import DenoiserParams, Schedule
from .errors import ConfigError, ShapeError
from .seeding import derive_rng, derive_seed
from .trainer import TrainConfig, train_epochs

SPLIT_MODES = ("iid_classwise", "iid_random", "dirichlet")
BANK_POLICIES = ("average", "sequential_shared")


@dataclass
class ShardPlan:
    K: int
    shards: list  # per shard, array of row indices into the dataset
    mode: str
    dirichlet_alpha: float | None = None

    def assignment(self, data) -> dict:
        """sample id -> shard index."""
        return {int(data.ids[j]): i for i, rows in enumerate(self.shards) for j in rows}

    @property
    def sizes(self):
        return [len(s) for s in self.shards]


@dataclass(frozen=True)
class RoundConfig:
    M: int
    E: int
    train: TrainConfig = field(default_factory=TrainConfig)
    bank_policy: str = "average"

    def __post_init__(self):
        if self.M < 1 or self.E < 0:
            raise ConfigError("need M >= 1 and E >= 0")
        if self.bank_policy not in BANK_POLICIES:
            raise ConfigError(f"bank_policy must be one of {BANK_POLICIES}")

    @property
    def total_epochs(self) -> int:
        return self.M * self.E


def _deal(rows, K, sizes_so_far):
    """Round-robin ``rows`` over shards, starting at the currently smallest
    (lowest index on ties)."""
    out = [[] for _ in range(K)]
    start = int(np.argmin(sizes_so_far))
    for j, r in enumerate(rows):
        out[(start + j) % K].append(r)
    return out


def split_dataset(data, K: int, mode: str = "iid_classwise", seed: int = 0,
                  alpha: float | None = None) -> ShardPlan:
    """Partition the rows of ``data`` into K shards.

    iid_classwise deals each class's shuffled samples round-robin, so every
    shard holds floor or ceil of N_c / K per class; unlabeled data falls back
    to iid_random (a single class). dirichlet draws per-class shard
    proportions from Dir(alpha).
    """
    n = len(data)
    if mode not in SPLIT_MODES:
        raise ConfigError(f"mode must be one of {SPLIT_MODES}")
    if K < 1 or K > n:
        raise ConfigError(f"need 1 <= K <= N, got K={K}, N={n}")
    rng = derive_rng(seed, "split")
    if mode == "dirichlet":
        if not data.labels_present:
            raise ConfigError("dirichlet sharding requires class labels")
        if alpha is None or alpha <= 0:
            raise ConfigError("dirichlet sharding requires alpha > 0")
    if K == 1:
        return ShardPlan(1, [np.arange(n)], mode, alpha)
    if mode == "iid_classwise" and not data.labels_present:
        mode = "iid_random"

    shards = [[] for _ in range(K)]
    if mode == "iid_random":
        perm = rng.permutation(n)
        bounds = np.cumsum([0] + [n // K + (1 if i < n % K else 0) for i in range(K)])
        shards = [list(perm[bounds[i]:bounds[i + 1]]) for i in range(K)]
    elif mode == "iid_classwise":
        for c in np.unique(data.labels):
            rows = rng.permutation(np.flatnonzero(data.labels == c))
            dealt = _deal(rows, K, [len(s) for s in shards])
            for i in range(K):
                shards[i].extend(dealt[i])
    else:
        for c in np.unique(data.labels):
            rows = rng.permutation(np.flatnonzero(data.labels == c))
            p = rng.dirichlet(np.full(K, alpha))
            cuts = np.round(np.cumsum(p)[:-1] * rows.size).astype(int)
            for i, part in enumerate(np.split(rows, cuts)):
                shards[i].extend(part)
        # guarantee every shard is nonempty
        for i in range(K):
            if not shards[i]:
                donor = int(np.argmax([len(s) for s in shards]))
                shards[i].append(shards[donor].pop())
    return ShardPlan(K, [np.sort(np.asarray(s, dtype=np.int64)) for s in shards], mode, alpha)


def aggregate(models) -> DenoiserParams:
    """Unweighted mean of parameter vectors.

    Computed as first + mean(model - first), which returns the common value
    exactly when all inputs are equal.
    """
    models = list(models)
    if not models:
        raise ConfigError("cannot aggregate an empty list")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise ShapeError(f"architecture mismatch: {m.arch} vs {arch}")
    ref = models[0].flat
    if len(models) == 1:
        return models[0].copy()
    diff = np.mean(np.stack([m.flat - ref for m in models]), axis=0)
    return DenoiserParams(arch, ref + diff)


def aggregate_banks(banks) -> MemoryBank:
    """Elementwise mean of EMA values (anchored like :func:`aggregate`); counts summed."""
    banks = list(banks)
    if not banks:
        raise ConfigError("cannot aggregate an empty list")
    T, gamma = banks[0].T, banks[0].gamma
    for b in banks[1:]:
        if b.T != T or b.gamma != gamma:
            raise ShapeError("banks differ in T or gamma")
    ref = banks[0].l
    l = ref + np.mean(np.stack([b.l - ref for b in banks]), axis=0) if len(banks) > 1 else ref.copy()
    counts = np.sum(np.stack([b.update_count for b in banks]), axis=0)
    return MemoryBank(l, gamma, counts)


def shard_seed(base_seed: int, shard: int) -> int:
    """Training seed of shard ``shard``; epoch streams add the global epoch index."""
    return derive_seed(base_seed, "shard", shard)


def run_iet(data, plan: ShardPlan, rc: RoundConfig, schedule: Schedule, init: DenoiserParams,
            base_seed: int = 0, bank: MemoryBank | None = None, on_shard=None, on_round=None):
    """Rounds of: broadcast global model, train every shard E epochs, average.

    Shard i in round m trains with seed ``shard_seed(base_seed, i)`` over
    global epochs m*E .. (m+1)*E - 1, so its randomness depends only on
    (base_seed, m, i, epoch). Returns (params, bank, log) where ``log`` holds
    per-round, per-shard statistics plus every SkipRecord. ``on_shard`` and
    ``on_round`` are optional progress/checkpoint hooks.
    """
    if data.d != init.arch.d:
        raise ShapeError(f"data dimension {data.d} != model dimension {init.arch.d}")
    global_params = init.copy()
    global_bank = MemoryBank.zeros(schedule.T, rc.train.gamma) if bank is None else bank.copy()
    shard_data = [data.subset(rows) for rows in plan.shards]
    log = {"rounds": [], "skips": [], "epoch_stats": []}
    for m in range(rc.M):
        shard_models, shard_banks, shard_logs = [], [], []
        running_bank = global_bank
        for i in range(plan.K):
            cfg = rc.train.with_(epochs=rc.E, seed=shard_seed(base_seed, i))
            start_bank = running_bank if rc.bank_policy == "sequential_shared" else global_bank
            p, b, stats, skips = train_epochs(global_params, shard_data[i], cfg, start_bank,
                                              schedule, epoch_offset=m * rc.E)
            if rc.bank_policy == "sequential_shared":
                running_bank = b
            shard_models.append(p)
            shard_banks.append(b)
            log["skips"].extend(skips)
            log["epoch_stats"].extend((m, i, s) for s in stats)
            shard_logs.append({
                "shard": i, "samples": len(shard_data[i]), "epochs": rc.E,
                "mean_loss": float(np.mean([s.mean_loss for s in stats])) if stats else None,
                "final_loss": stats[-1].mean_loss if stats else None,
                "skipped": int(sum(s.skipped for s in stats)),
            })
            if on_shard is not None:
                on_shard(m, i, p, b, stats)
        global_params = aggregate(shard_models)
        if rc.bank_policy == "sequential_shared":
            global_bank = running_bank
        else:
            # shard banks all inherit the global counts; add only their new updates
            merged = aggregate_banks(shard_banks)
            merged.update_count = global_bank.update_count + sum(
                b.update_count - global_bank.update_count for b in shard_banks)
            global_bank = merged
        for entry, p in zip(shard_logs, shard_models):
            entry["distance_to_global"] = float(np.linalg.norm(p.flat - global_params.flat))
        log["rounds"].append({"round": m, "shards": shard_logs})
        if on_round is not None:
            on_round(m, global_params, global_bank)
    return global_params, global_bank, log
