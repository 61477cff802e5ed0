"""Diffusion primitives: noise schedule, forward noising, MLP denoiser,
per-sample loss with hand-written backprop, and ancestral sampling.

Everything is float64. The denoiser parameters live in one flat vector;
layer matrices are reshaped views into it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, FormatError, ShapeError

TERMINAL_ALPHA = 1e-4


@dataclass(frozen=True)
class Schedule:
    """Linear-beta DDPM schedule.

    ``alpha[t]`` is the cumulative signal coefficient for t = 0..T with
    ``alpha[0] == 1``; ``beta[t - 1]`` is the per-step variance of step t.
    """

    T: int
    alpha: np.ndarray
    beta: np.ndarray
    beta_min: float = float("nan")
    beta_max: float = float("nan")
    requested_beta_max: float = float("nan")

    @property
    def adjusted(self) -> bool:
        return self.beta_max != self.requested_beta_max

    @classmethod
    def from_betas(cls, beta) -> "Schedule":
        """Schedule from explicit per-step variances; no terminal constraint."""
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("beta must be a nonempty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ConfigError("every beta must lie in (0, 1)")
        alpha = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        return cls(T=beta.size, alpha=alpha, beta=beta,
                   beta_min=float(beta.min()), beta_max=float(beta.max()),
                   requested_beta_max=float(beta.max()))


def _linear_betas(T, beta_min, beta_max):
    return np.linspace(beta_min, beta_max, T, dtype=np.float64)


def _terminal_alpha(T, beta_min, beta_max):
    return float(np.prod(1.0 - _linear_betas(T, beta_min, beta_max)))


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> Schedule:
    """Linear beta schedule with ``alpha[T] <= 1e-4``.

    When the requested ``beta_max`` leaves too much signal at step T, it is
    raised (bisection) until the terminal constraint holds; the requested
    value is kept on the schedule as ``requested_beta_max``.
    """
    if int(T) != T or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    T = int(T)
    requested = float(beta_max)
    if _terminal_alpha(T, beta_min, beta_max) > TERMINAL_ALPHA:
        lo, hi = beta_max, 1.0 - 1e-12
        if _terminal_alpha(T, beta_min, hi) > TERMINAL_ALPHA:
            raise ConfigError(f"no beta_max < 1 reaches alpha[T] <= {TERMINAL_ALPHA} with T={T}")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _terminal_alpha(T, beta_min, mid) > TERMINAL_ALPHA:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-15:
                break
        beta_max = hi
    beta = _linear_betas(T, beta_min, beta_max)
    alpha = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return Schedule(T=T, alpha=alpha, beta=beta, beta_min=float(beta_min),
                    beta_max=float(beta_max), requested_beta_max=requested)


def forward_noise(x, eps, t, schedule: Schedule):
    """x_t = sqrt(alpha_t) x + sqrt(1 - alpha_t) eps.

    ``x``/``eps`` may be single vectors or (B, d) batches with ``t`` of shape (B,).
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ShapeError(f"x has shape {x.shape} but eps has shape {eps.shape}")
    a = schedule.alpha[np.asarray(t)]
    if x.ndim == 2:
        a = np.reshape(a, (-1, 1))
    return np.sqrt(a) * x + np.sqrt(1.0 - a) * eps


# ---------------------------------------------------------------------------
# Denoiser


@dataclass(frozen=True)
class Architecture:
    d: int
    T: int
    emb_dim: int = 32
    hidden: tuple = (128, 128)

    def __post_init__(self):
        if self.emb_dim % 2:
            raise ConfigError("time embedding width must be even")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def widths(self) -> tuple:
        return (self.d + self.emb_dim, *self.hidden, self.d)

    def shapes(self):
        """(name, shape) for each parameter block in flat-vector order."""
        w = self.widths
        out = []
        for i in range(len(w) - 1):
            out.append((f"W{i}", (w[i], w[i + 1])))
            if i < len(w) - 2:
                out.append((f"b{i}", (w[i + 1],)))
        return out

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes())


@dataclass
class DenoiserParams:
    """Denoiser weights stored as one flat float64 vector."""

    arch: Architecture
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.arch.n_params,):
            raise ShapeError(f"expected {self.arch.n_params} parameters, got {self.flat.shape}")

    def blocks(self) -> dict:
        out, off = {}, 0
        for name, shape in self.arch.shapes():
            n = math.prod(shape)
            out[name] = self.flat[off:off + n].reshape(shape)
            off += n
        return out

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.flat.copy())

    def with_flat(self, flat) -> "DenoiserParams":
        return DenoiserParams(self.arch, flat)


def flatten(blocks: dict, arch: Architecture) -> np.ndarray:
    return np.concatenate([np.asarray(blocks[name], dtype=np.float64).ravel()
                           for name, _ in arch.shapes()])


def unflatten(flat, arch: Architecture) -> dict:
    return {k: v.copy() for k, v in DenoiserParams(arch, flat).blocks().items()}


def init_params(arch: Architecture, seed: int) -> DenoiserParams:
    """Gaussian init with std 1/sqrt(fan_in) for weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in arch.shapes():
        if name.startswith("W"):
            parts.append(rng.standard_normal(shape).ravel() / math.sqrt(shape[0]))
        else:
            parts.append(np.zeros(shape))
    return DenoiserParams(arch, np.concatenate(parts))


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape (B, dim): [sin(t f_k), cos(t f_k)]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(a):
    return a * expit(a)


def _silu_grad(a):
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


def _check_input(params, x_t, t):
    arch = params.arch
    if x_t.ndim != 2 or x_t.shape[1] != arch.d:
        raise ShapeError(f"expected inputs of dimension {arch.d}, got shape {x_t.shape}")
    if t.shape != (x_t.shape[0],):
        raise ShapeError(f"expected {x_t.shape[0]} timesteps, got shape {t.shape}")
    if t.size and (t.min() < 1 or t.max() > arch.T):
        raise ShapeError(f"timesteps must lie in [1, {arch.T}]")


def _forward(params: DenoiserParams, x_t, t):
    blocks = params.blocks()
    n_layers = len(params.arch.widths) - 1
    h = np.concatenate([x_t, time_embedding(t, params.arch.emb_dim)], axis=1)
    inputs, pre = [h], []
    for i in range(n_layers - 1):
        a = h @ blocks[f"W{i}"] + blocks[f"b{i}"]
        pre.append(a)
        h = _silu(a)
        inputs.append(h)
    out = h @ blocks[f"W{n_layers - 1}"]
    return out, (inputs, pre)


def _backward(params: DenoiserParams, cache, grad_out) -> np.ndarray:
    inputs, pre = cache
    blocks = params.blocks()
    n_layers = len(params.arch.widths) - 1
    grads = {}
    g = grad_out
    for i in range(n_layers - 1, -1, -1):
        grads[f"W{i}"] = inputs[i].T @ g
        if i == 0:
            break
        g = (g @ blocks[f"W{i}"].T) * _silu_grad(pre[i - 1])
        grads[f"b{i - 1}"] = g.sum(axis=0)
    return flatten(grads, params.arch)


def denoiser_forward(params: DenoiserParams, x_t, t) -> np.ndarray:
    """Predicted noise for ``x_t`` at step ``t`` (single vector or batch)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    xb = x_t[None, :] if single else x_t
    tb = np.broadcast_to(np.asarray(t, dtype=np.int64), (xb.shape[0],)).copy()
    _check_input(params, xb, tb)
    out, _ = _forward(params, xb, tb)
    return out[0] if single else out


class LossEvaluation:
    """Forward pass over a batch, cached so that gradients can be taken
    with per-sample weights chosen after the losses are known."""

    def __init__(self, params: DenoiserParams, x0, eps, t, schedule: Schedule):
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if x0.shape != eps.shape:
            raise ShapeError(f"x has shape {x0.shape} but eps has shape {eps.shape}")
        if x0.shape[0] == 0:
            raise ShapeError("empty batch")
        x_t = forward_noise(x0, eps, t, schedule)
        _check_input(params, x_t, t)
        self.params = params
        self.eps = eps
        self.pred, self._cache = _forward(params, x_t, t)
        self.residual = eps - self.pred
        self.losses = np.einsum("ij,ij->i", self.residual, self.residual)

    def gradient(self, weights=None) -> np.ndarray:
        """Gradient of ``mean_i(w_i * loss_i)`` w.r.t. the flat parameters."""
        B = self.losses.shape[0]
        w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
        grad_out = (-2.0 / B) * w[:, None] * self.residual
        return _backward(self.params, self._cache, grad_out)


def per_sample_loss(params: DenoiserParams, x, eps, t, schedule: Schedule):
    """Squared-norm noise-prediction loss; scalar for a single sample, (B,) for a batch."""
    single = np.asarray(x).ndim == 1
    losses = LossEvaluation(params, x, eps, t, schedule).losses
    return float(losses[0]) if single else losses


def loss_gradient(params: DenoiserParams, x0, eps, t, schedule: Schedule, weights=None):
    """(flat gradient of the mean batch loss, per-sample losses)."""
    ev = LossEvaluation(params, x0, eps, t, schedule)
    return ev.gradient(weights), ev.losses


def sample_generate(params: DenoiserParams, schedule: Schedule, n: int, seed: int,
                    chunk: int = 4096) -> np.ndarray:
    """DDPM ancestral sampling over all T steps with posterior variance.

    Returns an (n, d) array; a pure function of its arguments.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if params.arch.T != schedule.T:
        raise ShapeError(f"model built for T={params.arch.T}, schedule has T={schedule.T}")
    rng = np.random.default_rng(seed)
    d = params.arch.d
    x = rng.standard_normal((n, d))
    alpha, beta = schedule.alpha, schedule.beta
    for t in range(schedule.T, 0, -1):
        eps_hat = np.empty_like(x)
        tb = np.full(min(chunk, n), t, dtype=np.int64)
        for lo in range(0, n, chunk):
            xb = x[lo:lo + chunk]
            eps_hat[lo:lo + chunk], _ = _forward(params, xb, tb[:xb.shape[0]])
        b = beta[t - 1]
        mean = (x - b / math.sqrt(1.0 - alpha[t]) * eps_hat) / math.sqrt(1.0 - b)
        if t > 1:
            var = b * (1.0 - alpha[t - 1]) / (1.0 - alpha[t])
            x = mean + math.sqrt(var) * rng.standard_normal((n, d))
        else:
            x = mean
    return x


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"IETAGCCK"
CHECKPOINT_VERSION = 1


def _pack_array(buf: list, arr, dtype="<f8"):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    buf.append(struct.pack("<Q", arr.size))
    buf.append(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype="<f8"):
        (n,) = self.unpack("<Q")
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n * item), dtype=dtype).astype(np.dtype(dtype).newbyteorder("="))

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"trailing bytes in {self.what}")


def checkpoint_bytes(params: DenoiserParams, schedule: Schedule, bank=None) -> bytes:
    """Binary checkpoint: magic, version, architecture, betas, flat params, optional bank."""
    arch = params.arch
    buf = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<IIII", arch.d, arch.T, arch.emb_dim, len(arch.hidden)),
           struct.pack(f"<{len(arch.hidden)}I", *arch.hidden)]
    _pack_array(buf, schedule.beta)
    buf.append(struct.pack("<ddd", schedule.beta_min, schedule.beta_max, schedule.requested_beta_max))
    _pack_array(buf, params.flat)
    if bank is None:
        buf.append(struct.pack("<B", 0))
    else:
        buf.append(struct.pack("<Bd", 1, bank.gamma))
        _pack_array(buf, bank.l)
        _pack_array(buf, bank.update_count, "<i8")
    return b"".join(buf)


def checkpoint_from_bytes(data: bytes):
    """Inverse of :func:`checkpoint_bytes`: (params, schedule, bank or None)."""
    from .agc import MemoryBank

    r = _Reader(data, "checkpoint")
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    d, T, emb, nh = r.unpack("<IIII")
    hidden = r.unpack(f"<{nh}I")
    arch = Architecture(d=d, T=T, emb_dim=emb, hidden=hidden)
    beta = r.array()
    if beta.size != T:
        raise FormatError(f"schedule has {beta.size} steps, architecture says T={T}")
    bmin, bmax, breq = r.unpack("<ddd")
    alpha = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    schedule = Schedule(T=T, alpha=alpha, beta=beta, beta_min=bmin, beta_max=bmax,
                        requested_beta_max=breq)
    flat = r.array()
    if flat.size != arch.n_params:
        raise FormatError("parameter count does not match architecture")
    params = DenoiserParams(arch, flat)
    (has_bank,) = r.unpack("<B")
    bank = None
    if has_bank:
        (gamma,) = r.unpack("<d")
        bank = MemoryBank(l=r.array(), gamma=gamma, update_count=r.array("<i8"))
    r.done()
    return params, schedule, bank


def save_checkpoint(path, params, schedule, bank=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, schedule, bank))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
