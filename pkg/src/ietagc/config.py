"""Experiment configuration: flat dotted-key schema, text format, overrides.

A config file holds one ``key = value`` per line (``#`` starts a comment),
for example::

    iet.k = 4
    agc.lambda = 0.5
    train.method = agc

Values are layered: schema defaults, then a config file, then environment
variables ``IETAGC_<SECTION>__<NAME>`` (e.g. ``IETAGC_AGC__LAMBDA=0.8``),
then ``--key value`` command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigError

ENV_PREFIX = "IETAGC_"


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pairs(text):
    """``"a:1,b:2"`` -> ``(("a", 1), ("b", 2))``; group keys stay strings unless integral."""
    out = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        group, _, copies = item.partition(":")
        group = group.strip()
        out.append((int(group) if group.lstrip("-").isdigit() else group, int(copies)))
    return tuple(out)


def _dups(text):
    """``default`` (per data.kind), ``none``, or ``group:copies,...``."""
    v = str(text).strip().lower()
    if v == "default":
        return "default"
    if v in ("none", ""):
        return ()
    return _pairs(text)


def _weights(text):
    return tuple((k, float(v)) for k, v in ((k.strip(), v) for k, v in
                                             (item.split(":") for item in str(text).split(",") if item.strip())))


def _choice(*options):
    def parse(text):
        v = str(text).strip()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v
    return parse


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    doc: str
    check: object = None


SCHEMA = [
    Key("data.kind", _choice("mixture", "patterns", "file"), "mixture", "dataset source"),
    Key("data.path", str, "", "dataset file when data.kind = file"),
    Key("data.seed", int, 0, "dataset generation seed (independent of run.seed)"),
    Key("data.components", int, 8, "mixture components", lambda v: v >= 1),
    Key("data.per_component", int, 62, "mixture samples per component", lambda v: v >= 0),
    Key("data.d", int, 8, "mixture dimension", lambda v: v >= 1),
    Key("data.spread", float, 0.35, "mixture component std before scaling", lambda v: v > 0),
    Key("data.dup", _dups, "default",
        "duplicate injections group:copies,... or none (default: central:16 / flat:16)"),
    Key("data.dup_location", _choice("center", "draw"), "center", "mixture duplicate placement"),
    Key("data.count", int, 496, "pattern images before duplicates", lambda v: v >= 0),
    Key("data.grid", int, 8, "pattern grid side", lambda v: v >= 1),
    Key("data.mix", _weights, (("flat", 1.0), ("gradient", 1.0), ("texture", 1.0)),
        "pattern family weights family:w,..."),
    Key("schedule.t", int, 100, "diffusion steps T", lambda v: v >= 2),
    Key("schedule.beta_min", float, 1e-4, "first beta", lambda v: 0 < v < 1),
    Key("schedule.beta_max", float, 0.02, "last beta (raised if alpha_T > 1e-4)", lambda v: 0 < v < 1),
    Key("model.emb", int, 32, "time embedding width", lambda v: v >= 2 and v % 2 == 0),
    Key("model.hidden", _ints, (128, 128), "hidden layer widths", lambda v: len(v) >= 1 and min(v) >= 1),
    Key("train.method", _choice("default", "agc", "dp_sgd", "input_noise"), "default", "training variant"),
    Key("train.eta", float, 0.05, "SGD learning rate", lambda v: v > 0),
    Key("train.batch_size", int, 64, "mini-batch size", lambda v: v >= 1),
    Key("iet.k", int, 1, "number of shards K (1 = plain training)", lambda v: v >= 1),
    Key("iet.m", int, 1, "aggregation rounds M", lambda v: v >= 1),
    Key("iet.e", int, 3000, "epochs per round per shard E", lambda v: v >= 0),
    Key("iet.mode", _choice("iid_classwise", "iid_random", "dirichlet"), "iid_classwise", "shard split"),
    Key("iet.alpha", float, 0.5, "Dirichlet concentration for iet.mode = dirichlet", lambda v: v > 0),
    Key("iet.bank_policy", _choice("average", "sequential_shared"), "average", "bank handling across shards"),
    Key("agc.lambda", float, 0.5, "skip threshold", lambda v: v >= 0),
    Key("agc.gamma", float, 0.8, "EMA smoothing factor", lambda v: 0 < v < 1),
    Key("agc.per_sample_update", _bool, False, "update the bank after each sample (strict replay)"),
    Key("dp.tau", float, 0.0005, "DP-SGD noise multiplier", lambda v: v >= 0),
    Key("noise.var", float, 0.1, "input-noise baseline variance", lambda v: v >= 0),
    Key("audit.n", int, 50, "neighbors in the ratio denominator", lambda v: v >= 1),
    Key("audit.thresholds", _floats, (0.4, 0.5, 0.6), "memorization thresholds", lambda v: len(v) >= 1),
    Key("audit.count", int, 4096, "generated samples per audit", lambda v: v >= 1),
    Key("audit.exclude_nearest", _bool, False, "drop the nearest neighbor from the denominator"),
    Key("audit.seed", int, 0, "sampling seed offset"),
    Key("analyze.draws", int, 128, "noise draws per timestep for loss profiles", lambda v: v >= 1),
    Key("analyze.control", int, 256, "unique samples in the loss-profile control group", lambda v: v >= 1),
    Key("analyze.min_dup", int, 2, "copies needed to count a sample as memorized", lambda v: v >= 2),
    Key("run.seed", int, 0, "base seed for every random stream"),
    Key("run.checkpoint_every", int, 0, "write a checkpoint every N rounds (0 = final only)", lambda v: v >= 0),
]
KEYS = {k.name: k for k in SCHEMA}


class ExperimentSpec(dict):
    """Resolved configuration: a mapping from every schema key to a typed value."""

    @classmethod
    def defaults(cls) -> "ExperimentSpec":
        return cls({k.name: k.default for k in SCHEMA})

    def updated(self, raw: dict, source: str = "override") -> "ExperimentSpec":
        out = ExperimentSpec(self)
        for name, text in raw.items():
            if name not in KEYS:
                raise ConfigError(f"{source}: unknown key {name!r}")
            key = KEYS[name]
            try:
                value = text if not isinstance(text, str) else key.parse(text)
                if isinstance(value, list):
                    value = tuple(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: {name}: {exc}") from None
            if key.check is not None and not key.check(value):
                raise ConfigError(f"{source}: {name}: value {text!r} out of range ({key.doc})")
            out[name] = value
        out.validate()
        return out

    def validate(self):
        if self["schedule.beta_min"] > self["schedule.beta_max"]:
            raise ConfigError("schedule.beta_min: must not exceed schedule.beta_max")
        if self["data.kind"] == "file" and not self["data.path"]:
            raise ConfigError("data.path: required when data.kind = file")
        return self

    def as_text(self) -> dict:
        return {k.name: _fmt(self[k.name]) for k in SCHEMA}

    def method_label(self) -> str:
        method = self["train.method"]
        if self["iet.k"] > 1:
            return {"default": "iet", "agc": "iet-agc"}.get(method, f"iet-{method}")
        return method


def parse_config_text(text: str, source: str = "config") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def format_config(spec: ExperimentSpec) -> str:
    lines = []
    section = None
    for k in SCHEMA:
        sec = k.name.split(".")[0]
        if sec != section:
            if section is not None:
                lines.append("")
            section = sec
        lines.append(f"{k.name} = {_fmt(spec[k.name])}  # {k.doc}")
    return "\n".join(lines) + "\n"


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for var, value in environ.items():
        if var.startswith(ENV_PREFIX):
            name = var[len(ENV_PREFIX):].lower().replace("__", ".")
            out[name] = value
    return out


def resolve(config_path=None, flags=None, environ=None, base=None) -> ExperimentSpec:
    spec = ExperimentSpec.defaults() if base is None else ExperimentSpec(base)
    if config_path:
        with open(config_path) as fh:
            spec = spec.updated(parse_config_text(fh.read(), str(config_path)), str(config_path))
    env = env_overrides(environ)
    if env:
        spec = spec.updated(env, "environment")
    if flags:
        spec = spec.updated(flags, "command line")
    return spec
