"""Experiment configuration: a flat ``key = value`` text format.

One setting per line. ``#`` starts a comment, blank lines are ignored, and
keys may use dashes or underscores. Booleans are ``true``/``false``.
Example::

    kind = ablate-balance
    steps = 600
    experts = 8
    seed = 7
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

KINDS = (
    "train-moe",
    "ablate-balance",
    "ablate-mtp",
    "fp8-compare",
    "dgrad-study",
    "pipeline-compare",
    "comm-report",
    "grpo-demo",
)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str = "train-moe"
    out_dir: str = "runs"
    seed: int = 0
    data_seed: int = 1
    # model
    vocab: int = 256
    d: int = 64
    n_layers: int = 2
    n_h: int = 4
    experts: int = 8
    top_k: int = 2
    shared: int = 1
    d_ff: int = 32
    # data
    seq_len: int = 64
    domains: int = 4
    noise: float = 0.2
    # training
    steps: int = 600
    batch: int = 8
    lr: float = 3e-3
    balance: str = "aux-free"
    gamma: float = 1e-3
    alpha: float = 1e-4
    aux_alpha: float = 0.01
    lam_high: float = 0.3
    lam_low: float = 0.1
    lam_switch: float = 0.68
    mtp_depth: int = 0
    fp8: bool = False
    bf16_moments: bool = False
    record_every: int = 10
    smoothing: float = 0.9
    # pipeline
    pp: int = 4
    m: int = 20
    costs: str = "F=1,B=2,W=0.5"
    # communication: dispatch traffic on ``nodes``, redundancy on ``prefill_nodes``
    nodes: int = 8
    prefill_nodes: int = 4
    comm_experts: int = 256
    comm_top_k: int = 8
    gpus_per_node: int = 8
    ib_bandwidth: float = 50.0
    nvlink_bandwidth: float = 160.0
    node_limit: int = 4
    redundant: int = 32
    tokens: int = 2000
    # grpo
    epsilon: float | None = None
    beta: float | None = None
    group_size: int = 8
    groups: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        positive = ("vocab", "d", "n_layers", "n_h", "experts", "top_k", "d_ff", "seq_len", "domains",
                    "steps", "batch", "record_every", "pp", "m", "nodes", "prefill_nodes", "comm_experts",
                    "comm_top_k", "gpus_per_node", "node_limit", "tokens", "group_size", "groups")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("shared", "mtp_depth", "redundant"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.balance not in ("aux-free", "seq-aux", "batch-aux", "none"):
            raise ConfigError(f"unknown balance mode {self.balance!r}")
        if self.d % self.n_h:
            raise ConfigError("d must be divisible by n_h")
        if self.top_k > self.experts:
            raise ConfigError("top_k cannot exceed experts")
        if self.vocab % self.domains:
            raise ConfigError("vocab must split evenly into domains")
        if not 0 <= self.smoothing < 1:
            raise ConfigError("smoothing must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.kind == "grpo-demo" and (self.epsilon is None or self.beta is None):
            raise ConfigError("grpo-demo needs explicit epsilon and beta")
        self.parse_costs()

    def parse_costs(self) -> dict:
        out = {}
        for part in filter(None, (p.strip() for p in self.costs.split(","))):
            key, sep, val = part.partition("=")
            if not sep or key.strip() not in ("F", "B", "W", "FB"):
                raise ConfigError(f"bad cost entry {part!r}; expected F=..,B=..,W=..[,FB=..]")
            try:
                out[key.strip()] = float(val)
            except ValueError:
                raise ConfigError(f"bad cost value {val!r}") from None
        if "F" not in out or "B" not in out:
            raise ConfigError("costs need at least F and B")
        return out

    def echo(self) -> dict:
        """Settings that affect results (the output directory does not)."""
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        return d


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind.startswith("float"):
            return None if raw.lower() == "none" else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind}") from None


def normalize_key(key: str) -> str:
    name = key.strip().replace("-", "_")
    if name not in _FIELDS:
        raise ConfigError(f"unknown setting {key.strip()!r}")
    return name


def parse_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        name = normalize_key(key)
        values[name] = _coerce(name, val)
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """File settings first, then ``overrides`` (raw strings or typed values) on top."""
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_text(fh.read()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    for key, val in (overrides or {}).items():
        name = normalize_key(key)
        values[name] = _coerce(name, val) if isinstance(val, str) else val
    return ExperimentConfig(**values)
