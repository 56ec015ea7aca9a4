"""Flat key = value run configuration.

Unknown keys are rejected; every key has a documented default. Lines
starting with '#' are comments. Lists (channels, modes) are comma
separated.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .denoiser import ATTENTION_MODES, GATE_MODES, LIFT_MODES, SRA_MODES
from .residuals import EQUATIONS


class ConfigError(Exception):
    pass


TASKS = (
    "unconditional",
    "forward",
    "inverse",
    "sparse_forward",
    "sparse_inverse",
    "sparse_both",
    "noisy_forward",
    "noisy_inverse",
)

REPLACE_CHOICES = ("auto", "on", "off")


@dataclass
class RunConfig:
    pde: str = "poisson"
    resolution: int = 32
    n_train: int = 2048
    n_test: int = 256
    seed: int = 0
    levels: int = 3
    channels: tuple[int, ...] = (32, 64, 64)
    modes: tuple[int, ...] = (12, 8, 4)
    embed_dim: int = 256
    lr: float = 1e-4
    warmup_epochs: float = 50.0
    epochs: int = 10
    batch: int = 16
    dropout: float = 0.13
    ema_half_life: float = 5.0
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    rbf_scale: float = 0.05
    steps_n: int = 20
    task: str = "forward"
    sparsity_q: float = 0.03
    noise_fraction: float = 1.0
    noise_sigma: float = 1.0
    sra_mode: str = "sra"
    gate_mode: str = "skip_gate"
    attention_mode: str = "phase_aware"
    lift_mode: str = "conv"
    replace_observed: str = "auto"

    def validate(self) -> "RunConfig":
        checks = [
            (self.pde in EQUATIONS, f"pde must be one of {EQUATIONS}"),
            (self.resolution >= 4 and (self.resolution & (self.resolution - 1)) == 0,
             "resolution must be a power of two >= 4"),
            (self.n_train >= 1 and self.n_test >= 1, "n_train and n_test must be >= 1"),
            (len(self.channels) == self.levels, "channels must list one width per level"),
            (len(self.modes) == self.levels, "modes must list one count per level"),
            (self.lr > 0, "lr must be > 0"),
            (self.batch >= 1 and self.epochs >= 1, "batch and epochs must be >= 1"),
            (0 <= self.dropout < 1, "dropout must be in [0, 1)"),
            (0 < self.sigma_min < self.sigma_max, "need 0 < sigma_min < sigma_max"),
            (self.steps_n >= 1, "steps_n must be >= 1"),
            (self.task in TASKS, f"task must be one of {TASKS}"),
            (0 < self.sparsity_q <= 1, "sparsity_q must be in (0, 1]"),
            (0 <= self.noise_fraction <= 1, "noise_fraction must be in [0, 1]"),
            (self.sra_mode in SRA_MODES, f"sra_mode must be one of {SRA_MODES}"),
            (self.gate_mode in GATE_MODES, f"gate_mode must be one of {GATE_MODES}"),
            (self.attention_mode in ATTENTION_MODES,
             f"attention_mode must be one of {ATTENTION_MODES}"),
            (self.lift_mode in LIFT_MODES, f"lift_mode must be one of {LIFT_MODES}"),
            (self.replace_observed in REPLACE_CHOICES,
             f"replace_observed must be one of {REPLACE_CHOICES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:12]


def _coerce(name: str, raw: str, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        return tuple(int(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def parse_config(text: str) -> RunConfig:
    kinds = {f.name: (tuple if isinstance(f.default, tuple) else type(f.default))
             for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, kinds[key])
    return RunConfig(**values).validate()


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
