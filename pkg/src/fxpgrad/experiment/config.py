"""Run configuration: a flat ``key = value`` file.

Example::

    arch = mlp
    dataset = mnist-idx
    data_root = /data/mnist
    bits = 4/4/4
    policy = ours
    seed = 0

Lists are comma separated.  ``#`` and ``;`` start comments.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..engine.model import ARCHS, Bits
from ..interval import DEFAULT_DSGC_GRID, IntervalPolicy
from ..quantizer import MAX_BITS, MIN_BITS, Rounding

DATASETS = ("synthetic-gauss", "mnist-idx", "cifar10-bin")
_SECTION = "run"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int
    arch: str = "mlp"
    dataset: str = "synthetic-gauss"
    data_root: str = ""
    bits: str = "4/4/4"
    policy: str = "ours"
    dsgc_grid: tuple[float, ...] = DEFAULT_DSGC_GRID
    tau: float = 10.0
    # used only when tau is 0
    alpha: float = 1e-3
    beta: float = 1e-3
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    clip_lr: float = 1e-5
    epochs: int = 1
    batch_size: int = 128
    out: str = "runs/run"
    stats_every: int = 10
    grad_rounding: str = "stochastic"
    quantize_weight_grads: bool = False
    hidden: tuple[int, ...] = (128,)
    width: int = 16
    dtype: str = "float32"
    n_train: int = 0
    n_test: int = 0
    # hold out the last val_size training samples and evaluate on them instead of the test split
    val_size: int = 0
    augment: bool = False
    calib_size: int = 256
    # synthetic-gauss only
    data_seed: int = 0
    n_classes: int = 10
    n_samples: int = 6000
    input_shape: tuple[int, ...] = (1, 28, 28)
    class_sep: float = 0.15

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        try:
            b = Bits.parse(self.bits)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name, v in zip("wag", (b.w, b.a, b.g)):
            if v is not None and not MIN_BITS <= v <= MAX_BITS:
                raise ConfigError(f"{name} bits must be in [{MIN_BITS}, {MAX_BITS}] or fp, got {v}")
        try:
            self.interval_policy()
            Rounding(self.grad_rounding)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.tau < 0 or not 0 < self.alpha < 1 or self.beta <= 0:
            raise ConfigError("need tau >= 0, 0 < alpha < 1 and beta > 0")
        if self.val_size < 0:
            raise ConfigError("val_size must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.stats_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and stats_every >= 1 required")
        if self.lr <= 0 or self.clip_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def interval_policy(self) -> IntervalPolicy:
        return IntervalPolicy.parse(self.policy, grid=self.dsgc_grid)

    def bit_widths(self) -> Bits:
        return Bits.parse(self.bits)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if typ.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from None


def parse_flat(text: str) -> dict[str, str]:
    cp = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",), interpolation=None
    )
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    return dict(cp[_SECTION])


def config_from_mapping(values: dict[str, str]) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "seed" not in values:
        raise ConfigError("config must set seed")
    kwargs = {k: _convert(known[k], v) for k, v in values.items()}
    return RunConfig(**kwargs)


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    values = parse_flat(text)
    values.update(overrides or {})
    return config_from_mapping(values)
