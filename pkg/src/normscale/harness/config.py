"""Run configuration: a YAML tree whose sections map onto dataclasses.

Unknown keys anywhere are errors, so a typo in a sweep file fails loudly
instead of silently running with defaults.
"""

import math
from pathlib import Path
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from ..lmo import NewtonSchulzConfig
from ..model import ModelConfig
from ..scion import ScheduleSpec, ScionState


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 2.0**-3
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "constant"
    total_horizon: int | None = None
    decay_fraction: float = 0.25
    lr_scales: dict = field(default_factory=lambda: {"input": 1.0, "hidden": 1.0, "output": 1.0})
    ns_iters: int = 5
    ns_coeffs: tuple = (3.4445, -4.7750, 2.0315)
    eps: float = 1e-20

    def schedule_spec(self) -> ScheduleSpec:
        return ScheduleSpec(self.schedule, self.total_horizon, self.decay_fraction)

    def make_state(self) -> ScionState:
        ns = NewtonSchulzConfig(self.ns_iters, tuple(self.ns_coeffs), self.eps)
        return ScionState(lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
                          schedule=self.schedule_spec(), ns=ns)


@dataclass(frozen=True)
class DataConfig:
    corpus: str = "corpus.txt"
    tokenizer: str = "byte"
    context: int = 128
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.tokenizer != "byte":
            raise ConfigError("only the byte-level tokenizer is supported")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    seed: int = 30
    max_tokens: int = 2**18


@dataclass(frozen=True)
class SweepConfig:
    etas: tuple = (2.0**-4, 2.0**-3, 2.0**-2)
    batch_sizes: tuple = (8, 16, 32)
    horizons: tuple = (2**16, 2**17, 2**18)
    seeds: tuple = (30,)
    layouts: tuple = ({"input": 1.0, "hidden": 1.0, "output": 1.0},)
    tie_input_output: bool = True
    workers: int = 1

    def __post_init__(self):
        if not self.etas or not self.batch_sizes or not self.horizons or not self.seeds:
            raise ConfigError("sweep grids must be nonempty")
        check_eta_grid(self.etas)
        for layout in self.layouts:
            if set(layout) != {"input", "hidden", "output"}:
                raise ConfigError(f"layout needs input/hidden/output scales, got {sorted(layout)}")
            if self.tie_input_output and layout["input"] != layout["output"]:
                raise ConfigError("layout sweeps constrain input and output learning rates to be equal")


@dataclass(frozen=True)
class LoggingConfig:
    eval_every: int | None = None
    output_dir: str = "runs"
    checkpoint_at: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def __post_init__(self):
        if self.model.context_len != self.data.context:
            raise ConfigError(
                f"model.context_len={self.model.context_len} != data.context={self.data.context}"
            )


def check_eta_grid(etas):
    """Learning-rate grids must be geometric with step 2^0.5 or 2^1."""
    logs = sorted(math.log2(e) for e in etas)
    if any(e <= 0 for e in etas):
        raise ConfigError("learning rates must be positive")
    steps = {round(b - a, 9) for a, b in zip(logs, logs[1:])}
    if len(steps) > 1 or not steps <= {0.5, 1.0}:
        raise ConfigError(f"eta grid must be geometric with step 2^0.5 or 2^1, got log2 steps {sorted(steps)}")


_SECTIONS = {
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "sweep": SweepConfig,
    "logging": LoggingConfig,
}
_TUPLE_FIELDS = {"ns_coeffs", "etas", "batch_sizes", "horizons", "seeds", "layouts", "checkpoint_at"}


def _build(cls, tree, where):
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(tree) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in tree.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(tree: dict) -> RunConfig:
    tree = dict(tree or {})
    unknown = sorted(set(tree) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections {unknown}")
    data = _build(DataConfig, tree.get("data"), "data")
    model_tree = dict(tree.get("model") or {})
    model_tree.setdefault("context_len", data.context)
    sections = {"data": data, "model": _build(ModelConfig, model_tree, "model")}
    for name in ("optimizer", "train", "sweep", "logging"):
        sections[name] = _build(_SECTIONS[name], tree.get(name), name)
    return RunConfig(**sections)


def load_config(path) -> RunConfig:
    """Read a YAML config; a relative ``data.corpus`` resolves against the config's directory."""
    path = Path(path)
    with open(path) as f:
        tree = yaml.safe_load(f) or {}
    data = tree.get("data")
    if isinstance(data, dict) and "corpus" in data and not Path(data["corpus"]).is_absolute():
        data["corpus"] = str(path.parent / data["corpus"])
    return config_from_dict(tree)


def config_to_dict(cfg: RunConfig) -> dict:
    out = asdict(cfg)
    for section in out.values():
        for k, v in section.items():
            if isinstance(v, tuple):
                section[k] = list(v)
    return out


def with_run(cfg: RunConfig, *, eta=None, batch_size=None, seed=None, lr_scales=None, max_tokens=None):
    """Copy of ``cfg`` specialized to one sweep point."""
    opt, train = cfg.optimizer, cfg.train
    if eta is not None:
        opt = replace(opt, base_lr=eta)
    if lr_scales is not None:
        opt = replace(opt, lr_scales=dict(lr_scales))
    train = replace(
        train,
        batch_size=batch_size if batch_size is not None else train.batch_size,
        seed=seed if seed is not None else train.seed,
        max_tokens=max_tokens if max_tokens is not None else train.max_tokens,
    )
    return replace(cfg, optimizer=opt, train=train)
