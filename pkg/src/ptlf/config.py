"""Run configuration: flat ``key = value`` text grouped under ``[section]`` headers."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .freezing import FreezeMode, FreezeSchedule, Selection

OBJECTIVES = ("simsiam", "barlow_twins", "supervised_ce")
DATASET_KINDS = ("synthetic", "cifar10_binary")
ACTIVATIONS = ("relu", "tanh", "identity")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    tasks: int = 5
    classes_per_task: int = 2
    height: int = 16
    width: int = 16
    channels: int = 3
    train_per_class: int = 100
    test_per_class: int = 50
    noise: float = 0.3
    path: str = ""
    downscale: bool = False

    @property
    def dim(self) -> int:
        return self.height * self.width * self.channels

    def validate(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        for name in ("tasks", "classes_per_task", "height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset.{name} must be >= 1")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ConfigError("dataset per-class sample counts must be >= 0")
        if self.noise < 0:
            raise ConfigError("dataset.noise must be >= 0")
        if self.kind == "synthetic" and (self.train_per_class < 1 or self.test_per_class < 1):
            raise ConfigError("synthetic datasets need at least one train and test sample per class")
        if self.kind == "cifar10_binary":
            if not self.path:
                raise ConfigError("dataset.path is required for cifar10_binary")
            if self.tasks * self.classes_per_task > 10:
                raise ConfigError("CIFAR-10 has only 10 classes to split into tasks")


@dataclass
class RunConfig:
    objective: str = "simsiam"
    seed: int = 0
    epochs: int = 20
    batch: int = 64
    lr: float = 0.03
    alpha: float = 0.4
    buffer_capacity: int = 256
    eps_th: float = 0.95
    probe_batches: int = 4
    knn_k: int = 20
    bt_lambda: float = 5e-3
    out: str = "runs/ptlf"
    k_i: float = 0.0
    k_f: float = 0.4
    mode: str = "one_shot"
    selection: str = "task_correlated"
    verbatim_cosine: bool = False
    backbone_layers: int = 8
    width: int = 64
    activation: str = "relu"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def validate(self) -> "RunConfig":
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for name in ("epochs", "buffer_capacity", "probe_batches", "knn_k", "backbone_layers", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.bt_lambda <= 0:
            raise ConfigError("bt_lambda must be > 0")
        if not 0 < self.eps_th < 1:
            raise ConfigError("eps_th must lie in (0, 1)")
        try:
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.dataset.validate()
        return self

    def schedule(self) -> FreezeSchedule:
        return FreezeSchedule(
            k_i=self.k_i,
            k_f=self.k_f,
            epochs=self.epochs,
            mode=FreezeMode(self.mode),
            selection=Selection(self.selection),
            verbatim_cosine=self.verbatim_cosine,
        )

    def with_overrides(self, **kw) -> "RunConfig":
        data_kw = {k[len("dataset_"):]: kw.pop(k) for k in list(kw) if k.startswith("dataset_")}
        cfg = replace(self, **kw)
        if data_kw:
            cfg.dataset = replace(cfg.dataset, **data_kw)
        return cfg


SECTIONS = {
    "run": ("objective", "seed", "epochs", "batch", "lr", "alpha", "buffer_capacity", "eps_th",
            "probe_batches", "knn_k", "bt_lambda", "out"),
    "schedule": ("k_i", "k_f", "mode", "selection", "verbatim_cosine"),
    "model": ("backbone_layers", "width", "activation"),
}


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = RunConfig()
    ds = DatasetSpec()
    ds_fields = {f.name for f in fields(DatasetSpec)}
    for section in parser.sections():
        if section != "dataset" and section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        allowed = ds_fields if section == "dataset" else set(SECTIONS[section])
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            target = ds if section == "dataset" else cfg
            setattr(target, key, _coerce(raw, getattr(target, key), f"{section}.{key}"))
    cfg.dataset = ds
    return cfg.validate()


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    values = asdict(cfg)
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_fmt(values[k])}" for k in keys)
        lines.append("")
    lines.append("[dataset]")
    lines.extend(f"{k} = {_fmt(v)}" for k, v in values["dataset"].items())
    lines.append("")
    return "\n".join(lines)
