"""Run configuration: dataclasses plus a flat ``section.key = value`` text format."""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields, replace

from .dataset import AugmentConfig

ALGORITHMS = ("fedyoyo", "fedavg", "fedavg_bsm", "fedprox")
PRIOR_MODES = ("estimated", "counts", "uniform")
VIEWS = ("weak", "strong")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 10
    in_dim: int = 32
    class_sep: float = 3.0
    n_max: int = 500
    imbalance: float = 100.0
    num_clients: int = 10
    alpha: float = 0.5
    test_per_class: int = 100


@dataclass(frozen=True)
class AugmentSettings:
    """Unset fields fall back to multiples of ``data.class_sep``."""

    weak_noise_sigma: float | None = None
    strong_noise_sigma: float | None = None
    strong_mask_prob: float = 0.3
    strong_scale_range: tuple = (0.8, 1.25)

    def resolve(self, class_sep):
        base = AugmentConfig.for_separation(class_sep)
        return AugmentConfig(
            base.weak_noise_sigma if self.weak_noise_sigma is None else float(self.weak_noise_sigma),
            base.strong_noise_sigma if self.strong_noise_sigma is None else float(self.strong_noise_sigma),
            float(self.strong_mask_prob),
            tuple(float(v) for v in self.strong_scale_range),
        )


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "fedyoyo"
    clients_per_round: int = 10
    rounds: int = 50
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05
    temperature: float = 1.5
    lam: float = 4.0
    gamma: float = 0.5
    ema_m: float = 0.9
    prox_mu: float = 0.01
    prior_mode: str = "estimated"
    teacher_view: str = "weak"
    student_view: str = "strong"
    asd_normalizer: str = "masked"
    teacher_filter: bool = True
    hidden: tuple = (64, 64)
    feature_dim: int = 32
    probe_size: int = 200
    group_thresholds: tuple | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: tuple = ("fedavg", "fedyoyo")
    parallel_clients: int = 0

    def augment_config(self):
        return self.augment.resolve(self.data.class_sep)

    def validate(self):
        d, t = self.data, self.train
        checks = [
            ("data.num_classes", lambda: d.num_classes >= 2),
            ("data.in_dim", lambda: d.in_dim >= 2),
            ("data.class_sep", lambda: d.class_sep > 0),
            ("data.n_max", lambda: d.n_max >= d.num_classes),
            ("data.imbalance", lambda: d.imbalance >= 1),
            ("data.num_clients", lambda: d.num_clients >= 1),
            ("data.alpha", lambda: d.alpha > 0),
            ("data.test_per_class", lambda: d.test_per_class >= 1),
            ("train.algorithm", lambda: t.algorithm in ALGORITHMS),
            ("train.clients_per_round", lambda: 1 <= t.clients_per_round <= d.num_clients),
            ("train.rounds", lambda: t.rounds >= 0),
            ("train.local_epochs", lambda: t.local_epochs >= 1),
            ("train.batch_size", lambda: t.batch_size >= 1),
            ("train.lr", lambda: t.lr >= 0),
            ("train.temperature", lambda: t.temperature > 0),
            ("train.lam", lambda: t.lam >= 0),
            ("train.gamma", lambda: 0 <= t.gamma <= 1),
            ("train.ema_m", lambda: 0 <= t.ema_m <= 1),
            ("train.prox_mu", lambda: t.prox_mu >= 0),
            ("train.prior_mode", lambda: t.prior_mode in PRIOR_MODES),
            ("train.teacher_view", lambda: t.teacher_view in VIEWS),
            ("train.student_view", lambda: t.student_view in VIEWS),
            ("train.asd_normalizer", lambda: t.asd_normalizer in ("masked", "batch")),
            ("train.teacher_filter", lambda: isinstance(t.teacher_filter, bool)),
            ("train.feature_dim", lambda: t.feature_dim >= 1),
            ("train.probe_size", lambda: t.probe_size >= 1),
            ("parallel_clients", lambda: self.parallel_clients >= 0),
        ]
        for name, check in checks:
            try:
                ok = check()
            except TypeError:
                ok = False
            if not ok:
                raise ConfigError(f"invalid value for {name}")
        try:
            self.augment_config()
        except ValueError as exc:
            raise ConfigError(f"invalid augment settings: {exc}") from exc
        for v in self.variants:
            apply_variant(self, v)
        return self


SECTIONS = {"data": DataConfig, "augment": AugmentSettings, "train": TrainConfig}
TOP_LEVEL = ("seed", "variants", "parallel_clients")

VARIANT_PRESETS = {
    "fedavg": {"algorithm": "fedavg"},
    "fedprox": {"algorithm": "fedprox"},
    "fedavg_bsm": {"algorithm": "fedavg_bsm"},
    "fedyoyo": {"algorithm": "fedyoyo"},
    "fedyoyo_no_asd": {"algorithm": "fedyoyo", "lam": 0.0},
    "fedyoyo_no_dla": {"algorithm": "fedyoyo", "prior_mode": "uniform", "temperature": 1.0},
}

# sweepable names and the dotted keys they set
SWEEP_PARAMS = {"gamma": "train.gamma", "lambda": "train.lam", "alpha": "data.alpha", "IF": "data.imbalance"}


# heavier local training used by the paired benchmark runs; the plain
# defaults leave both algorithms far from converged after 50 rounds
BENCHMARK_TRAIN = {"lr": 0.2, "local_epochs": 10}


def benchmark_config(seed=0, **train_overrides):
    """Config for the paired FedAvg/FedYoYo benchmark on the default synthetic data."""
    train = replace(TrainConfig(), **{**BENCHMARK_TRAIN, **train_overrides})
    return ExperimentConfig(seed=seed, train=train).validate()


def set_key(cfg, dotted, value):
    """Return a copy of ``cfg`` with one dotted key replaced."""
    if "." not in dotted:
        if dotted not in TOP_LEVEL:
            raise ConfigError(f"unknown key {dotted}")
        if dotted == "variants":
            value = tuple(value) if isinstance(value, (list, tuple)) else tuple(str(value).split(","))
        return replace(cfg, **{dotted: value})
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown section in {dotted}")
    names = {f.name for f in fields(SECTIONS[section])}
    if key not in names:
        raise ConfigError(f"unknown key {dotted}")
    if isinstance(value, list):
        value = tuple(value)
    return replace(cfg, **{section: replace(getattr(cfg, section), **{key: value})})


def apply_variant(cfg, variant):
    """Resolve a variant name like ``fedyoyo`` or ``fedyoyo+gamma=1+lam=0`` into a config."""
    name, *overrides = variant.split("+")
    if name not in VARIANT_PRESETS:
        raise ConfigError(f"unknown variant {name!r}")
    train = replace(cfg.train, **VARIANT_PRESETS[name])
    cfg = replace(cfg, train=train)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"bad variant override {item!r}")
        key = SWEEP_PARAMS.get(key, key if "." in key else f"train.{key}")
        cfg = set_key(cfg, key, _literal(raw))
    return cfg


def _literal(text):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text, source="<config>"):
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        try:
            cfg = set_key(cfg, key.strip(), _literal(raw))
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    return cfg.validate()


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))


def dump_config(cfg):
    lines = [f"seed = {cfg.seed!r}", f"variants = {list(cfg.variants)!r}",
             f"parallel_clients = {cfg.parallel_clients!r}"]
    for section in SECTIONS:
        for f in fields(SECTIONS[section]):
            value = getattr(getattr(cfg, section), f.name)
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{section}.{f.name} = {value!r}")
    return "\n".join(lines) + "\n"


def as_dict(cfg):
    return dataclasses.asdict(cfg)
