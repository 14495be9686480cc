"""Experiment configuration.

Configs are INI files read with :mod:`configparser`; every option is
addressed by a dotted key ``section.name`` (``agsd.fgsm_epsilon``). Values
are parsed as JSON literals when possible, otherwise kept as strings.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .attacks import KINDS as ATTACK_KINDS
from .defenses.agsd import ATTACK_TARGETS, FINAL_AGGREGATIONS

DEFENSE_KINDS = ("fedavg", "dp", "mkrum", "agsd_id", "agsd_ood")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    num_classes: int = 10
    dim: int = 64
    samples_per_class: int = 200
    separation: float = 5.0
    noise: float = 0.25
    background: int = 32
    test_fraction: float = 0.2
    images_path: str = ""
    labels_path: str = ""


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "iid"
    alpha: float = 0.5
    group_fraction: float = 0.1


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64,)


@dataclass(frozen=True)
class SgdSection:
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    local_epochs: int = 2
    batch_size: int = 32


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "clean"
    pdr: float = 0.25
    scale: float = 1.0
    target_class: int = 0
    trigger_start: int = 0
    trigger_width: int = 24
    trigger_value: float = 0.5
    itba_blend: float = 0.2
    lba_confidence: float = 0.6
    mtba_targets: tuple[int, ...] = (0, 1)
    dba_parts: int = 2
    impersonate_until: int = 0
    rba_epsilon: float | None = None


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "fedavg"


@dataclass(frozen=True)
class AgsdSection:
    fgsm_epsilon: float = 0.2
    n_clusters: int = 2
    noise_scale: float = 1e-5
    phi_init: float = 1e-2
    attack_target: str = "preliminary_aggregate"
    healing_size: int = 50
    eta_weight_sign: float = -1.0
    final_aggregation: str = "noisy"


@dataclass(frozen=True)
class OodConfig:
    num_classes: int = 20
    dim: int = 64
    samples_per_class: int = 20
    separation: float = 40.0
    noise: float = 0.05


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_sigma: float = 1e-3


@dataclass(frozen=True)
class MkrumConfig:
    f: int = 1
    m: int = 3


@dataclass(frozen=True)
class BiasConfig:
    epochs: int = 20
    n_samples: int = 200
    pdr: float = 0.25
    loss_kind: str = "agsd"
    ood: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0


@dataclass(frozen=True)
class FlSection:
    n_clients: int = 20
    sample_ratio: float = 0.25
    rounds: int = 60
    patience: int = 0
    malicious_ratio: float = 0.0


@dataclass(frozen=True)
class FlConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    fl: FlSection = field(default_factory=FlSection)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sgd: SgdSection = field(default_factory=SgdSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    agsd: AgsdSection = field(default_factory=AgsdSection)
    ood: OodConfig = field(default_factory=OodConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    mkrum: MkrumConfig = field(default_factory=MkrumConfig)
    bias: BiasConfig = field(default_factory=BiasConfig)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def clients_per_round(self) -> int:
        return math.ceil(self.fl.sample_ratio * self.fl.n_clients - 1e-9)

    @property
    def n_malicious(self) -> int:
        return math.floor(self.fl.malicious_ratio * self.fl.n_clients + 1e-9)

    @property
    def patience(self) -> int:
        """Rounds without improvement before stopping; 0 means never stop early."""
        return self.fl.patience or self.fl.rounds

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for sec in fields(self):
            for k, v in asdict(getattr(self, sec.name)).items():
                out[f"{sec.name}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out

    def digest(self) -> str:
        canon = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def with_value(self, key: str, value: Any) -> "FlConfig":
        flat = self.to_flat()
        if key not in flat:
            raise ConfigError(key, "unknown configuration key")
        flat[key] = value
        return from_flat(flat, required=())


REQUIRED_KEYS = (
    "experiment.seed",
    "fl.n_clients",
    "fl.sample_ratio",
    "fl.rounds",
    "attack.kind",
    "defense.kind",
)


def known_keys() -> list[str]:
    return sorted(FlConfig().to_flat())


def _coerce(key: str, default: Any, value: Any, annotation: str) -> Any:
    try:
        if isinstance(default, tuple) or annotation.startswith("tuple"):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            if isinstance(value, (int, float)):
                value = [value]
            return tuple(int(v) for v in value)
        if value is None:
            if "None" in annotation:
                return None
            raise TypeError("null is not allowed")
        if annotation.startswith("bool"):
            if isinstance(value, str):
                if value.lower() in ("true", "yes", "1"):
                    return True
                if value.lower() in ("false", "no", "0"):
                    return False
                raise ValueError(value)
            return bool(value)
        if annotation.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, bool):
                raise ValueError(value)
            return int(value)
        if annotation.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot interpret {value!r} as {annotation}") from None


def from_flat(flat: dict[str, Any], required=REQUIRED_KEYS) -> FlConfig:
    for key in required:
        if key not in flat:
            raise ConfigError(key, "missing required key")
    base = FlConfig()
    sections = {}
    for sec in fields(FlConfig):
        sections[sec.name] = {f.name: f for f in fields(getattr(base, sec.name))}
    updates: dict[str, dict[str, Any]] = {name: {} for name in sections}
    for key, value in flat.items():
        sec, _, name = key.partition(".")
        if sec not in sections or name not in sections[sec]:
            raise ConfigError(key, "unknown configuration key")
        f = sections[sec][name]
        default = getattr(getattr(base, sec), name)
        updates[sec][name] = _coerce(key, default, value, str(f.type))
    cfg = replace(base, **{sec: replace(getattr(base, sec), **vals) for sec, vals in updates.items()})
    validate(cfg)
    return cfg


def load(path) -> FlConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc)) from None
    flat = {}
    for sec in parser.sections():
        for name, raw in parser.items(sec):
            flat[f"{sec}.{name}"] = parse_literal(raw)
    return from_flat(flat)


def parse_literal(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _check(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(key, message)


def validate(cfg: FlConfig) -> None:
    """Check every field invariant before any computation starts."""
    fl, d, a, g = cfg.fl, cfg.data, cfg.attack, cfg.agsd
    _check(fl.n_clients >= 1, "fl.n_clients", "must be at least 1")
    _check(0 < fl.sample_ratio <= 1, "fl.sample_ratio", "must lie in (0, 1]")
    _check(cfg.clients_per_round >= 1, "fl.sample_ratio", "samples no client")
    _check(fl.rounds >= 1, "fl.rounds", "must be at least 1")
    _check(fl.patience >= 0, "fl.patience", "must be nonnegative")
    _check(0 <= fl.malicious_ratio <= 1, "fl.malicious_ratio", "must lie in [0, 1]")

    _check(d.source in ("synthetic", "idx"), "data.source", "must be 'synthetic' or 'idx'")
    _check(d.num_classes >= 2, "data.num_classes", "must be at least 2")
    _check(d.dim >= 1, "data.dim", "must be positive")
    _check(d.samples_per_class >= 1, "data.samples_per_class", "must be positive")
    _check(d.separation > 0, "data.separation", "must be positive")
    _check(d.noise > 0, "data.noise", "must be positive")
    _check(0 <= d.background < d.dim, "data.background", "must lie in [0, data.dim)")
    _check(0 < d.test_fraction < 1, "data.test_fraction", "must lie in (0, 1)")
    if d.source == "idx":
        _check(bool(d.images_path), "data.images_path", "required for idx data")
        _check(bool(d.labels_path), "data.labels_path", "required for idx data")

    p = cfg.partition
    _check(p.kind in ("iid", "noniid"), "partition.kind", "must be 'iid' or 'noniid'")
    _check(0 <= p.alpha <= 1, "partition.alpha", "must lie in [0, 1]")
    _check(0 < p.group_fraction < 1, "partition.group_fraction", "must lie in (0, 1)")
    _check(all(h >= 1 for h in cfg.model.hidden), "model.hidden", "layer sizes must be positive")

    s = cfg.sgd
    _check(s.learning_rate > 0, "sgd.learning_rate", "must be positive")
    _check(0 <= s.momentum < 1, "sgd.momentum", "must lie in [0, 1)")
    _check(s.weight_decay >= 0, "sgd.weight_decay", "must be nonnegative")
    _check(s.local_epochs >= 1, "sgd.local_epochs", "must be positive")
    _check(s.batch_size >= 1, "sgd.batch_size", "must be positive")

    _check(a.kind in ATTACK_KINDS, "attack.kind", f"must be one of {ATTACK_KINDS}")
    _check(0 <= a.pdr <= 1, "attack.pdr", "must lie in [0, 1]")
    _check(a.scale > 0, "attack.scale", "must be positive")
    _check(0 <= a.target_class < d.num_classes, "attack.target_class", "outside the label range")
    _check(a.trigger_width >= 1, "attack.trigger_width", "must be positive")
    needed = a.trigger_start + a.trigger_width * (len(a.mtba_targets) if a.kind == "mtba" else 1)
    _check(a.trigger_start >= 0 and needed <= d.dim, "attack.trigger_width", "trigger does not fit the input")
    _check(0 <= a.trigger_value <= 1, "attack.trigger_value", "must lie in [0, 1]")
    _check(0 < a.itba_blend <= 1, "attack.itba_blend", "must lie in (0, 1]")
    _check(0 < a.lba_confidence <= 1, "attack.lba_confidence", "must lie in (0, 1]")
    if a.kind == "mtba":
        _check(len(a.mtba_targets) >= 2, "attack.mtba_targets", "needs at least two targets")
        _check(len(set(a.mtba_targets)) == len(a.mtba_targets), "attack.mtba_targets", "targets must be distinct")
        _check(all(0 <= t < d.num_classes for t in a.mtba_targets), "attack.mtba_targets", "outside the label range")
    _check(1 <= a.dba_parts <= a.trigger_width, "attack.dba_parts", "must lie in [1, trigger_width]")
    _check(a.impersonate_until >= 0, "attack.impersonate_until", "must be nonnegative")
    _check(a.rba_epsilon is None or a.rba_epsilon >= 0, "attack.rba_epsilon", "must be nonnegative")

    _check(cfg.defense.kind in DEFENSE_KINDS, "defense.kind", f"must be one of {DEFENSE_KINDS}")
    _check(g.fgsm_epsilon > 0, "agsd.fgsm_epsilon", "must be positive")
    _check(g.n_clusters >= 2, "agsd.n_clusters", "must be at least 2")
    _check(g.noise_scale >= 0, "agsd.noise_scale", "must be nonnegative")
    _check(g.attack_target in ATTACK_TARGETS, "agsd.attack_target", f"must be one of {ATTACK_TARGETS}")
    _check(g.healing_size >= 1, "agsd.healing_size", "must be positive")
    _check(g.eta_weight_sign in (-1.0, 1.0), "agsd.eta_weight_sign", "must be -1 or 1")
    _check(g.final_aggregation in FINAL_AGGREGATIONS, "agsd.final_aggregation", f"must be one of {FINAL_AGGREGATIONS}")
    n_pool = d.num_classes * d.samples_per_class
    if d.source == "synthetic":
        n_train = n_pool - round(d.test_fraction * n_pool) - g.healing_size
        _check(n_train >= fl.n_clients, "agsd.healing_size", "leaves fewer training samples than clients")

    o = cfg.ood
    _check(o.num_classes >= 1 and o.dim >= 1 and o.samples_per_class >= 1, "ood.num_classes", "ood sizes must be positive")
    _check(o.separation > 0 and o.noise > 0, "ood.separation", "must be positive")

    _check(cfg.dp.clip_norm >= 0, "dp.clip_norm", "must be nonnegative")
    _check(cfg.dp.noise_sigma >= 0, "dp.noise_sigma", "must be nonnegative")
    if cfg.defense.kind == "mkrum":
        c = cfg.clients_per_round
        _check(cfg.mkrum.f >= 0, "mkrum.f", "must be nonnegative")
        _check(c >= cfg.mkrum.f + 3, "mkrum.f", f"{c} sampled clients cannot tolerate f={cfg.mkrum.f}")
        _check(1 <= cfg.mkrum.m <= c, "mkrum.m", f"must lie in [1, {c}]")

    b = cfg.bias
    _check(b.epochs >= 0, "bias.epochs", "must be nonnegative")
    _check(b.n_samples >= 1, "bias.n_samples", "must be positive")
    _check(0 <= b.pdr <= 1, "bias.pdr", "must lie in [0, 1]")
    _check(b.loss_kind in ("cross_entropy", "agsd"), "bias.loss_kind", "must be 'cross_entropy' or 'agsd'")
