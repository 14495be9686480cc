"""Malicious client behaviours.

Each behaviour maps (global model, local data, round) to a submitted
ParamVector. The attacker may poison its data, change the training loop, and
finally scale its update before submission.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset, TriggerSpec, _poison_at, poison
from .seeding import derive_seed, rng_for

KINDS = ("clean", "vtba", "itba", "lba", "mtba", "dba", "rba", "pba")


@dataclass(frozen=True, eq=False)
class AttackBehavior:
    kind: str = "clean"
    triggers: tuple[TriggerSpec, ...] = ()
    pdr: float = 0.25
    scale: float = 1.0
    lba_confidence: float = 0.6
    dba_cohort: tuple[int, int] = (0, 1)
    impersonate_until: int = 0
    fgsm_epsilon: float = 0.2
    # test hook: overrides the PBA projection radius (math.inf disables projection)
    pba_radius: float | None = None
    eval_triggers: tuple[TriggerSpec, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0 <= self.pdr <= 1:
            raise ValueError("pdr must be in [0, 1]")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 < self.lba_confidence <= 1:
            raise ValueError("lba_confidence must be in (0, 1]")
        if self.fgsm_epsilon < 0:
            raise ValueError("fgsm_epsilon must be nonnegative")
        if self.kind != "clean" and not self.triggers:
            raise ValueError(f"attack kind {self.kind!r} needs at least one trigger")
        if self.kind == "mtba":
            targets = [t.target_class for t in self.triggers]
            if len(targets) < 2:
                raise ValueError("mtba needs at least two (trigger, target) pairs")
            if len(set(targets)) != len(targets):
                raise ValueError("mtba pairs must have distinct target classes")
        idx, size = self.dba_cohort
        if size < 1 or not 0 <= idx < size:
            raise ValueError(f"invalid dba cohort {self.dba_cohort}")

    @property
    def triggers_for_eval(self) -> tuple[TriggerSpec, ...]:
        """Triggers used to measure ASR; DBA is evaluated with the full trigger."""
        return self.eval_triggers or self.triggers


def _delta_scale(global_model: nn.ParamVector, model: nn.ParamVector, scale: float) -> nn.ParamVector:
    if scale == 1.0:
        return model
    return model.with_values(global_model.values + scale * (model.values - global_model.values))


def craft_submission(
    behavior: AttackBehavior,
    global_model: nn.ParamVector,
    local_data: Dataset,
    cfg: nn.SgdConfig,
    round: int,
    seed: int,
) -> nn.ParamVector:
    if round < 0:
        raise ValueError("round must be nonnegative")
    if behavior.kind == "clean" or round < behavior.impersonate_until:
        return nn.train_local(global_model, local_data, cfg, seed)
    model = _ATTACKS[behavior.kind](behavior, global_model, local_data, cfg, seed)
    return _delta_scale(global_model, model, behavior.scale)


# ---------------------------------------------------------------------------
# individual attacks; each returns the unscaled poisoned model


def _vtba(b: AttackBehavior, g, data, cfg, seed):
    poisoned, _ = poison(data, b.triggers[0], b.pdr, seed)
    return nn.train_local(g, poisoned, cfg, seed)


def soft_labels(labels: np.ndarray, num_classes: int, poisoned_idx: np.ndarray, target: int, confidence: float) -> np.ndarray:
    """One-hot rows, except poisoned rows which put ``confidence`` on ``target``."""
    if num_classes < 2:
        raise ValueError("soft labels need at least two classes")
    t = nn.as_targets(labels, num_classes)
    row = np.full(num_classes, (1.0 - confidence) / (num_classes - 1))
    row[target] = confidence
    t[poisoned_idx] = row
    return t


def _lba(b: AttackBehavior, g, data, cfg, seed):
    if data.num_classes < 2:
        raise ValueError("lba needs at least two classes")
    trig = b.triggers[0]
    poisoned, idx = poison(data, trig, b.pdr, seed)
    if idx.size == 0:
        return nn.train_local(g, poisoned, cfg, seed)
    targets = soft_labels(poisoned.labels, data.num_classes, idx, trig.target_class, b.lba_confidence)
    return nn.train_local(g, poisoned, cfg, seed, targets=targets)


def mtba_split(budget: int, n_pairs: int) -> list[int]:
    """Even split of the poison budget; the remainder goes to earlier pairs."""
    base, rem = divmod(budget, n_pairs)
    return [base + (1 if i < rem else 0) for i in range(n_pairs)]


def _mtba(b: AttackBehavior, g, data, cfg, seed):
    budget = math.floor(b.pdr * len(data))
    if budget == 0:
        return nn.train_local(g, data, cfg, seed)
    idx = rng_for(seed, "poison").choice(len(data), size=budget, replace=False)
    out = data
    pos = 0
    for trig, count in zip(b.triggers, mtba_split(budget, len(b.triggers))):
        out = _poison_at(out, trig, np.sort(idx[pos : pos + count]))
        pos += count
    return nn.train_local(g, out, cfg, seed)


def dba_submask(trig: TriggerSpec, index: int, size: int) -> TriggerSpec:
    """Chunk ``index`` of ``size`` contiguous chunks of the trigger's mask coordinates."""
    chunks = np.array_split(trig.coords, size)
    mask = np.zeros_like(trig.mask)
    mask[chunks[index]] = 1
    return trig.with_mask(mask)


def _dba(b: AttackBehavior, g, data, cfg, seed):
    idx, size = b.dba_cohort
    poisoned, _ = poison(data, dba_submask(b.triggers[0], idx, size), b.pdr, seed)
    return nn.train_local(g, poisoned, cfg, seed)


def _rba(b: AttackBehavior, g, data, cfg, seed):
    poisoned, idx = poison(data, b.triggers[0], b.pdr, seed)
    if idx.size == 0 or b.fgsm_epsilon == 0 or cfg.local_epochs == 0:
        return nn.train_local(g, poisoned, cfg, seed)
    spec = g.layout
    opt = nn.Sgd(cfg)
    theta = g.values.copy()
    t = nn.as_targets(poisoned.labels, spec.num_classes)
    batch_no = 0
    for epoch in range(cfg.local_epochs):
        for bidx in nn.minibatches(len(poisoned), cfg.batch_size, seed, epoch):
            theta = nn.sgd_step(opt, theta, spec, poisoned.inputs[bidx], t[bidx], batch_no)
            batch_no += 1
        # adversarial epoch: every batch replaced by its FGSM version
        for bidx in nn.minibatches(len(poisoned), cfg.batch_size, derive_seed(seed, "rba"), epoch):
            x_adv = nn.fgsm_perturb(nn.ParamVector(theta, spec), poisoned.inputs[bidx], poisoned.labels[bidx], b.fgsm_epsilon)
            theta = nn.sgd_step(opt, theta, spec, x_adv, t[bidx], batch_no)
            batch_no += 1
    return g.with_values(theta)


def pba_radius(clean: np.ndarray, global_values: np.ndarray) -> float:
    """Median absolute entry of the clean update."""
    return float(np.median(np.abs(clean - global_values)))


def project_linf(poisoned: np.ndarray, clean: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(poisoned, clean - radius, clean + radius)


def _pba(b: AttackBehavior, g, data, cfg, seed):
    poisoned, idx = poison(data, b.triggers[0], b.pdr, seed)
    if idx.size == 0 or cfg.local_epochs == 0:
        return nn.train_local(g, poisoned, cfg, seed)
    spec = g.layout
    t_clean = nn.as_targets(data.labels, spec.num_classes)
    t_pois = nn.as_targets(poisoned.labels, spec.num_classes)
    opt_c, opt_p = nn.Sgd(cfg), nn.Sgd(cfg)
    theta_c = g.values.copy()
    theta_p = g.values.copy()
    batch_no = 0
    for epoch in range(cfg.local_epochs):
        batches = nn.minibatches(len(data), cfg.batch_size, seed, epoch)
        # the clean twin's epoch runs first so this epoch's radius is known
        snapshots = []
        for bidx in batches:
            theta_c = nn.sgd_step(opt_c, theta_c, spec, data.inputs[bidx], t_clean[bidx], batch_no)
            snapshots.append(theta_c)
        radius = pba_radius(theta_c, g.values) if b.pba_radius is None else b.pba_radius
        for bidx, center in zip(batches, snapshots):
            theta_p = nn.sgd_step(opt_p, theta_p, spec, poisoned.inputs[bidx], t_pois[bidx], batch_no)
            if math.isfinite(radius):
                theta_p = project_linf(theta_p, center, radius)
            batch_no += 1
    return g.with_values(theta_p)


_ATTACKS = {
    "vtba": _vtba,
    "itba": _vtba,
    "lba": _lba,
    "mtba": _mtba,
    "dba": _dba,
    "rba": _rba,
    "pba": _pba,
}
