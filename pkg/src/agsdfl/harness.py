"""Federated simulation: data setup, rounds, metrics and output files."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data as dm
from . import nn
from .attacks import AttackBehavior, craft_submission
from .config import FlConfig
from .defenses import agsd, baselines
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

ROUND_COLUMNS = ("round", "ca", "asr", "selected_cluster", "n_selected", "n_malicious_selected", "fn_rate", "skipped")
CLIENT_COLUMNS = ("round", "client_id", "malicious", "sigma", "eta", "gamma", "phi", "cluster", "aggregated")
BIAS_COLUMNS = ("epoch", "sigma_clean", "sigma_poisoned", "eta_clean", "eta_poisoned")


class NoEligibleSamplesWarning(UserWarning):
    pass


class RoundError(RuntimeError):
    def __init__(self, round: int, cause: Exception):
        super().__init__(f"round {round}: {type(cause).__name__}: {cause}")
        self.round = round


# ---------------------------------------------------------------------------
# metrics


def metric_ca(model: nn.ParamVector, test: dm.Dataset) -> float:
    return nn.accuracy(model, test.inputs, test.labels)


def asr_eligible(model: nn.ParamVector, test: dm.Dataset, trig: dm.TriggerSpec) -> np.ndarray:
    """Indices of test samples that count toward the attack success rate."""
    clean_ok = nn.predict(model, test.inputs) == test.labels
    return np.flatnonzero(clean_ok & (test.labels != trig.target_class))


def metric_asr(model: nn.ParamVector, test: dm.Dataset, trig: dm.TriggerSpec) -> float:
    """Share of correctly classified non-target samples that the trigger flips to the target."""
    idx = asr_eligible(model, test, trig)
    if idx.size == 0:
        warnings.warn("no eligible samples for ASR; reporting 0", NoEligibleSamplesWarning, stacklevel=2)
        return 0.0
    x = dm.apply_trigger_all(test.inputs[idx], trig)
    return float(np.mean(nn.predict(model, x) == trig.target_class))


def metric_asr_multi(model: nn.ParamVector, test: dm.Dataset, triggers) -> float:
    return float(np.mean([metric_asr(model, test, t) for t in triggers]))


def metric_false_negative(selected_ids, malicious_ids) -> float:
    """Fraction of the selected clients that are malicious (0 when nothing was selected)."""
    selected = list(selected_ids)
    if not selected:
        return 0.0
    bad = set(int(m) for m in malicious_ids)
    return sum(int(c) in bad for c in selected) / len(selected)


# ---------------------------------------------------------------------------
# setup


def sample_clients(n_clients: int, per_round: int, round: int, master_seed: int) -> tuple[int, ...]:
    if not 1 <= per_round <= n_clients:
        raise ValueError(f"cannot sample {per_round} of {n_clients} clients")
    picked = rng_for(master_seed, "sample", round).choice(n_clients, size=per_round, replace=False)
    return tuple(sorted(int(c) for c in picked))


def choose_malicious(n_clients: int, n_malicious: int, master_seed: int) -> tuple[int, ...]:
    order = rng_for(master_seed, "malicious").permutation(n_clients)
    return tuple(sorted(int(c) for c in order[:n_malicious]))


def build_triggers(cfg: FlConfig, dim: int) -> tuple[tuple[dm.TriggerSpec, ...], tuple[dm.TriggerSpec, ...]]:
    """Training triggers and evaluation triggers for the configured attack."""
    a = cfg.attack
    if a.kind == "itba":
        t = dm.invisible_trigger(dim, a.target_class, a.itba_blend, derive_seed(cfg.seed, "trigger"))
        return (t,), (t,)
    if a.kind == "mtba":
        trigs = tuple(
            dm.visible_trigger(dim, tgt, a.trigger_start + j * a.trigger_width, a.trigger_width, a.trigger_value)
            for j, tgt in enumerate(a.mtba_targets)
        )
        return trigs, trigs
    t = dm.visible_trigger(dim, a.target_class, a.trigger_start, a.trigger_width, a.trigger_value)
    return (t,), (t,)


@dataclass
class Setup:
    cfg: FlConfig
    spec: nn.ModelSpec
    sgd: nn.SgdConfig
    train: dm.Dataset
    test: dm.Dataset
    clients: list[dm.Dataset]
    healing: dm.Dataset | None
    malicious: tuple[int, ...]
    behaviors: dict[int, AttackBehavior]
    eval_triggers: tuple[dm.TriggerSpec, ...]


def load_pool(cfg: FlConfig) -> dm.Dataset:
    d = cfg.data
    if d.source == "idx":
        return dm.load_idx(d.images_path, d.labels_path, d.num_classes)
    return dm.gen_synthetic(d.num_classes, d.dim, d.samples_per_class, d.separation, derive_seed(cfg.seed, "data"), d.noise, d.background)


def ood_healing_set(cfg: FlConfig, dim: int, num_classes: int) -> dm.Dataset:
    o = cfg.ood
    raw = dm.gen_synthetic(o.num_classes, o.dim, o.samples_per_class, o.separation, derive_seed(cfg.seed, "ood"), o.noise)
    raw = raw.subset(np.arange(min(cfg.agsd.healing_size, len(raw))))
    return dm.coerce_to(raw, dim, num_classes)


def build_setup(cfg: FlConfig) -> Setup:
    d, a = cfg.data, cfg.attack
    pool = load_pool(cfg)
    k = pool.num_classes
    train, test = dm.train_test_split(pool, d.test_fraction, derive_seed(cfg.seed, "split"))
    healing = None
    if cfg.defense.kind == "agsd_id":
        # the in-distribution healing set is held out of every client's data
        order = rng_for(cfg.seed, "healing").permutation(len(train))
        n_h = min(cfg.agsd.healing_size, len(train) - cfg.fl.n_clients)
        healing = train.subset(np.sort(order[:n_h]))
        train = train.subset(np.sort(order[n_h:]))
    elif cfg.defense.kind == "agsd_ood":
        healing = ood_healing_set(cfg, pool.dim, k)

    pseed = derive_seed(cfg.seed, "partition")
    if cfg.partition.kind == "iid":
        plan = dm.partition_iid(train, cfg.fl.n_clients, pseed)
    else:
        plan = dm.partition_noniid(train, cfg.fl.n_clients, cfg.partition.alpha, cfg.partition.group_fraction, pseed)
    clients = [train.subset(list(ix)) for ix in plan.assignments]
    if any(len(c) == 0 for c in clients):
        log.warning("some clients received no data")

    spec = nn.ModelSpec((pool.dim, *cfg.model.hidden, k))
    s = cfg.sgd
    sgd = nn.SgdConfig(s.learning_rate, s.momentum, s.weight_decay, s.local_epochs, s.batch_size)
    malicious = choose_malicious(cfg.fl.n_clients, cfg.n_malicious, cfg.seed) if a.kind != "clean" else ()
    triggers, eval_triggers = build_triggers(cfg, pool.dim)
    eps = cfg.agsd.fgsm_epsilon if a.rba_epsilon is None else a.rba_epsilon
    behaviors = {}
    for rank, cid in enumerate(malicious):
        behaviors[cid] = AttackBehavior(
            kind=a.kind,
            triggers=triggers,
            pdr=a.pdr,
            scale=a.scale,
            lba_confidence=a.lba_confidence,
            dba_cohort=(rank % a.dba_parts, a.dba_parts),
            impersonate_until=a.impersonate_until,
            fgsm_epsilon=eps,
            eval_triggers=eval_triggers,
        )
    return Setup(cfg, spec, sgd, train, test, clients, healing, malicious, behaviors, eval_triggers)


# ---------------------------------------------------------------------------
# rounds


@dataclass
class ClientRow:
    client_id: int
    malicious: bool
    sigma: float = math.nan
    eta: float = math.nan
    gamma: float = math.nan
    phi: float = math.nan
    cluster: int = -1
    aggregated: bool = True


@dataclass
class RoundRecord:
    round: int
    ca: float
    asr: float
    selected: tuple[int, ...]
    n_malicious_selected: int
    fn_rate: float
    selected_cluster: int = -1
    skipped: bool = False
    clients: list[ClientRow] = field(default_factory=list)
    # mean trust history over every malicious client after this round
    phi_malicious: float = math.nan

    def row(self) -> dict:
        return {
            "round": self.round,
            "ca": self.ca,
            "asr": self.asr,
            "selected_cluster": self.selected_cluster,
            "n_selected": len(self.selected),
            "n_malicious_selected": self.n_malicious_selected,
            "fn_rate": self.fn_rate,
            "skipped": int(self.skipped),
        }


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    best_round: int
    final_ca: float
    final_asr: float
    model: nn.ParamVector
    stopped_early: bool
    malicious: tuple[int, ...]

    @property
    def mean_fn_rate(self) -> float:
        return float(np.mean([r.fn_rate for r in self.records])) if self.records else 0.0

    def summary(self) -> dict:
        return {
            "rounds_run": len(self.records),
            "best_round": self.best_round,
            "final_ca": self.final_ca,
            "final_asr": self.final_asr,
            "mean_fn_rate": self.mean_fn_rate,
            "stopped_early": self.stopped_early,
            "malicious_clients": list(self.malicious),
        }


@dataclass
class RunState:
    model: nn.ParamVector
    trust: agsd.TrustState


def initial_state(setup: Setup) -> RunState:
    model = nn.init_params(setup.spec, derive_seed(setup.cfg.seed, "init"))
    return RunState(model, agsd.TrustState({}, setup.cfg.agsd.phi_init))


def collect_submissions(setup: Setup, state: RunState, t: int, ids) -> agsd.RoundSubmissions:
    models = []
    for cid in ids:
        local = setup.clients[cid]
        cseed = derive_seed(setup.cfg.seed, "client", t, cid)
        if len(local) == 0:
            models.append(state.model.copy())
        elif cid in setup.behaviors:
            models.append(craft_submission(setup.behaviors[cid], state.model, local, setup.sgd, t - 1, cseed))
        else:
            models.append(nn.train_local(state.model, local, setup.sgd, cseed))
    return agsd.RoundSubmissions(tuple(ids), tuple(models), state.model)


def agsd_config(setup: Setup) -> agsd.AgsdConfig:
    g = setup.cfg.agsd
    return agsd.AgsdConfig(
        healing_set=setup.healing,
        fgsm_epsilon=g.fgsm_epsilon,
        n_clusters=g.n_clusters,
        noise_scale=g.noise_scale,
        phi_init=g.phi_init,
        attack_target=g.attack_target,
        eta_weight_sign=g.eta_weight_sign,
        final_aggregation=g.final_aggregation,
    )


def run_round(setup: Setup, state: RunState, t: int) -> tuple[RunState, RoundRecord]:
    """Run round ``t`` (1-based) and evaluate the new global model."""
    cfg = setup.cfg
    ids = sample_clients(cfg.fl.n_clients, cfg.clients_per_round, t, cfg.seed)
    subs = collect_submissions(setup, state, t, ids)
    bad = set(setup.malicious)
    rows = [ClientRow(c, c in bad) for c in ids]
    dseed = derive_seed(cfg.seed, "defense", t)
    kind = cfg.defense.kind
    trust = state.trust
    cluster, skipped = -1, False
    if kind == "fedavg":
        model, selected = baselines.fedavg_round(subs), ids
    elif kind == "dp":
        model, selected = baselines.dp_round(subs, cfg.dp.clip_norm, cfg.dp.noise_sigma, dseed), ids
    elif kind == "mkrum":
        model, selected = baselines.mkrum_round(subs, cfg.mkrum.f, cfg.mkrum.m)
    else:
        model, report, trust = agsd.agsd_round(subs, trust, agsd_config(setup), dseed)
        selected, cluster, skipped = report.aggregated, report.alpha, report.skipped
        for i, r in enumerate(rows):
            r.sigma, r.eta, r.gamma = float(report.sigma[i]), float(report.eta[i]), float(report.gamma[i])
            r.phi, r.cluster = float(report.phi_after[i]), int(report.assignment[i])
    chosen = set(selected)
    for r in rows:
        r.aggregated = r.client_id in chosen
    record = RoundRecord(
        round=t,
        ca=metric_ca(model, setup.test),
        asr=metric_asr_multi(model, setup.test, setup.eval_triggers),
        selected=tuple(selected),
        n_malicious_selected=sum(c in bad for c in selected),
        fn_rate=metric_false_negative(selected, bad),
        selected_cluster=cluster,
        skipped=skipped,
        clients=rows,
    )
    if kind.startswith("agsd") and setup.malicious:
        record.phi_malicious = float(np.mean([trust.get(c) for c in setup.malicious]))
    return RunState(model, trust), record


def run_experiment(cfg: FlConfig, setup: Setup | None = None, on_round=None) -> ExperimentResult:
    """Train for up to ``fl.rounds`` rounds with patience-based early stopping.

    Returns the metrics of the best-CA global model, which is also the model
    handed back; ties keep the earlier round.
    """
    setup = setup or build_setup(cfg)
    state = initial_state(setup)
    records: list[RoundRecord] = []
    best = None
    since_best = 0
    stopped = False
    for t in range(1, cfg.fl.rounds + 1):
        try:
            state, rec = run_round(setup, state, t)
        except Exception as exc:
            raise RoundError(t, exc) from exc
        records.append(rec)
        if on_round is not None:
            on_round(rec)
        if best is None or rec.ca > best[1].ca:
            best = (state.model, rec)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped = t < cfg.fl.rounds
                break
    model, rec = best
    return ExperimentResult(records, rec.round, rec.ca, rec.asr, model, stopped, setup.malicious)


# ---------------------------------------------------------------------------
# output files


def write_rounds_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ROUND_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())


def write_clients_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CLIENT_COLUMNS)
        for r in records:
            for c in r.clients:
                w.writerow([r.round, c.client_id, int(c.malicious), c.sigma, c.eta, c.gamma, c.phi, c.cluster, int(c.aggregated)])


def write_bias_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BIAS_COLUMNS)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# centralized bias demonstration


def demo_bias(cfg: FlConfig, ood: bool | None = None) -> list[dict]:
    """Train a clean and a poisoned model side by side and track both statistics.

    Each epoch, every model's own FGSM perturbations of the healing samples
    are scored with sigma (prediction spread) and eta (mean confidence).
    """
    b = cfg.bias
    ood = b.ood if ood is None else ood
    pool = load_pool(cfg)
    train, test = dm.train_test_split(pool, cfg.data.test_fraction, derive_seed(cfg.seed, "split"))
    trig = build_triggers(cfg, pool.dim)[0][0]
    poisoned, _ = dm.poison(train, trig, b.pdr, derive_seed(cfg.seed, "bias-poison"))
    if ood:
        healing = ood_healing_set(cfg.with_value("agsd.healing_size", b.n_samples), pool.dim, pool.num_classes)
    else:
        healing = test.subset(np.arange(min(b.n_samples, len(test))))
    spec = nn.ModelSpec((pool.dim, *cfg.model.hidden, pool.num_classes))
    s = cfg.sgd
    sgd = nn.SgdConfig(s.learning_rate, s.momentum, s.weight_decay, 1, s.batch_size)
    clean = dirty = nn.init_params(spec, derive_seed(cfg.seed, "init"))
    eps = cfg.agsd.fgsm_epsilon
    rows = []
    for epoch in range(1, b.epochs + 1):
        eseed = derive_seed(cfg.seed, "bias-epoch", epoch)
        clean = nn.train_local(clean, train, sgd, eseed)
        dirty = nn.train_local(dirty, poisoned, sgd, eseed)
        xc = nn.fgsm_perturb(clean, healing.inputs, healing.labels, eps, b.loss_kind)
        xp = nn.fgsm_perturb(dirty, healing.inputs, healing.labels, eps, b.loss_kind)
        rows.append({
            "epoch": epoch,
            "sigma_clean": agsd.compute_sigma(clean, xc),
            "sigma_poisoned": agsd.compute_sigma(dirty, xp),
            "eta_clean": agsd.compute_eta(clean, xc),
            "eta_poisoned": agsd.compute_eta(dirty, xp),
        })
    return rows
