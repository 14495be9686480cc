"""Adversarially guided stateful aggregation.

One round: rescale client deltas to the median norm, build a noisy
preliminary aggregate, cluster submissions on two cosine affinities, craft
FGSM perturbations of a small healing set on the preliminary model, score
every client by how spread out and how (un)confident its predictions on
those perturbations are, pick the best-scoring cluster, and aggregate only
its members with positive trust history.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import nn
from ..data import Dataset
from ..seeding import derive_seed, rng_for
from .spectral import spectral_cluster

log = logging.getLogger(__name__)

ATTACK_TARGETS = ("preliminary_aggregate", "plain_fedavg")
FINAL_AGGREGATIONS = ("noisy", "min_norm")


@dataclass(frozen=True, eq=False)
class RoundSubmissions:
    client_ids: tuple[int, ...]
    models: tuple[nn.ParamVector, ...]
    prev_global: nn.ParamVector

    def __post_init__(self):
        object.__setattr__(self, "client_ids", tuple(int(c) for c in self.client_ids))
        object.__setattr__(self, "models", tuple(self.models))
        if not self.client_ids:
            raise ValueError("a round needs at least one submission")
        if len(self.client_ids) != len(self.models):
            raise ValueError("client_ids and models differ in length")
        if len(set(self.client_ids)) != len(self.client_ids):
            raise ValueError("duplicate client id in submissions")
        n = len(self.prev_global)
        if any(len(m) != n for m in self.models):
            raise ValueError("submissions have different parameter counts")

    def matrix(self) -> np.ndarray:
        return np.stack([m.values for m in self.models])

    def deltas(self) -> np.ndarray:
        return self.matrix() - self.prev_global.values

    def without(self, client_id: int) -> "RoundSubmissions":
        keep = [i for i, c in enumerate(self.client_ids) if c != client_id]
        return RoundSubmissions(
            tuple(self.client_ids[i] for i in keep), tuple(self.models[i] for i in keep), self.prev_global
        )


@dataclass
class TrustState:
    phi: dict[int, float] = field(default_factory=dict)
    phi_init: float = 1e-2

    @classmethod
    def register(cls, client_ids, phi_init: float = 1e-2) -> "TrustState":
        return cls({int(c): float(phi_init) for c in client_ids}, phi_init)

    def get(self, client_id: int) -> float:
        return self.phi.get(int(client_id), self.phi_init)

    def copy(self) -> "TrustState":
        return TrustState(dict(self.phi), self.phi_init)


@dataclass(frozen=True, eq=False)
class AgsdConfig:
    healing_set: Dataset | None = None
    fgsm_epsilon: float = 0.2
    n_clusters: int = 2
    noise_scale: float = 1e-5
    phi_init: float = 1e-2
    attack_target: str = "preliminary_aggregate"
    # sign of W in the eta weight exp(sign * W)
    eta_weight_sign: float = -1.0
    final_aggregation: str = "noisy"

    def __post_init__(self):
        if not self.fgsm_epsilon > 0:
            raise ValueError("fgsm_epsilon must be positive")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be at least 2")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.attack_target not in ATTACK_TARGETS:
            raise ValueError(f"attack_target must be one of {ATTACK_TARGETS}")
        if self.eta_weight_sign not in (-1.0, 1.0):
            raise ValueError("eta_weight_sign must be -1 or +1")
        if self.final_aggregation not in FINAL_AGGREGATIONS:
            raise ValueError(f"final_aggregation must be one of {FINAL_AGGREGATIONS}")
        if self.healing_set is not None and len(self.healing_set) == 0:
            raise ValueError("healing set is empty")


@dataclass
class TrustIndexReport:
    client_ids: tuple[int, ...]
    sigma: np.ndarray
    eta: np.ndarray
    sigma_soft: np.ndarray
    eta_soft: np.ndarray
    gamma: np.ndarray
    w_sigma: float
    assignment: np.ndarray
    alpha: int
    rejected_clusters: tuple[int, ...]
    aggregated: tuple[int, ...]
    phi_before: np.ndarray
    phi_after: np.ndarray
    skipped: bool = False
    all_zero_deltas: bool = False
    # the preliminary aggregate is potentially poisoned; kept for inspection only
    preliminary: nn.ParamVector | None = None

    def selected_members(self) -> tuple[int, ...]:
        return tuple(c for c, a in zip(self.client_ids, self.assignment) if a == self.alpha)


# ---------------------------------------------------------------------------
# step 1: rescaling and preliminary aggregation


def rescale_deltas(deltas) -> tuple[np.ndarray, bool]:
    """Project every delta onto the sphere of median l2 norm.

    Returns the rescaled c x P matrix and a flag that is set when every delta
    is zero (in which case the input is returned unchanged).
    """
    d = np.atleast_2d(np.asarray([_vals(x) for x in deltas], dtype=np.float64))
    if d.shape[0] == 0:
        raise ValueError("no deltas to rescale")
    norms = np.linalg.norm(d, axis=1)
    if not np.any(norms > 0):
        log.warning("all client deltas are zero; rescaling skipped")
        return d.copy(), True
    median = float(np.median(norms))
    factor = np.where(norms > 0, median / np.where(norms > 0, norms, 1.0), 0.0)
    return d * factor[:, None], False


def noisy_aggregate(prev_global: nn.ParamVector, deltas, noise_scale: float, seed: int, client_ids=None) -> nn.ParamVector:
    """``prev + mean_i(delta_i + noise_scale * N(0, std(delta_i)^2))``.

    Noise for each delta is drawn from a generator keyed by its client id, so
    dropping one client leaves the others' noise untouched.
    """
    d = np.atleast_2d(np.asarray([_vals(x) for x in deltas], dtype=np.float64))
    if d.shape[0] == 0:
        raise ValueError("noisy_aggregate needs at least one delta")
    ids = range(d.shape[0]) if client_ids is None else client_ids
    noisy = d.copy()
    if noise_scale:
        for row, cid in enumerate(ids):
            std = float(np.std(d[row]))
            if std > 0:
                noisy[row] += noise_scale * rng_for(seed, "agg-noise", int(cid)).normal(0.0, std, size=d.shape[1])
    return prev_global.with_values(prev_global.values + noisy.mean(axis=0))


def preliminary_aggregate(subs: RoundSubmissions, cfg: AgsdConfig, seed: int) -> tuple[nn.ParamVector, np.ndarray, bool]:
    """Noisy mean of the rescaled deltas; returns (model, rescaled deltas, all-zero flag)."""
    scaled, all_zero = rescale_deltas(subs.deltas())
    prelim = noisy_aggregate(subs.prev_global, scaled, cfg.noise_scale, seed, subs.client_ids)
    return prelim, scaled, all_zero


# ---------------------------------------------------------------------------
# step 2: clustering


def pairwise_cosine(vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity matrix; two zero vectors count as identical (similarity 1)."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    unit = v / np.where(norms > 0, norms, 1.0)[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    zero = norms == 0
    sim[np.ix_(zero, zero)] = 1.0
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def cluster_metric(scaled_deltas: np.ndarray, prev_global: nn.ParamVector, prelim: nn.ParamVector) -> np.ndarray:
    """Cosine affinity of deltas plus cosine affinity of offsets from the preliminary model."""
    scaled = np.asarray(scaled_deltas, dtype=np.float64)
    offsets = prev_global.values + scaled - prelim.values
    return pairwise_cosine(offsets) + pairwise_cosine(scaled)


# ---------------------------------------------------------------------------
# step 3: trust index


def craft_healing_perturbations(target_model: nn.ParamVector, healing: Dataset, epsilon: float) -> Dataset:
    if len(healing) == 0:
        raise ValueError("healing set is empty")
    x_adv = nn.fgsm_perturb(target_model, healing.inputs, healing.labels, epsilon, loss_kind="agsd")
    return Dataset(x_adv, healing.labels, healing.num_classes)


def compute_sigma(model: nn.ParamVector, inputs: np.ndarray) -> float:
    """Mean over classes of the std of the one-hot argmax indicator."""
    x = np.asarray(inputs)
    if x.shape[0] == 0:
        raise ValueError("sigma needs at least one sample")
    pred = nn.predict(model, x)
    onehot = np.eye(model.layout.num_classes)[pred]
    return float(onehot.std(axis=0).mean())


def compute_eta(model: nn.ParamVector, inputs: np.ndarray) -> float:
    """Largest entry of the mean predicted distribution."""
    x = np.asarray(inputs)
    if x.shape[0] == 0:
        raise ValueError("eta needs at least one sample")
    return float(nn.forward(model, x).mean(axis=0).max())


def _softmax(v: np.ndarray) -> np.ndarray:
    z = np.exp(v - v.max())
    return z / z.sum()


def w_of_sigma(sigma_soft: np.ndarray) -> float:
    """``(max - min) / (mean - min)``, or 0 when ``mean - min < 1e-12``."""
    s = np.asarray(sigma_soft, dtype=np.float64)
    n, lo = s.size, s.min()
    # n * (mean - min) without dividing by n first keeps simple ratios exact
    denom = s.sum() - n * lo
    if denom < n * 1e-12:
        return 0.0
    return float(n * (s.max() - lo) / denom)


def trust_index(sigmas, etas, eta_weight_sign: float = -1.0) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Returns (gamma, W, softmax(sigma), softmax(eta))."""
    s = np.asarray(sigmas, dtype=np.float64)
    e = np.asarray(etas, dtype=np.float64)
    if s.shape != e.shape or s.ndim != 1 or s.size == 0:
        raise ValueError("sigmas and etas must be equal-length nonempty vectors")
    s_soft, e_soft = _softmax(s), _softmax(e)
    w = w_of_sigma(s_soft)
    gamma = s_soft - np.exp(eta_weight_sign * w) * e_soft
    return gamma, w, s_soft, e_soft


def select_cluster(assignment, gammas, k: int | None = None) -> tuple[int, tuple[int, ...]]:
    """Cluster with the largest mean trust index; ties go to the larger, then lower-indexed, cluster."""
    labels = np.asarray(assignment)
    g = np.asarray(gammas, dtype=np.float64)
    present = sorted(set(int(x) for x in labels))
    k = max(present) + 1 if k is None else k
    best = None
    for c in present:
        members = labels == c
        key = (float(g[members].mean()), int(members.sum()), -c)
        if best is None or key > best[0]:
            best = (key, c)
    alpha = best[1]
    return alpha, tuple(c for c in range(k) if c != alpha)


# ---------------------------------------------------------------------------
# step 4: stateful filtering and trust update


def stateful_aggregate(
    subs: RoundSubmissions,
    alpha_members: Sequence[int],
    trust: TrustState,
    cfg: AgsdConfig,
    seed: int,
) -> tuple[nn.ParamVector, tuple[int, ...], bool]:
    """Aggregate the selected members whose trust history is positive.

    Returns (model, aggregated ids, skipped). An empty eligible set keeps the
    previous global model and sets ``skipped``.
    """
    members = set(int(c) for c in alpha_members)
    rows = [i for i, c in enumerate(subs.client_ids) if c in members and trust.get(c) > 0]
    ids = tuple(subs.client_ids[i] for i in rows)
    if not rows:
        return subs.prev_global.copy(), (), True
    if cfg.final_aggregation == "min_norm":
        return _min_norm_aggregate(subs, members, rows), ids, False
    deltas = np.stack([subs.models[i].values - subs.prev_global.values for i in rows])
    return noisy_aggregate(subs.prev_global, deltas, cfg.noise_scale, seed, ids), ids, False


def _min_norm_aggregate(subs: RoundSubmissions, members: set[int], rows: list[int]) -> nn.ParamVector:
    # weighted sum of full models divided by the whole selected cluster size
    cluster = [m for c, m in zip(subs.client_ids, subs.models) if c in members]
    min_norm = min(nn.l2_norm(m) for m in cluster)
    total = np.zeros(len(subs.prev_global))
    for i in rows:
        m = subs.models[i]
        n = nn.l2_norm(m)
        total += m.values * (min_norm / n if n > 0 else 0.0)
    return subs.prev_global.with_values(total / len(cluster))


def update_trust_history(
    trust: TrustState,
    client_ids: Sequence[int],
    accepted: Sequence[bool],
    gammas,
) -> TrustState:
    """Accepted clients gain ``gamma_i / max gamma``; rejected ones lose ``1 - gamma_i / max gamma``.

    If any trust index is nonpositive, all indices are shifted so the smallest
    becomes 1e-9 before taking ratios; this keeps the ratios in (0, 1].
    """
    g = np.asarray(gammas, dtype=np.float64)
    if g.min() <= 0:
        g = g + (1e-9 - g.min())
    ratio = g / g.max()
    out = trust.copy()
    for cid, acc, r in zip(client_ids, accepted, ratio):
        phi = trust.get(cid)
        out.phi[int(cid)] = phi + r if acc else phi - (1.0 - r)
    return out


# ---------------------------------------------------------------------------
# full round


def agsd_round(
    subs: RoundSubmissions,
    trust: TrustState,
    cfg: AgsdConfig,
    seed: int,
) -> tuple[nn.ParamVector, TrustIndexReport, TrustState]:
    if cfg.healing_set is None:
        raise ValueError("agsd needs a healing set")
    prelim, scaled, all_zero = preliminary_aggregate(subs, cfg, derive_seed(seed, "prelim"))
    affinity = cluster_metric(scaled, subs.prev_global, prelim)
    assignment = spectral_cluster(affinity, cfg.n_clusters, derive_seed(seed, "cluster"))

    if cfg.attack_target == "preliminary_aggregate":
        target = prelim
    else:
        target = subs.prev_global.with_values(subs.matrix().mean(axis=0))
    d_adv = craft_healing_perturbations(target, cfg.healing_set, cfg.fgsm_epsilon)
    sigma = np.array([compute_sigma(m, d_adv.inputs) for m in subs.models])
    eta = np.array([compute_eta(m, d_adv.inputs) for m in subs.models])
    gamma, w, s_soft, e_soft = trust_index(sigma, eta, cfg.eta_weight_sign)
    alpha, rejected = select_cluster(assignment, gamma, cfg.n_clusters)

    members = [c for c, a in zip(subs.client_ids, assignment) if a == alpha]
    new_global, aggregated, skipped = stateful_aggregate(subs, members, trust, cfg, derive_seed(seed, "final"))
    if skipped:
        log.info("no trusted client in the selected cluster; keeping the previous model")
    accepted = [a == alpha for a in assignment]
    new_trust = update_trust_history(trust, subs.client_ids, accepted, gamma)

    report = TrustIndexReport(
        client_ids=subs.client_ids,
        sigma=sigma,
        eta=eta,
        sigma_soft=s_soft,
        eta_soft=e_soft,
        gamma=gamma,
        w_sigma=w,
        assignment=np.asarray(assignment),
        alpha=alpha,
        rejected_clusters=rejected,
        aggregated=aggregated,
        phi_before=np.array([trust.get(c) for c in subs.client_ids]),
        phi_after=np.array([new_trust.get(c) for c in subs.client_ids]),
        skipped=skipped,
        all_zero_deltas=all_zero,
        preliminary=prelim,
    )
    return new_global, report, new_trust


def _vals(x) -> np.ndarray:
    return x.values if isinstance(x, nn.ParamVector) else np.asarray(x, dtype=np.float64)
