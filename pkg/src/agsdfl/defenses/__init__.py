from .agsd import (
    AgsdConfig,
    RoundSubmissions,
    TrustIndexReport,
    TrustState,
    agsd_round,
    cluster_metric,
    compute_eta,
    compute_sigma,
    craft_healing_perturbations,
    noisy_aggregate,
    preliminary_aggregate,
    rescale_deltas,
    select_cluster,
    stateful_aggregate,
    trust_index,
    update_trust_history,
)
from .baselines import dp_round, fedavg_round, krum_scores, mkrum_round, mkrum_select
from .spectral import spectral_cluster

__all__ = [
    "AgsdConfig",
    "RoundSubmissions",
    "TrustIndexReport",
    "TrustState",
    "agsd_round",
    "cluster_metric",
    "compute_eta",
    "compute_sigma",
    "craft_healing_perturbations",
    "dp_round",
    "fedavg_round",
    "krum_scores",
    "mkrum_round",
    "mkrum_select",
    "noisy_aggregate",
    "preliminary_aggregate",
    "rescale_deltas",
    "select_cluster",
    "spectral_cluster",
    "stateful_aggregate",
    "trust_index",
    "update_trust_history",
]
