"""Reference aggregators: plain averaging, clip-and-noise, and multi-Krum."""
from __future__ import annotations

import numpy as np

from .. import nn
from ..seeding import rng_for
from .agsd import RoundSubmissions


def fedavg_round(subs: RoundSubmissions) -> nn.ParamVector:
    return subs.prev_global.with_values(subs.matrix().mean(axis=0))


def krum_scores(models: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances to the ``c - f - 2`` nearest other submissions."""
    c = models.shape[0]
    if c < f + 3:
        raise ValueError(f"multi-Krum needs at least f + 3 = {f + 3} submissions, got {c}")
    sq = np.sum(models**2, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * models @ models.T, 0.0)
    np.fill_diagonal(dist, np.inf)
    k = c - f - 2
    return np.sort(dist, axis=1)[:, :k].sum(axis=1)


def mkrum_select(subs: RoundSubmissions, f: int, m: int) -> tuple[int, ...]:
    if not 1 <= m <= len(subs.models):
        raise ValueError("m must be between 1 and the number of submissions")
    scores = krum_scores(subs.matrix(), f)
    chosen = np.argsort(scores, kind="stable")[:m]
    return tuple(sorted(subs.client_ids[i] for i in chosen))


def mkrum_round(subs: RoundSubmissions, f: int, m: int) -> tuple[nn.ParamVector, tuple[int, ...]]:
    chosen = set(mkrum_select(subs, f, m))
    rows = [i for i, c in enumerate(subs.client_ids) if c in chosen]
    return subs.prev_global.with_values(subs.matrix()[rows].mean(axis=0)), tuple(sorted(chosen))


def clip_delta(delta: np.ndarray, clip_norm: float) -> np.ndarray:
    n = np.linalg.norm(delta)
    if n <= clip_norm:
        return delta
    return delta * (clip_norm / n)


def dp_round(subs: RoundSubmissions, clip_norm: float, noise_sigma: float, seed: int) -> nn.ParamVector:
    """Clip each delta to ``clip_norm``, average, and add Gaussian noise per coordinate."""
    if clip_norm < 0 or noise_sigma < 0:
        raise ValueError("clip_norm and noise_sigma must be nonnegative")
    clipped = np.stack([clip_delta(d, clip_norm) for d in subs.deltas()])
    agg = clipped.mean(axis=0)
    if noise_sigma:
        agg = agg + rng_for(seed, "dp-noise").normal(0.0, noise_sigma, size=agg.size)
    return subs.prev_global.with_values(subs.prev_global.values + agg)
