import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from agsdfl import nn
from agsdfl.data import Dataset
from agsdfl.defenses import agsd
from agsdfl.defenses.agsd import AgsdConfig, RoundSubmissions, TrustState

SPEC = nn.ModelSpec((4, 3))


def pv(values, spec=SPEC):
    return nn.ParamVector(np.asarray(values, dtype=float), spec)


def subs_from(deltas, prev=None, ids=None):
    prev = pv(np.zeros(SPEC.n_params)) if prev is None else prev
    ids = range(len(deltas)) if ids is None else ids
    return RoundSubmissions(tuple(ids), tuple(prev.with_values(prev.values + d) for d in deltas), prev)


# ---------------------------------------------------------------- rescaling


def test_rescale_to_median_norm():
    d = np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 4.0]])
    out, zero = agsd.rescale_deltas(d)
    assert not zero
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 2.0)
    np.testing.assert_allclose(out[0], [2.0, 0, 0])


def test_rescale_equal_norms_and_single():
    d = np.array([[3.0, 4.0], [0.0, 5.0]])
    np.testing.assert_allclose(agsd.rescale_deltas(d)[0], d, atol=1e-9)
    one = np.array([[1.0, -2.0]])
    np.testing.assert_array_equal(agsd.rescale_deltas(one)[0], one)


def test_rescale_all_zero_flag():
    out, zero = agsd.rescale_deltas(np.zeros((3, 4)))
    assert zero and not out.any()


@given(arrays(float, (5, 6), elements=st.integers(-100, 100).map(lambda i: i / 10)))
def test_rescale_keeps_direction(d):
    out, _ = agsd.rescale_deltas(d)
    norms = np.linalg.norm(d, axis=1)
    for row in range(5):
        if norms[row] > 1e-6 and np.linalg.norm(out[row]) > 1e-6:
            assert nn.cosine_sim(out[row], d[row]) == pytest.approx(1.0)
        if norms[row] == 0:
            assert not out[row].any()


# ---------------------------------------------------------------- aggregation


def test_noisy_aggregate_without_noise_is_fedavg():
    prev = pv(np.arange(SPEC.n_params))
    d = np.random.default_rng(0).normal(size=(3, SPEC.n_params))
    out = agsd.noisy_aggregate(prev, d, 0.0, 1)
    np.testing.assert_allclose(out.values, prev.values + d.mean(axis=0))


def test_noisy_aggregate_degenerate_cases():
    prev = pv(np.ones(SPEC.n_params))
    np.testing.assert_array_equal(agsd.noisy_aggregate(prev, np.zeros((1, SPEC.n_params)), 0.5, 0).values, prev.values)
    v = np.linspace(-1, 1, SPEC.n_params)
    np.testing.assert_allclose(agsd.noisy_aggregate(prev, np.stack([v, -v]), 0.0, 0).values, prev.values)


def test_noise_is_keyed_by_client_id():
    prev = pv(np.zeros(SPEC.n_params))
    d = np.random.default_rng(1).normal(size=(2, SPEC.n_params))
    both = agsd.noisy_aggregate(prev, d, 0.1, 9, client_ids=[3, 8])
    a = agsd.noisy_aggregate(prev, d[:1], 0.1, 9, client_ids=[3])
    b = agsd.noisy_aggregate(prev, d[1:], 0.1, 9, client_ids=[8])
    np.testing.assert_allclose(both.values, (a.values + b.values) / 2)
    noise = a.values - d[0]
    assert 0 < np.std(noise) < 0.1 * np.std(d[0]) * 1.5


def test_preliminary_aggregate_examples():
    cfg = AgsdConfig(noise_scale=1e-5)
    prev = pv(np.full(SPEC.n_params, 0.3))
    same = RoundSubmissions((0, 1, 2), (prev.copy(), prev.copy(), prev.copy()), prev)
    model, _, zero = agsd.preliminary_aggregate(same, cfg, 0)
    assert zero
    np.testing.assert_array_equal(model.values, prev.values)

    quiet = AgsdConfig(noise_scale=0.0)
    m = prev.with_values(prev.values + 0.7)
    single = RoundSubmissions((4,), (m,), prev)
    np.testing.assert_allclose(agsd.preliminary_aggregate(single, quiet, 0)[0].values, m.values)
    many = RoundSubmissions((0, 1, 2), (m, m.copy(), m.copy()), prev)
    np.testing.assert_allclose(agsd.preliminary_aggregate(many, quiet, 0)[0].values, m.values)


def test_submissions_validation():
    prev = pv(np.zeros(SPEC.n_params))
    with pytest.raises(ValueError):
        RoundSubmissions((), (), prev)
    with pytest.raises(ValueError):
        RoundSubmissions((1, 1), (prev, prev), prev)
    with pytest.raises(ValueError):
        RoundSubmissions((1,), (prev, prev), prev)


# ---------------------------------------------------------------- clustering metric


def test_cluster_metric_identical_submissions():
    prev = pv(np.zeros(SPEC.n_params))
    d = np.ones((2, SPEC.n_params))
    # prelim equal to the common submission: both offsets are zero vectors
    for prelim in (prev.with_values(d[0]), prev.with_values(np.full(SPEC.n_params, 2.0))):
        assert agsd.cluster_metric(d, prev, prelim)[0, 1] == pytest.approx(2.0)


def test_cluster_metric_orthogonal():
    prev = pv(np.zeros(SPEC.n_params))
    d = np.zeros((2, SPEC.n_params))
    d[0, 0] = 1.0
    d[1, 1] = 1.0
    m = agsd.cluster_metric(d, prev, prev.copy())
    assert m[0, 1] == 0.0


@given(arrays(float, (6, 6), elements=st.floats(-3, 3)))
def test_cluster_metric_symmetric_and_bounded(d):
    spec = nn.ModelSpec((1, 3))
    prev = nn.zeros(spec)
    m = agsd.cluster_metric(d, prev, prev.with_values(d.mean(axis=0)))
    np.testing.assert_allclose(m, m.T, atol=1e-9)
    assert np.all(m <= 2 + 1e-12) and np.all(m >= -2 - 1e-12)
    np.testing.assert_array_equal(np.diag(m), 2.0)


# ---------------------------------------------------------------- sigma / eta


def one_layer(w, b):
    k = w.shape[1]
    return nn.flatten([(np.asarray(w, float), np.asarray(b, float))], nn.ModelSpec((w.shape[0], k)))


def sigma_oracle(preds, k):
    # population std of each class indicator, averaged over classes
    n = len(preds)
    out = []
    for c in range(k):
        ind = [1.0 if p == c else 0.0 for p in preds]
        mu = sum(ind) / n
        out.append((sum((v - mu) ** 2 for v in ind) / n) ** 0.5)
    return sum(out) / k


def test_sigma_examples():
    ident = one_layer(np.eye(4), np.zeros(4))
    x = np.eye(4)
    assert agsd.compute_sigma(ident, x) == pytest.approx(np.sqrt(3) / 4)
    assert agsd.compute_sigma(ident, np.tile(x[:1], (5, 1))) == 0.0


def test_sigma_matches_oracle(rng):
    model = one_layer(rng.normal(size=(5, 6)), rng.normal(size=6))
    x = rng.uniform(size=(40, 5))
    assert agsd.compute_sigma(model, x) == pytest.approx(sigma_oracle(nn.predict(model, x).tolist(), 6))


def test_eta_example():
    ident = one_layer(np.eye(3), np.zeros(3))
    x = np.log(np.array([[0.7, 0.2, 0.1], [0.9, 0.05, 0.05]]))
    assert agsd.compute_eta(ident, x) == pytest.approx(0.8)


def test_healing_with_zero_epsilon_is_rejected_by_config():
    with pytest.raises(ValueError):
        AgsdConfig(fgsm_epsilon=0.0)


def test_healing_perturbation_zero_epsilon_returns_inputs():
    ds = Dataset(np.random.default_rng(0).uniform(size=(5, 4)), np.arange(5) % 3, 3)
    out = agsd.craft_healing_perturbations(pv(np.zeros(SPEC.n_params)), ds, 0.0)
    np.testing.assert_array_equal(out.inputs, ds.inputs)
    np.testing.assert_array_equal(out.labels, ds.labels)


# ---------------------------------------------------------------- trust index


def test_uniform_statistics_give_zero_gamma():
    gamma, w, _, _ = agsd.trust_index([0.3] * 5, [0.6] * 5)
    assert w == 0.0
    assert np.all(gamma == 0.0)


def test_w_example_is_exact():
    assert agsd.w_of_sigma(np.array([0.5, 0.25, 0.25])) == 3.0


@given(arrays(float, st.integers(1, 12), elements=st.floats(0, 1)), st.floats(0, 1))
def test_gamma_is_monotone_in_sigma_under_uniform_eta(s, eta):
    gamma, *_ = agsd.trust_index(s, np.full(s.size, eta))
    order = np.argsort(s, kind="stable")
    assert np.all(np.diff(gamma[order]) >= -1e-15)


@given(
    st.integers(1, 10).flatmap(
        lambda n: st.tuples(arrays(float, n, elements=st.floats(0, 1)), arrays(float, n, elements=st.floats(0, 1)))
    ),
)
def test_gamma_bounds(se):
    gamma, w, s_soft, e_soft = agsd.trust_index(*se)
    assert np.all(gamma > -1) and np.all(gamma < 1)
    assert w >= 0
    np.testing.assert_allclose([s_soft.sum(), e_soft.sum()], 1.0)


def test_trust_index_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        agsd.trust_index([0.1, 0.2], [0.1])


# ---------------------------------------------------------------- cluster selection


def test_select_cluster_examples():
    assert agsd.select_cluster([0, 1], [0.3, 0.1]) == (0, (1,))
    assert agsd.select_cluster([0, 1, 2], [0.1, 0.5, 0.2])[0] == 1
    # exact tie: the 3-client cluster beats the singleton
    assert agsd.select_cluster([1, 0, 0, 0], [0.2, 0.2, 0.2, 0.2])[0] == 0
    # equal size and mean: lower index
    assert agsd.select_cluster([1, 0], [0.2, 0.2])[0] == 0


def test_select_cluster_skips_empty_labels():
    alpha, rejected = agsd.select_cluster([0, 0, 0], [0.1, 0.2, 0.3], k=2)
    assert alpha == 0 and rejected == (1,)


# ---------------------------------------------------------------- stateful aggregation


def _two_member_round():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(2, SPEC.n_params))
    return subs_from(d, ids=[10, 11]), d


def test_only_positive_trust_is_aggregated():
    subs, d = _two_member_round()
    trust = TrustState({10: -1.0, 11: 0.5})
    cfg = AgsdConfig(noise_scale=0.0)
    model, ids, skipped = agsd.stateful_aggregate(subs, [10, 11], trust, cfg, 0)
    assert ids == (11,) and not skipped
    np.testing.assert_allclose(model.values, subs.prev_global.values + d[1])


def test_all_untrusted_keeps_previous_model():
    subs, _ = _two_member_round()
    model, ids, skipped = agsd.stateful_aggregate(subs, [10, 11], TrustState({10: 0.0, 11: -2.0}), AgsdConfig(), 0)
    assert skipped and ids == ()
    np.testing.assert_array_equal(model.values, subs.prev_global.values)


def test_excluded_member_leaves_output_bit_identical():
    rng = np.random.default_rng(3)
    subs = subs_from(rng.normal(size=(4, SPEC.n_params)), ids=[1, 2, 3, 4])
    trust = TrustState({1: 0.5, 2: -1.0, 3: 0.2, 4: 0.9})
    cfg = AgsdConfig(noise_scale=0.01)
    full, ids, _ = agsd.stateful_aggregate(subs, [1, 2, 3], trust, cfg, 5)
    drop, ids2, _ = agsd.stateful_aggregate(subs.without(2), [1, 3], trust, cfg, 5)
    assert ids == ids2 == (1, 3)
    np.testing.assert_array_equal(full.values, drop.values)


def test_min_norm_aggregation():
    prev = pv(np.zeros(SPEC.n_params))
    a = prev.with_values(np.full(SPEC.n_params, 1.0))
    b = prev.with_values(np.full(SPEC.n_params, 3.0))
    subs = RoundSubmissions((0, 1), (a, b), prev)
    cfg = AgsdConfig(final_aggregation="min_norm")
    model, _, _ = agsd.stateful_aggregate(subs, [0, 1], TrustState({0: 1.0, 1: 1.0}), cfg, 0)
    # both rescaled to the smaller norm, divided by the cluster size
    np.testing.assert_allclose(model.values, 1.0)


# ---------------------------------------------------------------- trust update


def test_trust_update_examples():
    t = TrustState({0: 0.0, 1: 0.0, 2: 0.0})
    out = agsd.update_trust_history(t, [0, 1, 2], [True, False, False], [0.3, 0.3, 0.1])
    assert out.get(0) == pytest.approx(1.0)
    assert out.get(1) == pytest.approx(0.0)
    assert out.get(2) == pytest.approx(-2 / 3)


def test_trust_update_leaves_unsampled_and_input_alone():
    t = TrustState({0: 0.4, 5: 0.7})
    out = agsd.update_trust_history(t, [0], [True], [0.2])
    assert out.get(5) == 0.7 and t.get(0) == 0.4
    assert out.get(0) == pytest.approx(1.4)


def test_trust_update_with_nonpositive_gammas():
    t = TrustState()
    out = agsd.update_trust_history(t, [0, 1], [True, False], [-0.2, -0.1])
    # shifted so the minimum is tiny and positive: ratios are ~0 and 1
    assert out.get(0) == pytest.approx(t.phi_init, abs=1e-6)
    assert out.get(1) == pytest.approx(t.phi_init)


@given(arrays(float, 6, elements=st.floats(-0.9, 0.9)), arrays(bool, 6))
def test_trust_moves_in_the_right_direction(gammas, accepted):
    t = TrustState.register(range(6), 0.0)
    out = agsd.update_trust_history(t, range(6), accepted, gammas)
    for i in range(6):
        change = out.get(i)
        assert (0 < change <= 1 + 1e-12) if accepted[i] else (-1 - 1e-12 <= change <= 0)


# ---------------------------------------------------------------- full round


def test_consensus_round():
    spec = nn.ModelSpec((4, 5, 3))
    prev = nn.init_params(spec, 0)
    common = prev.with_values(prev.values + 0.01)
    subs = RoundSubmissions((0, 1, 2, 3), tuple(common.copy() for _ in range(4)), prev)
    healing = Dataset(np.random.default_rng(0).uniform(size=(8, 4)), np.arange(8) % 3, 3)
    cfg = AgsdConfig(healing_set=healing, noise_scale=0.0)
    trust = TrustState.register(range(4))
    model, report, new_trust = agsd.agsd_round(subs, trust, cfg, 1)
    np.testing.assert_allclose(model.values, common.values)
    assert all(new_trust.get(c) > trust.get(c) for c in range(4))
    assert report.aggregated == (0, 1, 2, 3)


def planted_round():
    # cluster A (ids 0-2) spreads its predictions over classes; cluster B (ids 3-5)
    # predicts class 0 for everything
    k = 4
    spec = nn.ModelSpec((k, k))
    prev = nn.zeros(spec)
    rng = np.random.default_rng(5)
    models = []
    for _ in range(3):
        models.append(one_layer(3 * np.eye(k) + 0.01 * rng.normal(size=(k, k)), np.zeros(k)))
    for _ in range(3):
        models.append(one_layer(0.01 * rng.normal(size=(k, k)), np.array([6.0, 0, 0, 0])))
    healing = Dataset(np.tile(np.eye(k), (3, 1)), np.tile(np.arange(k), 3), k)
    subs = RoundSubmissions(tuple(range(6)), tuple(models), prev)
    return subs, AgsdConfig(healing_set=healing, noise_scale=0.0)


def test_planted_round_selects_spread_cluster():
    subs, cfg = planted_round()
    trust = TrustState.register(range(6))
    model, report, new_trust = agsd.agsd_round(subs, trust, cfg, 0)
    assert set(report.selected_members()) == {0, 1, 2}
    assert report.aggregated == (0, 1, 2)

    # trace the trust index by hand from the reported perturbations
    prelim = report.preliminary
    x_adv = nn.fgsm_perturb(prelim, cfg.healing_set.inputs, cfg.healing_set.labels, cfg.fgsm_epsilon, "agsd")
    sig = [sigma_oracle(nn.predict(m, x_adv).tolist(), 4) for m in subs.models]
    eta = [max(np.mean(nn.forward(m, x_adv), axis=0)) for m in subs.models]
    np.testing.assert_allclose(report.sigma, sig)
    np.testing.assert_allclose(report.eta, eta)
    s_soft = np.exp(sig) / np.sum(np.exp(sig))
    e_soft = np.exp(eta) / np.sum(np.exp(eta))
    w = (max(s_soft) - min(s_soft)) / (np.mean(s_soft) - min(s_soft))
    np.testing.assert_allclose(report.gamma, s_soft - np.exp(-w) * e_soft)
    assert report.gamma[:3].mean() > report.gamma[3:].mean()
    assert all(new_trust.get(c) < trust.get(c) for c in (3, 4, 5))


def test_round_is_deterministic():
    subs, cfg = planted_round()
    cfg = AgsdConfig(healing_set=cfg.healing_set, noise_scale=1e-3)
    a = agsd.agsd_round(subs, TrustState(), cfg, 7)
    b = agsd.agsd_round(subs, TrustState(), cfg, 7)
    np.testing.assert_array_equal(a[0].values, b[0].values)
    np.testing.assert_array_equal(a[1].gamma, b[1].gamma)
    np.testing.assert_array_equal(a[1].assignment, b[1].assignment)
    assert a[2].phi == b[2].phi


def test_round_needs_healing_set():
    subs, _ = planted_round()
    with pytest.raises(ValueError, match="healing"):
        agsd.agsd_round(subs, TrustState(), AgsdConfig(), 0)


@pytest.mark.parametrize(
    "kw",
    [dict(n_clusters=1), dict(noise_scale=-1), dict(attack_target="x"), dict(eta_weight_sign=0.5), dict(final_aggregation="x")],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AgsdConfig(**kw)
