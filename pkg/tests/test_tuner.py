import numpy as np
import pytest

from rollout import designgen as dg
from rollout.errors import RolloutError
from rollout.estimators import LrmeConfig, estimate
from rollout.panel import PanelMatrix, SyntheticEffect, effect_matrix, split_blocks
from rollout.tuner import (
    SaConfig,
    block_errors,
    grid_search_mu,
    kmeans_stratify,
    minimax_error,
    sa_search,
    select_estimator,
)


def stratifiable_instance(m=4, seed=0):
    """Noiseless rank-one blocks with +-1 loadings and a start design whose
    early adopters all share the same loading sign."""
    rng = np.random.default_rng(seed)
    N, T = 12, 3
    u = np.repeat([1.0, -1.0], N // 2)
    blocks = [
        rng.normal(size=(N, 1)) + rng.normal(size=(1, T)) + np.outer(u, rng.normal(size=T)) for _ in range(m)
    ]
    counts = dg.round_counts(dg.optimal_linear_path(T), N)
    start = dg.DesignMatrix(dg.counts_to_entries(counts, N))
    return start, blocks, u


def test_block_errors_zero_on_twoway(rng):
    d = dg.optimal_design(8, 4, seed=0)
    blocks = [rng.normal(size=(8, 1)) + rng.normal(size=(1, 4)) for _ in range(3)]
    for method in ("ols", "gls", "lrme"):
        assert minimax_error(d, blocks, SyntheticEffect.direct(-0.3), method) < 1e-10


def test_single_block_error(rng):
    d = dg.optimal_design(8, 4, seed=0)
    Y = rng.normal(size=(8, 4))
    eff = SyntheticEffect.direct(0.2)
    shifted = Y + 0.2 * (d.as_float() > 0)
    expected = abs(estimate(shifted, d).tau - 0.2)
    assert minimax_error(d, [Y], eff) == pytest.approx(expected, abs=1e-12)


def test_fast_ols_path_matches_generic(rng):
    d = dg.optimal_design(9, 6, seed=1)
    blocks = [rng.normal(size=(9, 6)) for _ in range(4)]
    eff = SyntheticEffect.carryover([0.1, -0.2])
    fast = block_errors(d, blocks, eff)
    shift = effect_matrix(d.entries, eff)
    slow = np.array([np.abs(estimate(Y + shift, d, "ols", ell=1).taus - [0.1, -0.2]) for Y in blocks])
    np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_max_semantics(monkeypatch):
    import rollout.tuner as tuner

    monkeypatch.setattr(tuner, "block_errors", lambda *a, **k: np.array([[0.1], [0.3], [0.2]]))
    assert tuner.minimax_error(None, None, SyntheticEffect.direct(0)) == 0.3


def test_sa_reaches_zero_on_stratifiable_instance():
    start, blocks, u = stratifiable_instance()
    res = sa_search(start, blocks, SaConfig(seed=0))
    assert res.start_error > 1e-3
    assert res.max_error <= 1e-8
    np.testing.assert_array_equal(res.design.counts, start.counts)
    # zero error needs the loading imbalance among treated units to be constant over time
    imbalance = u @ res.design.entries
    assert np.all(imbalance == imbalance[0])


def test_sa_never_worse_and_preserves_columns():
    start, blocks, _ = stratifiable_instance(seed=3)
    for seed in range(5):
        res = sa_search(start, blocks, SaConfig(seed=seed, steps_max=60))
        assert res.max_error <= res.start_error
        np.testing.assert_array_equal(res.design.entries.sum(axis=0), start.entries.sum(axis=0))


def test_sa_fixed_point_on_zero_blocks():
    d = dg.optimal_design(6, 3, seed=0)
    blocks = [np.zeros((6, 3))] * 2
    res = sa_search(d, blocks, SaConfig(seed=1, steps_max=50))
    np.testing.assert_array_equal(res.design.entries, d.entries)
    assert res.max_error == 0.0


def test_sa_deterministic():
    start, blocks, _ = stratifiable_instance()
    a = sa_search(start, blocks, SaConfig(seed=9, steps_max=100))
    b = sa_search(start, blocks, SaConfig(seed=9, steps_max=100))
    assert a.trace == b.trace
    np.testing.assert_array_equal(a.design.entries, b.design.entries)


def test_sa_config_validation():
    with pytest.raises(RolloutError):
        SaConfig(t_init=1e-4)
    with pytest.raises(RolloutError):
        SaConfig(upsilon=1.0)


def _rank_one_history(rng, N=20, T=30):
    u = np.where(np.arange(N) % 3 == 0, 2.0, -1.0)
    Y = rng.normal(size=(N, 1)) + rng.normal(size=(1, T)) + np.outer(u, rng.normal(size=T))
    return PanelMatrix(Y), u


def test_kmeans_recovers_groups(rng):
    hist, u = _rank_one_history(rng)
    strat = kmeans_stratify(hist, 2, seed=0)
    labels = np.asarray(strat.labels)
    assert len(set(labels[u > 0])) == 1 and len(set(labels[u < 0])) == 1
    assert labels[u > 0][0] != labels[u < 0][0]


def test_kmeans_single_cluster_and_shift(rng):
    hist, _ = _rank_one_history(rng)
    assert set(kmeans_stratify(hist, 1).labels) == {0}
    a = kmeans_stratify(hist, 2, seed=4).labels
    b = kmeans_stratify(hist.with_values(hist.values + 7.5), 2, seed=4).labels
    np.testing.assert_array_equal(a, b)


def test_kmeans_too_many_clusters(rng):
    with pytest.raises(RolloutError):
        kmeans_stratify(PanelMatrix(rng.normal(size=(4, 5))), 5)


def test_grid_search_prefers_shrinkage_without_low_rank(rng):
    d = dg.optimal_design(10, 5, seed=0)
    hist = PanelMatrix(rng.normal(size=(10, 1)) + rng.normal(size=(1, 40)) + 0.5 * rng.normal(size=(10, 40)))
    blocks = split_blocks(hist, 5, 6, 6)
    eff = SyntheticEffect.direct(-0.1)
    mu, scores = grid_search_mu(blocks, d, eff, (1e-3, 1e2), 5, return_scores=True)
    err = dict(scores)
    assert err[mu] <= err[1e-3] + 1e-15
    assert err[mu] <= err[1e2]


def test_grid_single_point_two_candidates(rng):
    d = dg.optimal_design(6, 4, seed=0)
    blocks = [rng.normal(size=(6, 4))]
    _, scores = grid_search_mu(blocks, d, SyntheticEffect.direct(0), (0.01, 10), 1, return_scores=True)
    assert sorted(m for m, _ in scores) == [0.01, 10.0]


def test_select_estimator_rules(rng, monkeypatch):
    import rollout.tuner as tuner

    d = dg.optimal_design(6, 4, seed=0)
    blocks = [rng.normal(size=(6, 4))]
    eff = SyntheticEffect.direct(0.1)
    assert select_estimator(blocks, d, eff, ["gls"]) == "gls"
    monkeypatch.setattr(tuner, "minimax_error", lambda *a, **k: 0.5)
    assert tuner.select_estimator(blocks, d, eff, ["lrme", "gls", "ols"]) == "ols"
    assert tuner.select_estimator(blocks, d, eff, ["lrme", "gls"]) == "gls"


@pytest.mark.slow
def test_select_estimator_factor_blocks():
    from rollout.harness import generate_synthetic_panel

    picks = []
    for trial in range(50):
        hist = generate_synthetic_panel(20, 40, "factor", 1, 0.3, seed=trial)
        blocks = split_blocks(hist, 6, 6, 6)
        d = dg.optimal_design(20, 6, seed=trial)
        picks.append(select_estimator(blocks, d, SyntheticEffect.direct(-0.01), lrme_cfg=LrmeConfig(mu=0.1)))
    assert picks.count("ols") <= 5
