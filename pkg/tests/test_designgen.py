from fractions import Fraction

import numpy as np
import pytest

import oracles
from rollout import designgen as dg
from rollout.errors import DesignError
from rollout.objective import carryover_theta, kkt_check, quadratic_objective


def test_linear_path_small_cases():
    np.testing.assert_allclose(dg.optimal_linear_path(2).omegas, [-0.5, 0.5])
    np.testing.assert_allclose(dg.optimal_linear_path(1).omegas, [0.0])
    np.testing.assert_allclose(dg.optimal_linear_path(7).omegas, np.arange(-6, 7, 2) / 7)


def test_treated_share():
    np.testing.assert_allclose(dg.optimal_linear_path(2).treated_share(), [0.25, 0.75])


@pytest.mark.parametrize(
    "N,T,expected",
    [(8, 2, [2, 6]), (5, 5, [0, 1, 3, 4, 5]), (3, 3, [0, 2, 3]), (4, 2, [1, 3])],
)
def test_round_counts_frozen(N, T, expected):
    assert list(dg.round_counts(dg.optimal_linear_path(T), N)) == expected


@pytest.mark.parametrize("N", range(1, 16))
@pytest.mark.parametrize("T", range(1, 9))
def test_round_counts_matches_exact_rule(N, T):
    assert list(dg.round_counts(dg.optimal_linear_path(T), N)) == oracles.round_half_rule(N, T)


def test_round_all_control():
    assert list(dg.round_counts(-np.ones(4), 7)) == [0, 0, 0, 0]


def test_realize_column_sums_and_determinism():
    d = dg.realize_design([2, 6], 8, seed=3)
    np.testing.assert_array_equal(d.entries.sum(axis=0), [-4, 4])
    np.testing.assert_array_equal(d.entries, dg.realize_design([2, 6], 8, seed=3).entries)
    assert np.all(dg.realize_design([0, 0, 0], 5, seed=1).entries == -1)


def test_design_rejects_switch_back():
    with pytest.raises(DesignError):
        dg.DesignMatrix(np.array([[1, -1]]))


def test_ff_identification_perturbation():
    d = dg.benchmark_design("ff", 8, 2, seed=0)
    np.testing.assert_array_equal(d.entries.sum(axis=0), [-2, 2])


def test_ba_identification_perturbation():
    d = dg.benchmark_design("ba", 8, 2, seed=0)
    np.testing.assert_array_equal(d.entries.sum(axis=0), [-6, 6])


def test_ffba_path():
    d = dg.benchmark_design("ffba", 8, 4, seed=0)
    np.testing.assert_allclose(d.omegas, [-1, -1, 0, 0])


def test_stratified_equal_strata():
    strat = dg.Stratification([0, 0, 0, 0, 1, 1, 1, 1])
    d = dg.stratified_design(dg.optimal_linear_path(2), strat, seed=0)
    for g in strat.groups:
        assert list((d.entries[g] > 0).sum(axis=0)) == [1, 3]


def test_stratified_unequal_strata():
    strat = dg.Stratification([0, 0, 0, 1, 1, 1, 1, 1])
    d = dg.stratified_design(dg.optimal_linear_path(2), strat, seed=0)
    counts = [list((d.entries[g] > 0).sum(axis=0)) for g in strat.groups]
    assert counts == [[1, 2], [1, 4]]
    # no other per-stratum count pair has a smaller relaxed objective
    for g, c in zip(strat.groups, counts):
        n = len(g)
        f = lambda a, b: oracles.relaxed_f([2 * a / n - 1, 2 * b / n - 1])  # noqa: E731
        best = min(f(a, b) for a in range(n + 1) for b in range(a, n + 1))
        assert f(*c) <= best + 1e-12


def test_single_stratum_equals_unstratified():
    strat = dg.Stratification([0] * 9)
    d = dg.stratified_design(dg.optimal_linear_path(4), strat, seed=0)
    np.testing.assert_array_equal(d.counts, dg.round_counts(dg.optimal_linear_path(4), 9))


def test_carryover_system_l2():
    A, b = dg.build_carryover_system(dg.CarryoverDesignSpec(2, 10))
    np.testing.assert_allclose(A, [[2 - 1 / 8]])
    np.testing.assert_allclose(b, [-2 + 3 / 8])


def test_carryover_path_l1_T7():
    w = dg.optimal_carryover_path(dg.CarryoverDesignSpec(1, 7)).omegas
    np.testing.assert_allclose(w, [-1, -2 / 3, -1 / 3, 0, 1 / 3, 2 / 3, 1], atol=1e-14)


def test_carryover_path_l2_T10():
    w = dg.optimal_carryover_path(dg.CarryoverDesignSpec(2, 10)).omegas
    expected = [-1, -13 / 15] + [-1 + (2 * t - 3) / 8 for t in range(3, 9)]
    expected += [13 / 15, 1]
    np.testing.assert_allclose(w, expected, atol=1e-14)


def test_carryover_path_l3_T10():
    w = dg.optimal_carryover_path(dg.CarryoverDesignSpec(3, 10)).omegas
    assert w[1] == pytest.approx(float(-1 + Fraction(6, 239)), abs=1e-14)


def test_carryover_l0_is_linear():
    np.testing.assert_array_equal(
        dg.optimal_carryover_path(dg.CarryoverDesignSpec(0, 6)).omegas, dg.optimal_linear_path(6).omegas
    )


@pytest.mark.parametrize("ell", range(1, 7))
def test_carryover_path_stationary(ell):
    T = 2 * ell + 8
    w = dg.optimal_carryover_path(dg.CarryoverDesignSpec(ell, T))
    np.testing.assert_allclose(w.omegas + w.omegas[::-1], 0, atol=1e-14)
    rep = kkt_check(w, ell)
    assert rep.kkt_residual < 1e-9
    assert rep.min_multiplier >= -1e-9


def test_carryover_short_horizon():
    with pytest.raises(DesignError):
        dg.optimal_carryover_path(dg.CarryoverDesignSpec(3, 6))
    w = dg.optimal_carryover_path(dg.CarryoverDesignSpec(3, 7))
    assert dg.UNVERIFIED_REGIME in w.flags


def test_d_optimal_ell0_matches_linear():
    w = dg.d_optimal_path(dg.CarryoverDesignSpec(0, 6))
    np.testing.assert_allclose(w.omegas, dg.optimal_linear_path(6).omegas, atol=1e-6)


def test_d_optimal_antisymmetric_and_not_worse():
    spec = dg.CarryoverDesignSpec(2, 9)
    w = dg.d_optimal_path(spec)
    np.testing.assert_allclose(w.omegas + w.omegas[::-1], 0, atol=1e-12)
    start = dg.optimal_carryover_path(spec)
    assert np.linalg.det(carryover_theta(w, 2, 1)) >= np.linalg.det(carryover_theta(start, 2, 1)) - 1e-12


def test_d_optimal_fixed_point():
    w = dg.d_optimal_path(dg.CarryoverDesignSpec(0, 5))
    again = dg.d_optimal_path(dg.CarryoverDesignSpec(0, 5))
    np.testing.assert_array_equal(w.omegas, again.omegas)
    assert quadratic_objective(w) == pytest.approx(quadratic_objective(dg.optimal_linear_path(5)), abs=1e-10)


def test_reversible_twoway_balanced():
    d = dg.reversible_design("twoway", 4, 2, seed=1)
    assert np.all(d.entries.sum(axis=0) == 0)
    assert np.all(d.entries.sum(axis=1) == 0)
    assert d.regime == "reversible"


def test_reversible_time_only():
    d = dg.reversible_design("time", 2, 3, seed=1)
    assert np.all(d.entries.sum(axis=0) == 0)


def test_reversible_stratified():
    strat = dg.Stratification([0, 1, 0, 1, 0, 1, 0, 1])
    d = dg.reversible_design("stratified", 8, 4, strat, seed=2)
    for g in strat.groups:
        assert np.all(d.entries[g].sum(axis=0) == 0)
    assert np.all(d.entries.sum(axis=1) == 0)


def test_reversible_odd_flagged():
    d = dg.reversible_design("twoway", 3, 3, seed=0)
    assert dg.RELAXED_BALANCE in d.flags


@pytest.mark.parametrize("fmt", ["matrix", "adoption"])
def test_design_io_roundtrip(tmp_path, fmt):
    d = dg.optimal_design(7, 4, seed=5)
    dg.save_design(d, tmp_path / "z.csv", fmt)
    e = dg.load_design(tmp_path / "z.csv", T=4)
    np.testing.assert_array_equal(d.entries, e.entries)


def test_adoption_never(tmp_path):
    (tmp_path / "z.csv").write_text("unit,adopt_period\na,2\nb,never\n")
    d = dg.load_design(tmp_path / "z.csv", T=3)
    np.testing.assert_array_equal(d.entries, [[-1, 1, 1], [-1, -1, -1]])


def test_load_stratification(tmp_path):
    (tmp_path / "s.csv").write_text("unit,stratum\na,3\nb,1\nc,3\n")
    s = dg.load_stratification(tmp_path / "s.csv")
    assert s.N == 3
    assert sorted(map(len, s.groups)) == [1, 2]
