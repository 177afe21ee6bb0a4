import math

import numpy as np
import pytest

from lrvi.constraints import ConstrainedSolver
from lrvi.fc_analytic import (
    FCModel,
    canonical_regime,
    fc_bethe_message,
    fc_chi,
    fc_continue,
    fc_exact_pair,
    fc_exact_stats,
    fc_solve_constrained,
    fc_sweep,
)
from lrvi.graph_model import scale_temperature
from lrvi.harness import gen_fully_connected
from lrvi.inference import InferenceOptions, RegionProblem, clbp
from lrvi.oracle import exact_stats
from lrvi.response import ResponseOptions, clsp

from test_oracle import FC10_P_UP

SPIN = np.array([-1.0, 1.0])


@pytest.mark.parametrize("h, T", [(1.0, 1.0), (0.3, 4.0), (-0.5, 0.7), (0.0, 12.0)])
def test_exact_pair_against_enumeration(h, T):
    N = 8
    st = exact_stats(scale_temperature(gen_fully_connected(N, h), T), pairs="all")
    assert np.allclose(fc_exact_pair(FCModel(N, h, T)), st.pair_marginals[(0, 1)], atol=1e-13)


def test_exact_magnetization_frozen_value():
    M, _ = fc_exact_stats(FCModel(10, 1.0, 1.0))
    assert (1 + M) / 2 == pytest.approx(FC10_P_UP, abs=1e-14)


def test_message_fixed_point():
    m = FCModel(10, 1.0, 2.0)
    x = fc_bethe_message(m)
    rhs = 1.0 + 8 * 2.0 * math.atanh(math.tanh(0.5) * math.tanh(x / 2.0))
    assert x == pytest.approx(rhs, abs=1e-12)
    assert fc_bethe_message(FCModel(2, 0.7, 1.0)) == 0.7


def _generic(N, h, T, regime):
    S = ConstrainedSolver(gen_fully_connected(N, h), regime, T)
    sol = S.solve()
    assert sol.converged
    M = sol.marginals[0][1] - sol.marginals[0][0]
    l0 = [v for e, v in zip(S.spec.entries, sol.lam.values) if e.i == e.j]
    l1 = [v for e, v in zip(S.spec.entries, sol.lam.values) if e.i != e.j]
    return sol, M, np.array(l0), np.array(l1)


@pytest.mark.parametrize("T", [0.8, 2.0, 20.0])
def test_unconstrained_matches_generic(T):
    N, h = 10, 1.0
    ref = fc_solve_constrained(FCModel(N, h, T), "none")
    p = RegionProblem(scale_temperature(gen_fully_connected(N, h), T))
    st = clbp(p, opts=InferenceOptions(tol_msg=1e-14))
    _, chi = clsp(p, st, opts=ResponseOptions(tol=1e-14))
    S = chi.spin()
    chi_ii, chi_ij = fc_chi(ref.M, ref.C, 0.0, ref.model)
    assert np.allclose(np.diag(S), chi_ii, atol=1e-8)
    assert np.allclose(S[0, 1:], chi_ij, atol=1e-8)
    assert ref.chi_ii == pytest.approx(chi_ii, abs=1e-10)


@pytest.mark.parametrize("regime, T", [("diag", 2.0), ("diag", 20.0), ("onoff", 2.0),
                                       ("offdiag", 20.0), ("onoff", 20.0)])
def test_constrained_matches_generic(regime, T):
    N, h = 10, 1.0
    ref = fc_solve_constrained(FCModel(N, h, T), regime)
    assert ref is not None and ref.valid
    sol, M, l0, l1 = _generic(N, h, T, regime)
    assert M == pytest.approx(ref.M, abs=1e-7)
    if l0.size and ref.identifiable("lambda0"):
        assert np.allclose(l0, ref.lambda0, atol=1e-6)
    if l1.size and ref.identifiable("lambda1"):
        # x / sqrt(2) statistics double the off-diagonal multiplier
        assert np.allclose(l1, 2 * ref.lambda1, atol=1e-6)


def test_closures_hold_at_solution():
    m = FCModel(10, 1.0, 3.0)
    d = fc_solve_constrained(m, "diag")
    chi_ii, _ = fc_chi(d.M, d.C, d.lambda0, m)
    assert chi_ii == pytest.approx(1 - d.M ** 2, abs=1e-10)
    o = fc_solve_constrained(m, "onoff")
    chi_ii, chi_ij = fc_chi(o.M, o.C, o.lambda0, m)
    assert chi_ii == pytest.approx(1 - o.M ** 2, abs=1e-10)
    assert chi_ij == pytest.approx(o.C, abs=1e-10)


def test_pair_table_roundtrip():
    sol = fc_solve_constrained(FCModel(10, 1.0, 5.0), "none")
    P = sol.pair_table()
    assert P.sum() == pytest.approx(1.0, abs=1e-15)
    M = P.sum(1) @ SPIN
    assert M == pytest.approx(sol.M, abs=1e-14)
    assert SPIN @ P @ SPIN - M * M == pytest.approx(sol.C, abs=1e-14)


def test_mean_field_self_consistency():
    m = FCModel(10, 1.0, 4.0)
    sol = fc_solve_constrained(m, "mf")
    assert sol.M == pytest.approx(math.tanh((1.0 + 9 * sol.M) / 4.0), abs=1e-12)
    chi_ii, chi_ij = fc_chi(sol.M, 0.0, 0.0, m, approximation="mf")
    s = 1 - sol.M ** 2
    # mean-field response: (1/s - J/T)^-1 structure on the complete graph
    A = np.full((10, 10), -1 / 4.0)
    np.fill_diagonal(A, 1 / s)
    inv = np.linalg.inv(A)
    assert chi_ii == pytest.approx(inv[0, 0], rel=1e-12)
    assert chi_ij == pytest.approx(inv[0, 1], rel=1e-12)


def test_mean_field_diag_closure():
    m = FCModel(10, 1.0, 4.0)
    sol = fc_solve_constrained(m, "mf-diag")
    chi_ii, _ = fc_chi(sol.M, 0.0, sol.lambda0, m, approximation="mf")
    assert chi_ii == pytest.approx(1 - sol.M ** 2, abs=1e-10)


def test_regime_names():
    assert canonical_regime("bethe-onoff") == "onoff"
    assert canonical_regime("MF-none") == "mf"
    with pytest.raises(ValueError):
        canonical_regime("bethe-sideways")
    with pytest.raises(ValueError):
        FCModel(1, 0.0, 1.0)
    with pytest.raises(ValueError):
        FCModel(10, 0.0, 0.0)


def test_sweep_is_ascending_and_branches_agree_where_unique():
    Ts = np.geomspace(0.5, 20, 8)
    rows = fc_sweep(10, 1.0, "diag", Ts)
    assert [r["T"] for r in rows] == sorted(r["T"] for r in rows)
    hot = rows[-1]
    assert hot["high"] is not None and hot["low"] is not None
    assert hot["high"].M == pytest.approx(hot["low"].M, abs=1e-9)


def test_continuation_ends_inside_onoff_gap():
    grid = np.geomspace(20.0, 6.0, 12)
    br = fc_continue(10, 1.0, "onoff", grid, "high")
    assert br.solutions[0] is not None
    assert br.solutions[-1] is None


def test_saturated_multiplier_not_identifiable():
    sol = fc_solve_constrained(FCModel(10, 1.0, 0.1), "diag")
    assert sol is not None
    assert not sol.identifiable("lambda0")
    assert fc_solve_constrained(FCModel(10, 1.0, 20.0), "diag").identifiable("lambda0")
