import itertools
import math

import numpy as np
import pytest

from lrvi.graph_model import FactorGraph, FactorTable, IsingModel, scale_temperature
from lrvi.harness import gen_fully_connected
from lrvi.inference import RegionProblem, clbp, single_marginals
from lrvi.oracle import (
    PerturbationSpec,
    StateSpaceTooLarge,
    exact_errors,
    exact_marginals,
    exact_response_fd,
    exact_stats,
    log_partition,
)
from lrvi.response import clsp, marginal_covariance

from conftest import ising_cycle, random_factor_graph

# (1 + M) / 2 for N = 10, h = 1, T = 1, from a 50-digit binomial sum
FC10_P_UP = 0.99999999587768867334303431823206467
# Bethe minus exact P(x = +1) on the J = 1, h = 0.3 four-cycle; Bethe from the
# ring message equation, exact from the 2x2 transfer matrix (both 40 digits)
RING4_DELTA0 = 0.06073380906512377260219588838114336


def brute(fg):
    """Independent dense enumeration with itertools."""
    states = list(itertools.product(*[range(c) for c in fg.cards]))
    w = np.array([math.prod(f.table[np.ravel_multi_index(tuple(s[m] for m in f.members),
                                                         f.cards, order="F")]
                            for f in fg.factors) for s in states])
    p = w / w.sum()
    return states, p, math.log(w.sum())


def test_single_spin_log_z():
    fg = IsingModel(1, [], [], [1.0]).to_factor_graph()
    assert exact_stats(fg).log_Z == pytest.approx(math.log(2 * math.cosh(1.0)), abs=1e-14)


def test_two_spin_covariance_is_tanh():
    fg = IsingModel(2, [(0, 1)], [1.0], [0.0, 0.0]).to_factor_graph()
    st = exact_stats(fg)
    assert st.spin_covariance()[0, 1] == pytest.approx(math.tanh(1.0), abs=1e-14)


def test_fully_connected_ten_marginal():
    st = exact_stats(gen_fully_connected(10, 1.0))
    for m in st.single_marginals:
        assert m[1] == pytest.approx(FC10_P_UP, abs=1e-12)


def test_against_itertools(rng):
    for _ in range(5):
        fg = random_factor_graph(5, rng, extra_edges=2)
        states, p, logz = brute(fg)
        st = exact_stats(fg, pairs="all")
        assert st.log_Z == pytest.approx(logz, abs=1e-12)
        for i in range(fg.num_vars):
            ref = np.zeros(fg.cards[i])
            for s, w in zip(states, p):
                ref[s[i]] += w
            assert np.allclose(st.single_marginals[i], ref, atol=1e-13)
        best = states[int(np.argmax(p))]
        assert p[states.index(st.map_state)] >= p.max() - 1e-15
        assert st.map_state == best


def test_stats_invariants(rng):
    fg = random_factor_graph(6, rng, extra_edges=3)
    st = exact_stats(fg)
    for m in st.single_marginals:
        assert np.all(m >= 0) and abs(m.sum() - 1) < 1e-12
    V = st.covariance
    assert np.allclose(V, V.T, atol=1e-15)
    off = np.concatenate([[0], np.cumsum(fg.cards)])
    for i in range(fg.num_vars):
        assert np.max(np.abs(V[off[i]:off[i + 1]].sum(axis=0))) < 1e-12


def test_cap():
    fg = gen_fully_connected(12, 0.0)
    with pytest.raises(StateSpaceTooLarge):
        exact_stats(fg, cap=2**10)


def test_fd_response_matches_covariance(rng):
    fg = random_factor_graph(5, rng, extra_edges=2)
    st = exact_stats(fg)
    off = np.concatenate([[0], np.cumsum(fg.cards)])
    for i in range(fg.num_vars):
        for y in range(fg.cards[i]):
            row = exact_response_fd(fg, PerturbationSpec((i, y)), eps=1e-4)
            assert np.max(np.abs(row - st.covariance[off[i] + y])) < 1e-6


def test_fd_error_is_second_order(rng):
    fg = random_factor_graph(4, rng, extra_edges=1, strength=1.5)
    V = exact_stats(fg).covariance
    spec = PerturbationSpec((0, 0))
    e1 = np.max(np.abs(exact_response_fd(fg, spec, 2e-3) - V[0]))
    e2 = np.max(np.abs(exact_response_fd(fg, spec, 1e-3) - V[0]))
    assert 3.0 < e1 / e2 < 5.0


def test_uniform_shift_has_no_response():
    fg = IsingModel(3, [(0, 1), (1, 2)], [0.7, -0.4], [0.2, 0.0, -0.1]).to_factor_graph()
    total = sum(exact_response_fd(fg, PerturbationSpec((1, y)), 1e-4) for y in range(2))
    assert np.max(np.abs(total)) < 1e-10


def test_two_spin_fd_closed_form():
    fg = IsingModel(2, [(0, 1)], [1.0], [0.0, 0.0]).to_factor_graph()
    row = exact_response_fd(fg, PerturbationSpec((0, 1)), 1e-4)
    # spin covariance tanh(1) maps to delta-basis entry tanh(1) / 4
    assert row[3] == pytest.approx(math.tanh(1.0) / 4, abs=1e-6)


def test_perturbation_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec((0, 0), math.nan)
    fg = IsingModel(1, [], [], [0.0]).to_factor_graph()
    with pytest.raises(ValueError):
        exact_response_fd(fg, PerturbationSpec((0, 2)))
    with pytest.raises(ValueError):
        exact_response_fd(fg, PerturbationSpec((0, 0)), eps=0.0)


def test_log_z_invariant_under_constant_redistribution(rng):
    fg = random_factor_graph(5, rng, extra_edges=1)
    f0, f1 = fg.factors[0], fg.factors[1]
    moved = (FactorTable(f0.members, f0.cards, f0.table * 7.5),
             FactorTable(f1.members, f1.cards, f1.table / 7.5)) + fg.factors[2:]
    assert log_partition(FactorGraph(fg.cards, moved)) == pytest.approx(log_partition(fg), abs=1e-12)


def test_errors_identity_and_uniform_beliefs():
    fg = IsingModel(1, [], [], [1.0]).to_factor_graph()
    st = exact_stats(fg)
    d0, d1, d2 = exact_errors(st.single_marginals, st.covariance, st.covariance, st)
    assert not d0.any() and not d1.any() and not d2.any()
    d0, _, _ = exact_errors([np.array([0.5, 0.5])], st.covariance, st.covariance, st)
    sigma = 1 / (1 + math.exp(-2.0))
    assert np.allclose(d0, [0.5 - (1 - sigma), 0.5 - sigma], atol=1e-15)
    with pytest.raises(ValueError):
        exact_errors([np.array([1.0])], st.covariance, st.covariance, st)


def test_errors_on_four_cycle_bethe():
    fg = ising_cycle(4, 1.0, 0.3).to_factor_graph()
    p = RegionProblem(fg)
    state = clbp(p)
    _, chi = clsp(p, state)
    C = marginal_covariance(p, state).values
    st = exact_stats(fg)
    d0, d1, d2 = exact_errors(single_marginals(p, state), C, chi.values, st)
    assert d0[1] == pytest.approx(RING4_DELTA0, abs=1e-9)
    assert np.nanmax(np.abs(d1)) > 1e-3 and np.nanmax(np.abs(d2)) > 1e-3


def test_marginals_only_path(rng):
    fg = random_factor_graph(5, rng, extra_edges=1)
    assert np.allclose(exact_marginals(fg), exact_stats(fg).marginal_vector, atol=1e-15)


def test_temperature_consistent_with_scaled_ising():
    m = IsingModel(3, [(0, 1), (1, 2)], [1.0, -0.5], [0.3, 0.0, 0.2])
    a = exact_stats(scale_temperature(m.to_factor_graph(), 2.5)).marginal_vector
    b = exact_stats(m.scaled(2.5).to_factor_graph()).marginal_vector
    assert np.allclose(a, b, atol=1e-14)


def test_dense_and_streamed_enumeration_agree(rng):
    from lrvi.oracle import _dense, _stream

    for _ in range(5):
        fg = random_factor_graph(7, rng, extra_edges=4)
        a, b = _dense(fg, True), _stream(fg, True)
        assert a[0] == pytest.approx(b[0], abs=1e-12)
        assert np.allclose(a[1], b[1], atol=1e-14) and np.allclose(a[2], b[2], atol=1e-14)
        assert a[3] == b[3]
