import math

import numpy as np
import pytest
from scipy.optimize import brentq

from lrvi.constraints import ConstrainedSolver
from lrvi.fc_analytic import FCModel, fc_solve_constrained
from lrvi.graph_model import IsingModel, scale_temperature
from lrvi.harness import gen_fully_connected, gen_wainwright_jordan, grid_edges, rng_for
from lrvi.inference import (
    ConvexConcaveSplit,
    InferenceOptions,
    NumericalFault,
    RegionProblem,
    _edge_belief,
    clbp,
    clbp_ising,
    consistency_residual,
    double_loop,
    free_energy,
    initial_state,
    single_marginals,
    solve_region_belief,
)
from lrvi.oracle import exact_stats

from conftest import ising_chain, ising_cycle, random_factor_graph


def spin_lbp(model: IsingModel, tol=1e-14, max_iter=20000):
    """Textbook cavity-field belief propagation for spins."""
    u = {}
    for i, j in model.edges:
        u[(i, j)] = 0.0
        u[(j, i)] = 0.0
    J = {}
    for (i, j), c in zip(model.edges, model.J):
        J[(i, j)] = J[(j, i)] = c
    nbr = {i: [] for i in range(model.n)}
    for i, j in model.edges:
        nbr[i].append(j)
        nbr[j].append(i)
    for _ in range(max_iter):
        worst = 0.0
        for (i, j) in list(u):
            cav = model.h[i] + sum(u[(k, i)] for k in nbr[i] if k != j)
            new = math.atanh(math.tanh(J[(i, j)]) * math.tanh(cav))
            worst = max(worst, abs(new - u[(i, j)]))
            u[(i, j)] = new
        if worst < tol:
            break
    return np.array([math.tanh(model.h[i] + sum(u[(k, i)] for k in nbr[i]))
                     for i in range(model.n)])


def mags(marginals):
    return np.array([m[1] - m[0] for m in marginals])


def test_tree_exact(rng):
    for _ in range(5):
        fg = random_factor_graph(8, rng, tree=True)
        p = RegionProblem(fg)
        st = clbp(p)
        assert st.converged
        q = np.concatenate(single_marginals(p, st))
        assert np.max(np.abs(q - exact_stats(fg).marginal_vector)) < 1e-8
        assert consistency_residual(p, st) <= 1e-8


def test_independent_spins_give_logistic_marginals():
    h = [0.3, -0.2, 0.9, 0.0]
    fg = ising_cycle(4, 0.0, h).to_factor_graph()
    p = RegionProblem(fg)
    st = clbp(p)
    for m, hi in zip(single_marginals(p, st), h):
        assert m[1] == pytest.approx(1 / (1 + math.exp(-2 * hi)), abs=1e-12)


def test_wj_grid_matches_textbook_bp():
    fg = gen_wainwright_jordan(4, 11)
    rng = rng_for(11)
    edges = grid_edges(4)
    h = rng.uniform(-0.25, 0.25, 16)
    J = rng.uniform(-1.0, 1.0, len(edges))
    model = IsingModel(16, edges, J, h).scaled(3.0)
    p = RegionProblem(scale_temperature(fg, 3.0))
    st = clbp(p)
    assert st.converged
    assert np.max(np.abs(mags(single_marginals(p, st)) - spin_lbp(model))) < 1e-7


def test_consistency_at_convergence(rng):
    fg = random_factor_graph(7, rng, extra_edges=3, strength=0.5)
    p = RegionProblem(fg)
    st = clbp(p)
    assert st.converged
    assert consistency_residual(p, st) <= 10 * InferenceOptions().tol_msg
    for q in np.split(st.q_out, p.out_off[1:-1]):
        assert abs(q.sum() - 1) < 1e-12 and np.all(q >= 0)


def test_max_iter_is_reported_not_raised():
    fg = ising_cycle(5, [1.5, -0.7, 1.1, 0.9, -1.3], [0.3, -0.1, 0.2, 0.0, 0.4]).to_factor_graph()
    st = clbp(RegionProblem(fg), opts=InferenceOptions(max_iter=3))
    assert not st.converged and st.iterations == 3


def test_nan_aborts_with_region():
    p = RegionProblem(ising_chain(3).to_factor_graph())
    p.base[0] = np.nan
    with pytest.raises(NumericalFault, match="outer region"):
        clbp(p)


def test_region_belief_without_multipliers():
    fg = ising_chain(3, J=0.8, h=0.1).to_factor_graph()
    p = RegionProblem(fg)
    st = initial_state(p, np.zeros(0))
    q = solve_region_belief(p, 0, st)
    tab = fg.factors[0].table.reshape(2, 2, order="F")
    assert np.allclose(q, tab / tab.sum(), atol=1e-14)


def test_edge_multiplier_only_keeps_zero_magnetization():
    fg = IsingModel(2, [(0, 1)], [1.0], [0.0, 0.0]).to_factor_graph()
    S = ConstrainedSolver(fg, "offdiag", scope="all")
    lam = np.array([0.6])
    st = initial_state(S.problem, lam)
    q = solve_region_belief(S.problem, 0, st, lam)
    x = np.array([-1.0, 1.0])
    # generic multiplier on x/sqrt(2) pairs is twice the spin-form one
    ref = np.exp((1.0 - 0.3) * np.outer(x, x))
    assert np.allclose(q, ref / ref.sum(), atol=1e-12)
    qi, Mi, ok = _edge_belief(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.3, [0.0, 0.0], 1e-13, 500)
    assert ok and np.allclose(Mi, 0.0) and np.allclose(qi, ref / ref.sum(), atol=1e-12)


def test_edge_belief_against_root_bracketing():
    x = np.array([-1.0, 1.0])
    J, hi, lam_i = 1.0, 0.5, 0.2

    def mag0(M):
        logit = J * np.outer(x, x) + (hi + lam_i * M) * x[:, None]
        p = np.exp(logit - logit.max())
        p /= p.sum()
        return p.sum(1) @ x

    root = brentq(lambda M: mag0(M) - M, -1 + 1e-12, 1 - 1e-12, xtol=1e-15)
    _, M, ok = _edge_belief(J, hi, 0.0, 0.0, 0.0, lam_i, 0.0, 0.0, [0.0, 0.0], 1e-14, 500)
    assert ok and M[0] == pytest.approx(root, abs=1e-12)


def test_ising_chain_correlation():
    m = ising_chain(3)
    es = clbp_ising(m)
    x = np.array([-1.0, 1.0])
    assert es.converged
    assert x @ es.q[0] @ x == pytest.approx(math.tanh(1.0), abs=1e-10)


def test_ising_path_matches_generic(rng):
    m = IsingModel(6, [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 3)],
                   rng.uniform(-0.8, 0.8, 7), rng.uniform(-0.3, 0.3, 6))
    es = clbp_ising(m)
    p = RegionProblem(m.to_factor_graph())
    st = clbp(p)
    assert es.converged and st.converged
    assert np.max(np.abs(es.magnetizations(m) - mags(single_marginals(p, st)))) < 1e-9


def test_ising_path_with_multipliers_matches_generic():
    fg = gen_wainwright_jordan(3, 4)
    S = ConstrainedSolver(fg, "onoff", T=2.0)
    rng = np.random.default_rng(2)
    lam = rng.normal(0, 0.1, S.n_constraints)
    st = clbp(S.problem, lam, InferenceOptions(tol_msg=1e-13))
    r = rng_for(4)
    edges = grid_edges(3)
    h = r.uniform(-0.25, 0.25, 9)
    J = r.uniform(-1.0, 1.0, len(edges))
    model = IsingModel(9, edges, J, h).scaled(2.0)
    lam_diag = np.zeros(9)
    lam_edge = np.zeros(len(edges))
    index = {e: k for k, e in enumerate(edges)}
    for e, v in zip(S.spec.entries, lam):
        if e.i == e.j:
            lam_diag[e.i] = v
        else:
            lam_edge[index[(min(e.i, e.j), max(e.i, e.j))]] = v / 2
    es = clbp_ising(model, lam_diag, lam_edge, InferenceOptions(tol_msg=1e-13))
    assert es.converged
    assert np.max(np.abs(es.magnetizations(model) - mags(single_marginals(S.problem, st)))) < 1e-9


def test_fully_connected_ising_path_matches_message_solution():
    N, h = 10, 1.0
    edges = [(i, j) for i in range(N) for j in range(i + 1, N)]
    es = clbp_ising(IsingModel(N, edges, [1.0] * len(edges), [h] * N))
    ref = fc_solve_constrained(FCModel(N, h, 1.0), "none")
    M = es.magnetizations(IsingModel(N, edges, [1.0] * len(edges), [h] * N))
    assert np.max(np.abs(M - ref.M)) < 1e-8


def test_double_loop_on_tree_matches_clbp(rng):
    fg = random_factor_graph(6, rng, tree=True)
    p = RegionProblem(fg)
    a = clbp(p)
    b = double_loop(p)
    qa = np.concatenate(single_marginals(p, a))
    qb = np.concatenate(single_marginals(p, b))
    assert b.converged and np.max(np.abs(qa - qb)) < 1e-8


def test_split_reconstruction():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 4))
    A = A + A.T
    sp = ConvexConcaveSplit.from_quadratic(A)
    assert sp.reconstruction_error(A) <= 1e-10
    assert np.linalg.eigvalsh(sp.A2p).min() >= -1e-10
    assert np.linalg.eigvalsh(sp.A2m).max() <= 1e-10
    m = rng.normal(size=4)
    assert sp.value(m) == pytest.approx(m @ A @ m, rel=1e-12)


def test_double_loop_monotone_on_frustrated_cycle():
    fg = ising_cycle(4, [2.0, 2.0, 2.0, -2.0], 0.1).to_factor_graph()
    p = RegionProblem(fg)
    st = double_loop(p)
    assert np.max(np.diff(st.history)) <= 1e-10
    ref = clbp(p)
    if ref.converged:
        assert st.history[-1] <= free_energy(p, ref) + 1e-8


def test_free_energy_single_spin_exact():
    fg = IsingModel(1, [], [], [1.0]).to_factor_graph()
    p = RegionProblem(fg)
    st = clbp(p)
    assert free_energy(p, st) == pytest.approx(-exact_stats(fg).log_Z, abs=1e-10)


def test_free_energy_tree(rng):
    fg = random_factor_graph(7, rng, tree=True)
    p = RegionProblem(fg)
    assert free_energy(p, clbp(p)) == pytest.approx(-exact_stats(fg).log_Z, abs=1e-8)


def test_free_energy_descends_from_uniform():
    p = RegionProblem(scale_temperature(gen_wainwright_jordan(4, 0), 3.0))
    st = clbp(p)
    uni = st.copy()
    sizes = np.diff(p.out_off)
    uni.lq_out = np.repeat(-np.log(sizes), sizes).astype(float)
    isz = np.diff(p.in_off)
    uni.lq_in = np.repeat(-np.log(isz), isz).astype(float)
    assert free_energy(p, st) <= free_energy(p, uni)


def test_free_energy_multiplier_terms():
    fg = gen_wainwright_jordan(3, 1)
    S = ConstrainedSolver(fg, "diag", T=2.0)
    lam = np.full(S.n_constraints, 0.05)
    st = clbp(S.problem, lam)
    base = free_energy(S.problem, st, np.zeros_like(lam))
    chi = np.full(S.n_constraints, 0.3)
    assert free_energy(S.problem, st, lam, chi) < free_energy(S.problem, st, lam)
    assert free_energy(S.problem, st, lam) != base


def test_fully_connected_generic_is_symmetric():
    p = RegionProblem(scale_temperature(gen_fully_connected(10, 1.0), 5.0))
    st = clbp(p)
    m = mags(single_marginals(p, st))
    assert np.ptp(m) < 1e-9
