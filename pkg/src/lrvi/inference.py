"""Belief optimization at fixed Lagrange multipliers.

``RegionProblem`` flattens a factor graph plus region graph into the arrays the
compiled kernels expect.  ``clbp`` runs the generalized loopy scheme with the
multiplier terms folded into each outer region; ``double_loop`` is the slower
variant that decreases the objective monotonically; ``clbp_ising`` is a
direct spin-model implementation used as a cross-check.

Constraint terms enter through ``StatTerms``: each outer region carries a
small set of single-variable statistics f_k, and each constraint c adds
``lam_c * Cov_q(f_k, f_l)`` to the objective.  Writing m = E_q f, the
stationary belief is

    log q(x) = s0(x) - sum_c lam_c f_k f_l + (B m) . f - log Z

with B symmetric (B_kl and B_lk each receive lam_c; a diagonal term puts
2 lam_c on B_kk).  The means must be solved self-consistently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import _kernels as K
from .graph_model import FactorGraph, IsingModel, RegionGraph, build_bethe_regions

NEG_INF = -np.inf


class NumericalFault(RuntimeError):
    """NaN or Inf appeared during message passing."""

    def __init__(self, msg, region=None):
        super().__init__(msg)
        self.region = region


def configs(cards) -> np.ndarray:
    """All joint states of ``cards`` as rows, first variable fastest."""
    n = int(np.prod(cards)) if len(cards) else 1
    if not len(cards):
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(np.unravel_index(np.arange(n), tuple(cards), order="F")).T.astype(np.int64)


def _linear(states, cards) -> np.ndarray:
    idx = np.zeros(states.shape[0], dtype=np.int64)
    mult = 1
    for k, c in enumerate(cards):
        idx += states[:, k] * mult
        mult *= c
    return idx


@dataclass
class StatTerms:
    """Per-region statistics and the constraints that couple them.

    ``stat_var[a][k]`` is the variable of statistic k in region a and
    ``stat_coef[a][k]`` its coefficient vector over that variable's states.
    Constraint c couples statistics ``c_k[c]`` and ``c_l[c]`` of region
    ``c_region[c]``.
    """

    stat_var: list
    stat_coef: list
    c_region: np.ndarray
    c_k: np.ndarray
    c_l: np.ndarray

    @classmethod
    def empty(cls, n_outer):
        z = np.zeros(0, dtype=np.int64)
        return cls([[] for _ in range(n_outer)], [[] for _ in range(n_outer)], z, z.copy(), z.copy())

    @property
    def size(self):
        return len(self.c_region)


@dataclass
class InferenceOptions:
    tol_msg: float = 1e-10
    max_iter: int = 10_000
    damping: float = 0.0
    adaptive_damping: bool = True
    max_damping: float = 0.9
    window: int = 20
    tol_inner: float = 1e-12
    inner_cap: int = 500
    # give up early once fully damped and this many windows bring no new best
    stall_windows: int = 25


class RegionProblem:
    """Flat-array image of a factor graph and a region graph at temperature T."""

    def __init__(self, fg: FactorGraph, rg: RegionGraph | None = None, T: float = 1.0,
                 terms: StatTerms | None = None):
        self.fg = fg
        self.rg = rg if rg is not None else build_bethe_regions(fg)
        rg = self.rg
        cards = np.array(fg.cards)
        self.n_outer = len(rg.outer)
        self.n_inner = len(rg.inner)
        # outer tables
        self.out_vars = [tuple(r.variables) for r in rg.outer]
        self.out_cards = [tuple(cards[list(v)]) for v in self.out_vars]
        self.out_states = [configs(c) for c in self.out_cards]
        sizes = [s.shape[0] for s in self.out_states]
        self.out_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        log_base = np.zeros(self.out_off[-1])
        for a, r in enumerate(rg.outer):
            X = self.out_states[a]
            seg = np.zeros(X.shape[0])
            for fa in r.factors:
                f = fg.factors[fa]
                pos = [self.out_vars[a].index(m) for m in f.members]
                with np.errstate(divide="ignore"):
                    lt = np.log(f.table)
                seg += lt[_linear(X[:, pos], f.cards)]
            log_base[self.out_off[a]:self.out_off[a + 1]] = seg
        self.log_base = log_base
        # inner tables
        self.in_vars = [tuple(r.variables) for r in rg.inner]
        self.in_cards = [tuple(cards[list(v)]) for v in self.in_vars]
        isz = [int(np.prod(c)) for c in self.in_cards]
        self.in_off = np.concatenate([[0], np.cumsum(isz)]).astype(np.int64)
        self.counting = np.array([r.counting for r in rg.inner], dtype=float)
        # edges
        E = len(rg.edges)
        self.edge_alpha = np.array([a for a, _ in rg.edges], dtype=np.int64)
        self.edge_beta = np.array([b for _, b in rg.edges], dtype=np.int64)
        msz = [isz[b] for b in self.edge_beta]
        self.msg_off = np.concatenate([[0], np.cumsum(msz)]).astype(np.int64)
        proj, proj_off = [], [0]
        for a, b in rg.edges:
            pos = [self.out_vars[a].index(v) for v in self.in_vars[b]]
            proj.append(_linear(self.out_states[a][:, pos], self.in_cards[b]))
            proj_off.append(proj_off[-1] + sizes[a])
        self.proj = np.concatenate(proj).astype(np.int64) if E else np.zeros(0, np.int64)
        self.proj_off = np.array(proj_off, dtype=np.int64)
        self.beta_ptr, self.beta_edges = self._group(self.edge_beta, self.n_inner)
        self.alpha_ptr, self.alpha_edges = self._group(self.edge_alpha, self.n_outer)
        nb = np.diff(self.beta_ptr)
        denom = nb + self.counting
        if np.any(denom <= 0):
            bad = np.flatnonzero(denom <= 0).tolist()
            raise ValueError(f"inner regions {bad} have non-positive n_b + c_b")
        self.expo = 1.0 / denom
        # number of outer regions holding each variable
        self.k = np.zeros(fg.num_vars, dtype=np.int64)
        for v in self.out_vars:
            self.k[list(v)] += 1
        self.var_first = [min(a for a, v in enumerate(self.out_vars) if i in v)
                          for i in range(fg.num_vars)]
        self.var_off = np.concatenate([[0], np.cumsum(fg.cards)]).astype(np.int64)
        self.set_temperature(T)
        self.set_terms(terms if terms is not None else StatTerms.empty(self.n_outer))

    @staticmethod
    def _group(keys, n):
        order = np.argsort(keys, kind="stable")
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(ptr, keys + 1, 1)
        return np.cumsum(ptr), order.astype(np.int64)

    def set_temperature(self, T: float):
        if not (T > 0 and np.isfinite(T)):
            raise ValueError(f"temperature must be positive, got {T}")
        self.T = float(T)
        with np.errstate(invalid="ignore"):
            self.base = np.where(np.isneginf(self.log_base), NEG_INF, self.log_base / T)

    def set_terms(self, terms: StatTerms):
        self.terms = terms
        Ks = [len(v) for v in terms.stat_var]
        self.stat_ptr = np.concatenate([[0], np.cumsum(Ks)]).astype(np.int64)
        blocks = [k * (self.out_off[a + 1] - self.out_off[a]) for a, k in enumerate(Ks)]
        self.stat_off = np.concatenate([[0], np.cumsum(blocks)]).astype(np.int64)
        self.bmat_off = np.concatenate([[0], np.cumsum([k * k for k in Ks])]).astype(np.int64)
        stats = np.zeros(self.stat_off[-1])
        self.stat_tables = []
        for a in range(self.n_outer):
            X = self.out_states[a]
            tabs = np.zeros((Ks[a], X.shape[0]))
            for k, (v, coef) in enumerate(zip(terms.stat_var[a], terms.stat_coef[a])):
                tabs[k] = np.asarray(coef, dtype=float)[X[:, self.out_vars[a].index(v)]]
            self.stat_tables.append(tabs)
            stats[self.stat_off[a]:self.stat_off[a + 1]] = tabs.ravel()
        self.stats = stats

    # -- multiplier tables --------------------------------------------------

    def lambda_tables(self, lam):
        """Tilt tables and flattened B blocks for multiplier vector ``lam``."""
        lam = np.asarray(lam, dtype=float)
        t = self.terms
        if lam.shape != (t.size,):
            raise ValueError(f"expected {t.size} multipliers, got shape {lam.shape}")
        if not np.all(np.isfinite(lam)):
            raise ValueError("multipliers must be finite")
        tilt = np.zeros(self.out_off[-1])
        bmat = np.zeros(self.bmat_off[-1])
        for c in range(t.size):
            a, k, l = int(t.c_region[c]), int(t.c_k[c]), int(t.c_l[c])
            F = self.stat_tables[a]
            tilt[self.out_off[a]:self.out_off[a + 1]] -= lam[c] * F[k] * F[l]
            Ka = self.stat_ptr[a + 1] - self.stat_ptr[a]
            bo = self.bmat_off[a]
            bmat[bo + k * Ka + l] += lam[c]
            bmat[bo + l * Ka + k] += lam[c]
        return tilt, bmat

    def bmatrix(self, a, lam):
        _, bmat = self.lambda_tables(lam)
        Ka = self.stat_ptr[a + 1] - self.stat_ptr[a]
        return bmat[self.bmat_off[a]:self.bmat_off[a + 1]].reshape(Ka, Ka)

    # -- views --------------------------------------------------------------

    def outer_table(self, flat, a):
        return flat[self.out_off[a]:self.out_off[a + 1]]

    def marginal_from_outer(self, q_out_flat, a, variables):
        """Marginal of outer belief ``a`` onto ``variables`` (in the given order)."""
        X = self.out_states[a]
        pos = [self.out_vars[a].index(v) for v in variables]
        cards = [self.fg.cards[v] for v in variables]
        out = np.zeros(int(np.prod(cards)))
        np.add.at(out, _linear(X[:, pos], cards), q_out_flat[self.out_off[a]:self.out_off[a + 1]])
        return out.reshape(cards, order="F")


@dataclass
class InferenceState:
    lq_out: np.ndarray
    lq_in: np.ndarray
    lmu_ba: np.ndarray
    lmu_ab: np.ndarray
    means: np.ndarray
    lam: np.ndarray
    T: float
    converged: bool = False
    iterations: int = 0
    residual: float = np.inf
    damping: float = 0.0
    inner_failures: int = 0
    history: list = field(default_factory=list)

    def copy(self):
        return InferenceState(self.lq_out.copy(), self.lq_in.copy(), self.lmu_ba.copy(),
                              self.lmu_ab.copy(), self.means.copy(), self.lam.copy(), self.T,
                              self.converged, self.iterations, self.residual, self.damping,
                              self.inner_failures, list(self.history))

    @property
    def q_out(self):
        return np.exp(self.lq_out)

    @property
    def q_in(self):
        return np.exp(self.lq_in)


def outer_beliefs(problem: RegionProblem, state: InferenceState):
    """Outer beliefs reshaped to one axis per region variable."""
    q = state.q_out
    return [q[problem.out_off[a]:problem.out_off[a + 1]].reshape(problem.out_cards[a], order="F")
            for a in range(problem.n_outer)]


def single_marginals(problem: RegionProblem, state: InferenceState):
    q = state.q_out
    return [problem.marginal_from_outer(q, problem.var_first[i], [i])
            for i in range(problem.fg.num_vars)]


def consistency_residual(problem: RegionProblem, state: InferenceState) -> float:
    """Largest |marginal of q_alpha - q_beta| over containment edges."""
    q_out, q_in = state.q_out, state.q_in
    worst = 0.0
    for e in range(len(problem.edge_alpha)):
        a, b = problem.edge_alpha[e], problem.edge_beta[e]
        m = problem.marginal_from_outer(q_out, a, problem.in_vars[b]).ravel(order="F")
        worst = max(worst, float(np.max(np.abs(m - q_in[problem.in_off[b]:problem.in_off[b + 1]]))))
    return worst


def _refresh_inner(problem, state):
    """Inner beliefs as marginals of the first neighbouring outer belief."""
    q_out = state.q_out
    lq_in = np.empty(problem.in_off[-1])
    for b in range(problem.n_inner):
        e = problem.beta_edges[problem.beta_ptr[b]]
        m = problem.marginal_from_outer(q_out, problem.edge_alpha[e], problem.in_vars[b])
        with np.errstate(divide="ignore"):
            lq_in[problem.in_off[b]:problem.in_off[b + 1]] = np.log(m.ravel(order="F"))
    state.lq_in = lq_in


def initial_state(problem: RegionProblem, lam, opts: InferenceOptions | None = None):
    """Unit messages with outer beliefs computed from them."""
    opts = opts or InferenceOptions()
    lam = np.asarray(lam, dtype=float)
    tilt, bmat = problem.lambda_tables(lam)
    lmu_ba = np.zeros(problem.msg_off[-1])
    lmu_ab = np.zeros(problem.msg_off[-1])
    lq_out = np.empty(problem.out_off[-1])
    means = np.zeros(problem.stat_ptr[-1])
    # start the means from the lambda-free beliefs
    for a in range(problem.n_outer):
        s = problem.outer_table(problem.base, a)
        with np.errstate(invalid="ignore"):
            p = np.exp(s - np.max(s))
        p /= p.sum()
        F = problem.stat_tables[a]
        means[problem.stat_ptr[a]:problem.stat_ptr[a + 1]] = F @ p
    K.refresh_all(problem.n_outer, problem.base, lmu_ba, problem.alpha_ptr, problem.alpha_edges,
                  problem.msg_off, problem.proj, problem.proj_off, problem.out_off, tilt,
                  problem.stats, problem.stat_ptr, problem.stat_off, bmat, problem.bmat_off,
                  means, lq_out, opts.tol_inner, opts.inner_cap)
    state = InferenceState(lq_out, np.zeros(problem.in_off[-1]), lmu_ba, lmu_ab, means,
                           lam.copy(), problem.T)
    _refresh_inner(problem, state)
    return state


def solve_region_belief(problem: RegionProblem, a: int, state: InferenceState, lam=None,
                        opts: InferenceOptions | None = None) -> np.ndarray:
    """Recompute outer belief ``a`` from the state's incoming messages (in place)."""
    opts = opts or InferenceOptions()
    lam = state.lam if lam is None else np.asarray(lam, dtype=float)
    tilt, bmat = problem.lambda_tables(lam)
    r = K.solve_region(a, problem.base, state.lmu_ba, problem.alpha_ptr, problem.alpha_edges,
                       problem.msg_off, problem.proj, problem.proj_off, problem.out_off, tilt,
                       problem.stats, problem.stat_ptr, problem.stat_off, bmat,
                       problem.bmat_off, state.means, state.lq_out, opts.tol_inner,
                       opts.inner_cap)
    if r < 0:
        state.inner_failures += 1
    return np.exp(problem.outer_table(state.lq_out, a)).reshape(problem.out_cards[a], order="F")


def clbp(problem: RegionProblem, lam=None, opts: InferenceOptions | None = None,
         init: InferenceState | None = None) -> InferenceState:
    """Constrained loopy belief propagation at fixed multipliers.

    Never raises on non-convergence; the returned state carries the flag,
    sweep count and final residual.  A NaN raises ``NumericalFault``.
    """
    opts = opts or InferenceOptions()
    lam = np.zeros(problem.terms.size) if lam is None else np.asarray(lam, dtype=float)
    if init is None:
        state = initial_state(problem, lam, opts)
    else:
        state = init.copy()
        state.lam = lam.copy()
        state.T = problem.T
        state.converged = False
        state.history = []
        if state.means.shape != (problem.stat_ptr[-1],):
            state.means = np.zeros(problem.stat_ptr[-1])
        tilt, bmat = problem.lambda_tables(lam)
        K.refresh_all(problem.n_outer, problem.base, state.lmu_ba, problem.alpha_ptr,
                      problem.alpha_edges, problem.msg_off, problem.proj, problem.proj_off,
                      problem.out_off, tilt, problem.stats, problem.stat_ptr, problem.stat_off,
                      bmat, problem.bmat_off, state.means, state.lq_out, opts.tol_inner,
                      opts.inner_cap)
    tilt, bmat = problem.lambda_tables(lam)
    damping = opts.damping
    done = 0
    best_prev = np.inf
    resid = np.zeros(opts.window + 1)
    state.inner_failures = 0
    stalled = 0
    while done < opts.max_iter:
        n = min(opts.window, opts.max_iter - done)
        resid[:] = 0.0
        status, fails = K.clbp_sweeps(
            n, problem.n_inner, problem.base, state.lmu_ba, state.lmu_ab, state.lq_in,
            problem.in_off, problem.beta_ptr, problem.beta_edges, problem.edge_alpha,
            problem.expo, problem.alpha_ptr, problem.alpha_edges, problem.msg_off,
            problem.proj, problem.proj_off, problem.out_off, tilt, problem.stats,
            problem.stat_ptr, problem.stat_off, bmat, problem.bmat_off, state.means,
            state.lq_out, damping, opts.tol_inner, opts.inner_cap, resid)
        state.inner_failures += fails
        if status == 1:
            a = int(resid[-1])
            raise NumericalFault(
                f"NaN in outer region {a} (variables {problem.out_vars[a]})", region=a)
        r = resid[:n]
        hit = np.flatnonzero(r <= opts.tol_msg)
        if hit.size:
            done += int(hit[0]) + 1
            state.residual = float(r[hit[0]])
            state.converged = True
            break
        done += n
        state.residual = float(r[-1])
        window_max = float(np.max(r))
        at_max = not opts.adaptive_damping or damping >= opts.max_damping
        if opts.adaptive_damping and window_max >= 0.9 * best_prev and damping < opts.max_damping:
            damping = min(opts.max_damping, round(damping + 0.1, 10))
        stalled = stalled + 1 if (at_max and window_max >= best_prev) else 0
        best_prev = min(best_prev, window_max)
        if opts.stall_windows and stalled >= opts.stall_windows:
            break
    state.iterations = done
    state.damping = damping
    _refresh_inner(problem, state)
    return state


# ------------------------------------------------------------ free energy


def free_energy(problem: RegionProblem, state: InferenceState, lam=None, chi=None) -> float:
    """Region free energy plus multiplier terms.

    Without ``chi`` the result is F(q) + sum_c lam_c C_c(q), the part that
    depends on the beliefs; with ``chi`` (one value per constraint) the
    constant -sum_c lam_c chi_c is included as well.
    """
    lam = state.lam if lam is None else np.asarray(lam, dtype=float)
    q_out = state.q_out
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(q_out > 0, q_out * (state.lq_out - problem.base), 0.0)
    F = float(t.sum())
    q_in = state.q_in
    for b in range(problem.n_inner):
        c = problem.counting[b]
        if c == 0:
            continue
        sl = slice(problem.in_off[b], problem.in_off[b + 1])
        qb = q_in[sl]
        F += c * float(np.sum(np.where(qb > 0, qb * state.lq_in[sl], 0.0)))
    F += float(np.dot(lam, constraint_covariances(problem, q_out)))
    if chi is not None:
        F -= float(np.dot(lam, np.asarray(chi, dtype=float)))
    return F


def constraint_covariances(problem: RegionProblem, q_out_flat) -> np.ndarray:
    """Cov_q(f_k, f_l) of every constraint under its region's belief."""
    t = problem.terms
    out = np.zeros(t.size)
    for c in range(t.size):
        a = int(t.c_region[c])
        q = q_out_flat[problem.out_off[a]:problem.out_off[a + 1]]
        F = problem.stat_tables[a]
        fk, fl = F[t.c_k[c]], F[t.c_l[c]]
        out[c] = q @ (fk * fl) - (q @ fk) * (q @ fl)
    return out


# ------------------------------------------------------------ Ising fast path


@dataclass
class EdgeState:
    """Spin-model beliefs: 2x2 pair tables (axis 0 = first endpoint) and messages.

    ``log_msg[e, s]`` is the log-ratio of the message from edge e into its
    endpoint s (s = 0 first, 1 second), i.e. log mu(+1) - log mu(-1).
    """

    q: np.ndarray
    M: np.ndarray
    log_msg: np.ndarray
    converged: bool
    iterations: int
    residual: float

    def magnetizations(self, model: IsingModel) -> np.ndarray:
        h = np.asarray(model.h)
        total = np.zeros(model.n)
        for e, (i, j) in enumerate(model.edges):
            total[i] += self.log_msg[e, 0]
            total[j] += self.log_msg[e, 1]
        # the field enters once per variable; the multiplier term is implicit in M
        out = np.full(model.n, np.nan)
        for e, (i, j) in enumerate(model.edges):
            for s, v in enumerate((i, j)):
                if np.isnan(out[v]):
                    out[v] = self.M[e, s]
        iso = np.isnan(out)
        out[iso] = np.tanh(h[iso] + total[iso])
        return out


def _edge_belief(J, hi, hj, ci, cj, lam_i, lam_j, lam_ij, M0, tol, cap):
    """Self-consistent pair belief of one edge.

    ``ci`` and ``cj`` are cavity log-ratios (half-fields from incoming messages).
    Returns (q 2x2, (Mi, Mj), ok).
    """
    s = np.array([-1.0, 1.0])
    xx = np.outer(s, s)

    def belief(M):
        ai = hi + ci + lam_ij * M[1] + lam_i * M[0]
        aj = hj + cj + lam_ij * M[0] + lam_j * M[1]
        logit = (J - lam_ij) * xx + ai * s[:, None] + aj * s[None, :]
        p = np.exp(logit - logit.max())
        return p / p.sum()

    def mags(p):
        return np.array([p.sum(1) @ s, p.sum(0) @ s])

    M = np.array(M0, dtype=float)
    for _ in range(cap):
        Mn = mags(belief(M))
        if np.max(np.abs(Mn - M)) <= tol:
            return belief(Mn), Mn, True
        M = Mn
    sol = optimize.root(lambda m: mags(belief(m)) - m, np.array(M0, float), method="hybr",
                        options={"xtol": 1e-14})
    M = sol.x
    ok = bool(sol.success) and np.max(np.abs(mags(belief(M)) - M)) <= 1e-10
    return belief(M), M, ok


def clbp_ising(model: IsingModel, lam_diag=None, lam_edge=None,
               opts: InferenceOptions | None = None) -> EdgeState:
    """Spin-form message passing with per-edge magnetization parameters.

    Multipliers use the spin convention: ``lam_diag[i]`` multiplies
    (1 - M_i^2 - chi_ii)/2 and ``lam_edge[e]`` multiplies (C_e - chi_e).  In the
    orthonormal statistic x/sqrt(2) these are lam_ii and lam_ij/2 respectively.
    """
    opts = opts or InferenceOptions()
    E = len(model.edges)
    lam_diag = np.zeros(model.n) if lam_diag is None else np.asarray(lam_diag, dtype=float)
    lam_edge = np.zeros(E) if lam_edge is None else np.asarray(lam_edge, dtype=float)
    h = np.asarray(model.h)
    J = np.asarray(model.J)
    incident = [[] for _ in range(model.n)]
    for e, (i, j) in enumerate(model.edges):
        incident[i].append((e, 0))
        incident[j].append((e, 1))
    log_msg = np.zeros((E, 2))  # log-ratio of mu_{e -> endpoint}
    q = np.full((E, 2, 2), 0.25)
    M = np.zeros((E, 2))
    damping = opts.damping
    best_prev = np.inf
    window = []
    it = 0
    resid = np.inf
    converged = False
    s = np.array([-1.0, 1.0])
    while it < opts.max_iter:
        it += 1
        change = 0.0
        for e, (i, j) in enumerate(model.edges):
            # cavity half-log-ratios: product over the other edges at each endpoint
            ci = 0.5 * sum(log_msg[f, t] for f, t in incident[i] if f != e)
            cj = 0.5 * sum(log_msg[f, t] for f, t in incident[j] if f != e)
            qe, Me, _ = _edge_belief(J[e], h[i], h[j], ci, cj, lam_diag[i], lam_diag[j],
                                     lam_edge[e], M[e], opts.tol_inner, opts.inner_cap)
            q[e], M[e] = qe, Me
            # message into i: sum over x_j of everything except terms in x_i alone
            for side, (own, other, c_other) in enumerate(((i, j, cj), (j, i, ci))):
                Mown = Me[side]
                Moth = Me[1 - side]
                lam_oth = lam_diag[other]
                a_other = h[other] + c_other + lam_oth * Moth + lam_edge[e] * Mown
                b_own = lam_edge[e] * Moth
                logit = ((J[e] - lam_edge[e]) * np.outer(s, s) + a_other * s[None, :]
                         + b_own * s[:, None])
                lm = np.logaddexp(logit[:, 0], logit[:, 1])
                new = lm[1] - lm[0]
                if damping > 0:
                    new = (1 - damping) * new + damping * log_msg[e, side]
                change = max(change, abs(new - log_msg[e, side]))
                log_msg[e, side] = new
        resid = change
        window.append(change)
        if change <= opts.tol_msg:
            converged = True
            break
        if len(window) == opts.window:
            wmax = max(window)
            if opts.adaptive_damping and wmax >= 0.9 * best_prev and damping < opts.max_damping:
                damping = min(opts.max_damping, round(damping + 0.1, 10))
            best_prev = min(best_prev, wmax)
            window = []
    return EdgeState(q, M, log_msg, converged, it, float(resid))


# ------------------------------------------------------------ double loop


@dataclass
class ConvexConcaveSplit:
    """Quadratic form A0 + A1.m + m'(A2p + A2m)m split into convex and concave parts.

    ``q_prime`` is the expansion point (region belief) the concave part is
    linearized about.
    """

    A0: float
    A1: np.ndarray
    A2p: np.ndarray
    A2m: np.ndarray
    q_prime: np.ndarray | None = None

    @classmethod
    def from_quadratic(cls, A2, A1=None, A0=0.0, q_prime=None):
        A2 = 0.5 * (np.asarray(A2, dtype=float) + np.asarray(A2, dtype=float).T)
        w, U = np.linalg.eigh(A2)
        A2p = (U * np.clip(w, 0, None)) @ U.T
        A2m = (U * np.clip(w, None, 0)) @ U.T
        A1 = np.zeros(A2.shape[0]) if A1 is None else np.asarray(A1, dtype=float)
        return cls(float(A0), A1, A2p, A2m, q_prime)

    def value(self, m):
        m = np.asarray(m, dtype=float)
        return self.A0 + self.A1 @ m + m @ (self.A2p + self.A2m) @ m

    def reconstruction_error(self, A2):
        A2 = 0.5 * (np.asarray(A2) + np.asarray(A2).T)
        return float(np.max(np.abs(self.A2p + self.A2m - A2))) if A2.size else 0.0


@dataclass
class DoubleLoopOptions:
    max_outer: int = 2000
    tol: float = 1e-10
    inner_tol: float = 1e-13
    inner_max: int = 20_000


def _region_split(problem, a, lam):
    """Quadratic part of the multiplier terms of region a in the statistic means."""
    B = problem.bmatrix(a, lam)
    return ConvexConcaveSplit.from_quadratic(-0.5 * B)


def double_loop(problem: RegionProblem, lam=None, opts: DoubleLoopOptions | None = None,
                init: InferenceState | None = None) -> InferenceState:
    """Majorize-minimize on the constrained Bethe-type objective.

    Each outer step replaces the concave pieces (negative counting-number
    entropies and the concave part of the multiplier quadratic) by tangents at
    the current beliefs and bounds the convex quadratic part by a scaled
    Kullback-Leibler proximity term.  The resulting convex problem is solved by
    block coordinate ascent on the consistency multipliers.  ``state.history``
    holds the objective value after every outer step; it never increases
    beyond round-off.
    """
    opts = opts or DoubleLoopOptions()
    lam = np.zeros(problem.terms.size) if lam is None else np.asarray(lam, dtype=float)
    state = initial_state(problem, lam) if init is None else init.copy()
    state.lam = lam.copy()
    tilt, _ = problem.lambda_tables(lam)
    lin = problem.base + tilt  # terms linear in q_alpha
    splits = [_region_split(problem, a, lam) for a in range(problem.n_outer)]
    rho = np.zeros(problem.n_outer)
    for a, sp in enumerate(splits):
        F = problem.stat_tables[a]
        if F.shape[0] == 0:
            continue
        half = 0.5 * (F.max(axis=1) - F.min(axis=1))
        top = np.max(np.linalg.eigvalsh(sp.A2p)) if sp.A2p.size else 0.0
        rho[a] = 2.0 * max(top, 0.0) * float(np.sum(half ** 2))
    kappa = 1.0 + rho
    _refresh_inner(problem, state)
    # the starting beliefs need not be consistent, so the record starts after
    # the first inner solve, the first feasible point
    history = []
    gamma = np.zeros(problem.msg_off[-1])  # scaled by 1/kappa_alpha
    kap_edge = kappa[problem.edge_alpha]
    converged = False
    it = 0
    for it in range(1, opts.max_outer + 1):
        q_out = state.q_out
        b = np.empty_like(lin)
        for a in range(problem.n_outer):
            sl = slice(problem.out_off[a], problem.out_off[a + 1])
            F = problem.stat_tables[a]
            seg = lin[sl].copy()
            if F.shape[0]:
                m = F @ q_out[sl]
                A = splits[a].A2p + splits[a].A2m
                seg -= 2.0 * (A @ m) @ F
                if rho[a] > 0:
                    seg += rho[a] * state.lq_out[sl]
            b[sl] = seg
        ell = np.zeros(problem.in_off[-1])
        ctil = np.zeros(problem.n_inner)
        for bb in range(problem.n_inner):
            sl = slice(problem.in_off[bb], problem.in_off[bb + 1])
            c = problem.counting[bb]
            if c < 0:
                ell[sl] = np.where(np.isneginf(state.lq_in[sl]), 0.0, -c * state.lq_in[sl])
            else:
                ctil[bb] = c
        bk = b / np.repeat(kappa, np.diff(problem.out_off))
        lq_out = np.empty_like(state.lq_out)
        lq_in = np.empty_like(state.lq_in)
        ok, _ = K.dl_inner(problem.n_outer, problem.n_inner, bk, gamma, kap_edge, ell, ctil,
                           problem.in_off, problem.beta_ptr, problem.beta_edges,
                           problem.edge_alpha, problem.edge_beta, problem.alpha_ptr,
                           problem.alpha_edges, problem.msg_off, problem.proj,
                           problem.proj_off, problem.out_off, lq_out, lq_in, opts.inner_tol, opts.inner_max)
        if not ok:
            state.history = history
            state.iterations = it
            state.converged = False
            raise NumericalFault("double-loop inner solve did not converge")
        prev = state.lq_out
        state.lq_out = lq_out
        state.lq_in = lq_in
        F_new = free_energy(problem, state, lam)
        history.append(F_new)
        with np.errstate(invalid="ignore"):
            delta = np.abs(np.where(np.isneginf(prev), 0.0, np.exp(prev) - np.exp(lq_out)))
        if float(np.max(delta)) <= opts.tol:
            converged = True
            break
    # messages consistent with the final beliefs, so the state can seed clbp
    for a in range(problem.n_outer):
        sl = slice(problem.out_off[a], problem.out_off[a + 1])
        F = problem.stat_tables[a]
        state.means[problem.stat_ptr[a]:problem.stat_ptr[a + 1]] = F @ np.exp(state.lq_out[sl])
    state.history = history
    state.iterations = it
    state.converged = converged
    state.residual = float(max(history[-2] - history[-1], 0.0)) if len(history) > 1 else 0.0
    return state
