"""Linear response (chi), marginal covariance (C) and their difference.

All covariance-like matrices are indexed in the indicator basis: row
``var_off[i] + y`` stands for the statistic ``x_i == y``.  Entries that were
not computed are NaN.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .inference import InferenceState, RegionProblem, _linear


@dataclass
class ResponseOptions:
    tol: float = 1e-11
    max_iter: int = 10_000
    method: str = "auto"  # auto | iterative | direct
    direct_limit: int = 10_000
    # in auto mode, sweeps to try before switching to the dense solve
    auto_sweeps: int = 200
    window: int = 50


@dataclass
class ResponseState:
    """Per-target response tables (rows follow ``targets``)."""

    targets: list
    dq_out: np.ndarray
    dq_in: np.ndarray
    dmu_ba: np.ndarray
    dmu_ab: np.ndarray
    converged: bool
    iterations: int
    residual: float
    method: str


class _IndexedMatrix:
    def __init__(self, values, cards):
        self.values = values
        self.cards = tuple(cards)
        self.off = np.concatenate([[0], np.cumsum(cards)]).astype(int)

    def block(self, i, j):
        return self.values[self.off[i]:self.off[i + 1], self.off[j]:self.off[j + 1]]

    def stat(self, i, u, j, w):
        """Entry for statistics u(x_i) and w(x_j) given as coefficient vectors."""
        return float(np.asarray(u) @ self.block(i, j) @ np.asarray(w))

    def spin(self):
        """Spin-basis matrix (x = delta_+ - delta_-) for two-state models."""
        if any(c != 2 for c in self.cards):
            raise ValueError("spin basis needs two-state variables")
        n = len(self.cards)
        P = np.zeros((n, 2 * n))
        P[np.arange(n), 2 * np.arange(n)] = -1.0
        P[np.arange(n), 2 * np.arange(n) + 1] = 1.0
        return P @ self.values @ P.T


class ChiMatrix(_IndexedMatrix):
    def symmetry_error(self):
        v = self.values
        ok = np.isfinite(v) & np.isfinite(v.T)
        return float(np.max(np.abs(v - v.T)[ok])) if ok.any() else 0.0

    def row_sum_error(self):
        """Largest |sum_y chi_{(i,y),(j,y')}| over computed blocks."""
        worst = 0.0
        n = len(self.cards)
        for i in range(n):
            for j in range(n):
                b = self.block(i, j)
                if np.all(np.isfinite(b)):
                    worst = max(worst, float(np.max(np.abs(b.sum(0)))),
                                float(np.max(np.abs(b.sum(1)))))
        return worst


class CMatrix(_IndexedMatrix):
    pass


@dataclass
class ViolationVector:
    values: np.ndarray
    region: np.ndarray
    C: np.ndarray
    chi: np.ndarray

    def by_region(self):
        out = {}
        for c, a in enumerate(self.region):
            out.setdefault(int(a), []).append(float(self.values[c]))
        return out

    def max_abs(self):
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def all_targets(problem: RegionProblem, variables=None):
    vs = range(problem.fg.num_vars) if variables is None else sorted(variables)
    return [(i, y) for i in vs for y in range(problem.fg.cards[i])]


def _source(problem: RegionProblem, targets):
    """Perturbation delta(x_i = y)/k_i spread over every outer region holding i."""
    src = np.zeros((len(targets), problem.out_off[-1]))
    for t, (i, y) in enumerate(targets):
        for a, vars_ in enumerate(problem.out_vars):
            if i in vars_:
                col = problem.out_states[a][:, vars_.index(i)]
                src[t, problem.out_off[a]:problem.out_off[a + 1]] = (col == y) / problem.k[i]
    return src


class _Linearization:
    """Frozen fixed-point quantities shared by every target."""

    def __init__(self, problem: RegionProblem, state: InferenceState):
        self.p = problem
        self.q_out = np.exp(state.lq_out)
        self.q_in = np.exp(state.lq_in)
        _, bmat = problem.lambda_tables(state.lam)
        self.minv = np.zeros(problem.bmat_off[-1])
        K.lin_prepare(problem.n_outer, state.lq_out, problem.out_off, problem.stats,
                      problem.stat_ptr, problem.stat_off, bmat, problem.bmat_off, self.minv,
                      problem.bmat_off)

    def refresh(self, dmu_ba, dq_out, src):
        p = self.p
        K.lin_refresh_all(p.n_outer, dmu_ba.shape[0], dmu_ba, dq_out, src, self.q_out,
                          p.alpha_ptr, p.alpha_edges, p.msg_off, p.proj, p.proj_off,
                          p.out_off, p.stats, p.stat_ptr, p.stat_off, self.minv, p.bmat_off)

    def sweeps(self, n, dmu_ba, dmu_ab, dq_in, dq_out, src, resid, tol=-1.0):
        p = self.p
        return K.lin_sweeps(n, dmu_ba.shape[0], p.n_inner, dmu_ba, dmu_ab, dq_in, dq_out, src,
                            self.q_out, self.q_in, p.in_off, p.beta_ptr, p.beta_edges,
                            p.edge_alpha, p.expo, p.alpha_ptr, p.alpha_edges, p.msg_off,
                            p.proj, p.proj_off, p.out_off, p.stats, p.stat_ptr, p.stat_off,
                            self.minv, p.bmat_off, 0.0, tol, resid)

    def inner(self, dmu_ab, dq_in, dq_out):
        p = self.p
        K.lin_inner_beliefs(dq_out.shape[0], p.n_inner, dmu_ab, dq_in, dq_out, self.q_out,
                            self.q_in, p.in_off, p.beta_ptr, p.beta_edges, p.edge_alpha,
                            p.expo, p.msg_off, p.proj, p.proj_off, p.out_off)

    def buffers(self, ntarg):
        p = self.p
        return (np.zeros((ntarg, p.msg_off[-1])), np.zeros((ntarg, p.msg_off[-1])),
                np.zeros((ntarg, p.in_off[-1])), np.zeros((ntarg, p.out_off[-1])))


def _direct(lin: _Linearization, src):
    """Solve the linear fixed point with a dense factorization.

    One sweep is an affine map x -> A x + b on the inner-to-outer response
    messages; A is probed column by column on unit vectors.
    """
    nmsg = lin.p.msg_off[-1]
    ntarg = src.shape[0]
    dmu_ba, dmu_ab, dq_in, dq_out = lin.buffers(ntarg)
    resid = np.zeros(2)
    lin.refresh(dmu_ba, dq_out, src)
    lin.sweeps(1, dmu_ba, dmu_ab, dq_in, dq_out, src, resid)
    b = dmu_ba.copy()
    E = np.eye(nmsg)
    zb, zab, zin, zout = lin.buffers(nmsg)
    zsrc = np.zeros((nmsg, lin.p.out_off[-1]))
    lin.refresh(E, zout, zsrc)
    lin.sweeps(1, E, zab, zin, zout, zsrc, resid)
    A = E.T  # row k of E is now A applied to unit vector k
    M = np.eye(nmsg) - A
    try:
        X = np.linalg.solve(M, b.T).T
    except np.linalg.LinAlgError:
        X = np.linalg.lstsq(M, b.T, rcond=None)[0].T
    dmu_ba = np.ascontiguousarray(X)
    lin.refresh(dmu_ba, dq_out, src)
    check = dmu_ba.copy()
    lin.sweeps(1, dmu_ba, dmu_ab, dq_in, dq_out, src, resid)
    res = float(np.max(np.abs(dmu_ba - check))) if dmu_ba.size else 0.0
    return dmu_ba, dmu_ab, dq_in, dq_out, res


def clsp(problem: RegionProblem, state: InferenceState, targets=None,
         opts: ResponseOptions | None = None, init: ResponseState | None = None, src=None):
    """Linearized message passing for every target (i, y).

    Returns (ResponseState, ChiMatrix).  Rows of chi belong to the targets; the
    rest are NaN.  ``init`` (same targets) seeds the response messages, and
    ``src`` may pass a precomputed perturbation table.
    """
    opts = opts or ResponseOptions()
    targets = all_targets(problem) if targets is None else list(targets)
    lin = _Linearization(problem, state)
    if src is None:
        src = _source(problem, targets)
    nmsg = problem.msg_off[-1]
    method = opts.method
    converged = False
    done = 0
    res = np.inf
    if method in ("auto", "iterative"):
        dmu_ba, dmu_ab, dq_in, dq_out = lin.buffers(len(targets))
        if init is not None and init.targets == targets and init.dmu_ba.shape == dmu_ba.shape:
            dmu_ba[:] = init.dmu_ba
        lin.refresh(dmu_ba, dq_out, src)
        resid = np.zeros(opts.window)
        cap = opts.max_iter
        if method == "auto" and nmsg <= opts.direct_limit:
            cap = min(cap, opts.auto_sweeps)
        # rough price of the dense solve, in sweeps over all targets
        direct_cost = 4.0 + 2.0 * nmsg / max(1, len(targets))
        while done < cap:
            n = min(opts.window if done else 10, cap - done)
            ran = lin.sweeps(n, dmu_ba, dmu_ab, dq_in, dq_out, src, resid, opts.tol)
            if ran < 0:
                break
            r = resid[:ran]
            done += ran
            if r[-1] <= opts.tol:
                res = float(r[-1])
                converged = True
                break
            res = float(r[-1])
            # a growing residual means the iteration is unstable; stop early
            if done >= 500 and r[-1] > 1e3:
                break
            if cap < opts.max_iter and ran > 1 and r[0] > 0 and r[-1] > 0:
                # the dense solve is available: skip it only if the observed
                # contraction reaches the tolerance within the sweep budget
                rate = (r[-1] / r[0]) ** (1.0 / (ran - 1))
                need = np.log(opts.tol / r[-1]) / np.log(rate) if rate < 1.0 else np.inf
                if need > min(cap - done, direct_cost):
                    break
        method_used = "iterative"
    if not converged and method in ("auto", "direct") and nmsg <= opts.direct_limit:
        dmu_ba, dmu_ab, dq_in, dq_out, res = _direct(lin, src)
        converged = res <= max(opts.tol, 1e-9)
        method_used = "direct"
    lin.inner(dmu_ab, dq_in, dq_out)
    rs = ResponseState(targets, dq_out, dq_in, dmu_ba, dmu_ab, converged, done, res, method_used)
    return rs, assemble_chi(problem, state, rs)


def assemble_chi(problem: RegionProblem, state: InferenceState, rs: ResponseState) -> ChiMatrix:
    """chi_{(i,y),(j,y')} = sum_x q_a(x) dq_a(x) [x_j = y'] with a the first region holding j."""
    off = problem.var_off
    chi = np.full((off[-1], off[-1]), np.nan)
    q = np.exp(state.lq_out)
    rows = np.array([off[i] + y for i, y in rs.targets], dtype=int)
    for j in range(problem.fg.num_vars):
        a = problem.var_first[j]
        sl = slice(problem.out_off[a], problem.out_off[a + 1])
        col = problem.out_states[a][:, problem.out_vars[a].index(j)]
        ind = (col[:, None] == np.arange(problem.fg.cards[j])[None, :]).astype(float)
        chi[rows, off[j]:off[j + 1]] = (rs.dq_out[:, sl] * q[sl]) @ ind
    return ChiMatrix(chi, problem.fg.cards)


def symmetrized(chi: ChiMatrix) -> ChiMatrix:
    v = chi.values
    both = np.isfinite(v) & np.isfinite(v.T)
    out = np.where(both, 0.5 * (v + v.T), v)
    return ChiMatrix(out, chi.cards)


def pair_covariance(problem: RegionProblem, q_out_flat, a, i, j) -> np.ndarray:
    """Indicator-basis covariance block of variables i, j under region a's belief."""
    X = problem.out_states[a]
    qa = q_out_flat[problem.out_off[a]:problem.out_off[a + 1]]
    xi = X[:, problem.out_vars[a].index(i)]
    xj = X[:, problem.out_vars[a].index(j)]
    Yi, Yj = problem.fg.cards[i], problem.fg.cards[j]
    joint = np.zeros(Yi * Yj)
    np.add.at(joint, xi + Yi * xj, qa)
    joint = joint.reshape((Yi, Yj), order="F")
    if i == j:
        pi = joint.sum(1)
        return np.diag(pi) - np.outer(pi, pi)
    return joint - np.outer(joint.sum(1), joint.sum(0))


def marginal_covariance(problem: RegionProblem, state: InferenceState, pairs=None,
                        regions=None) -> CMatrix:
    """Covariance blocks read off region beliefs.

    ``pairs`` defaults to every (i, i) and every pair sharing an outer region.
    The covering region is ``regions[(i, j)]`` when given, otherwise the first
    outer region holding both variables.
    """
    off = problem.var_off
    C = np.full((off[-1], off[-1]), np.nan)
    q = np.exp(state.lq_out)
    if pairs is None:
        pairs = set((i, i) for i in range(problem.fg.num_vars))
        for v in problem.out_vars:
            for i in v:
                for j in v:
                    if i < j:
                        pairs.add((i, j))
        pairs = sorted(pairs)
    for i, j in pairs:
        if regions is not None and (i, j) in regions:
            a = regions[(i, j)]
        else:
            cover = [a for a, v in enumerate(problem.out_vars) if i in v and j in v]
            if not cover:
                raise ValueError(f"pair ({i}, {j}) is not covered by any outer region")
            a = cover[0]
        blk = pair_covariance(problem, q, a, i, j)
        C[off[i]:off[i + 1], off[j]:off[j + 1]] = blk
        C[off[j]:off[j + 1], off[i]:off[i + 1]] = blk.T
    return CMatrix(C, problem.fg.cards)


def violation(C: CMatrix, chi: ChiMatrix, entries) -> ViolationVector:
    """Delta = C - chi for each constraint entry.

    ``entries`` is a sequence of (i, u, j, w, region) with u and w coefficient
    vectors over the states of i and j.
    """
    if C.values.shape != chi.values.shape:
        raise ValueError(f"shape mismatch {C.values.shape} vs {chi.values.shape}")
    n = len(entries)
    cv, xv, reg = np.zeros(n), np.zeros(n), np.zeros(n, dtype=int)
    for c, (i, u, j, w, a) in enumerate(entries):
        cv[c] = C.stat(i, u, j, w)
        xv[c] = chi.stat(i, u, j, w)
        reg[c] = a
    return ViolationVector(cv - xv, reg, cv, xv)
