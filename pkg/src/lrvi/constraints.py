"""Covariance-consistency constraints and the outer loop over multipliers.

A constraint ties the marginal covariance of two single-variable statistics,
read from one outer region, to the linear-response estimate of the same
quantity.  Multipliers are found by a per-region Newton step that treats the
incoming messages and incoming responses as frozen ("cavity" update).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import helmert
from scipy.stats import ortho_group

from ._kernels import cavity_violation
from .graph_model import FactorGraph, RegionGraph, build_bethe_regions, two_core
from .inference import (
    InferenceOptions,
    InferenceState,
    NumericalFault,
    RegionProblem,
    StatTerms,
    clbp,
    constraint_covariances,
    double_loop,
    single_marginals,
)
from .response import (
    ChiMatrix,
    CMatrix,
    ResponseOptions,
    ViolationVector,
    _source,
    all_targets,
    clsp,
    marginal_covariance,
    violation,
)

REGIMES = ("none", "diag", "offdiag", "onoff", "blockdiag", "purediag")


class ConstraintError(ValueError):
    pass


# ------------------------------------------------------------------ bases


@dataclass
class StatisticBasis:
    """Per-variable statistic coefficient vectors (rows) over the variable's states."""

    vectors: list
    kind: str = "orthonormal"

    @classmethod
    def orthonormal(cls, cards, seed=None):
        """Helmert-type basis orthogonal to the constant; optionally rotated.

        Two-state variables get (-1, 1)/sqrt(2), i.e. the spin over sqrt(2).
        ``seed`` applies a seeded random rotation inside each variable's
        (Y-1)-dimensional space; for two states that is a sign flip.
        """
        rng = np.random.default_rng(seed) if seed is not None else None
        vecs = []
        for Y in cards:
            H = np.array([[-1.0, 1.0]]) / np.sqrt(2.0) if Y == 2 else helmert(Y)
            if rng is not None:
                R = ortho_group.rvs(Y - 1, random_state=rng) if Y > 2 else np.array(
                    [[rng.choice([-1.0, 1.0])]])
                H = R @ H
            vecs.append(H)
        return cls(vecs, "orthonormal")

    @classmethod
    def delta(cls, cards):
        return cls([np.eye(Y)[: Y - 1] for Y in cards], "delta")

    def __getitem__(self, i):
        return self.vectors[i]


def make_basis(cards, basis="orthonormal", seed=None) -> StatisticBasis:
    if isinstance(basis, StatisticBasis):
        return basis
    if basis == "orthonormal":
        return StatisticBasis.orthonormal(cards, seed)
    if basis == "delta":
        return StatisticBasis.delta(cards)
    raise ConstraintError(f"unknown basis {basis!r}")


# ------------------------------------------------------------------ specs


@dataclass(frozen=True)
class ConstraintEntry:
    i: int
    u: tuple
    j: int
    w: tuple
    kind: str  # "diag" or "off"

    @property
    def same_stat(self):
        return self.i == self.j and self.u == self.w


@dataclass
class ConstraintSpec:
    entries: list
    regime: str
    scope: frozenset
    excluded: frozenset = frozenset()


@dataclass
class ConstraintAssignment:
    spec: ConstraintSpec
    region: np.ndarray

    def omega(self, a):
        return [c for c, r in enumerate(self.region) if r == a]


def degenerate_variables(fg: FactorGraph) -> set:
    """Variables with a state forced to zero probability by some factor."""
    bad = set()
    for f in fg.factors:
        arr = f.array()
        for k, v in enumerate(f.members):
            other = tuple(a for a in range(arr.ndim) if a != k)
            if np.any(arr.max(axis=other) <= 0 if other else arr <= 0):
                bad.add(v)
    return bad


def build_constraints(fg: FactorGraph, regime: str, basis="orthonormal", scope=None,
                      potts_diag_count: int = 3, approximation: str = "bethe",
                      rg: RegionGraph | None = None, seed=None) -> ConstraintSpec:
    """Enumerate constraint entries for a regime.

    ``scope`` is a variable set, ``"2core"`` (default) or ``"all"``.
    Diagonal entries on a Y-state variable cover the upper triangle of the
    (Y-1)x(Y-1) basis block; ``potts_diag_count=4`` instead takes every
    ordered pair, so a 3-state variable gets four (one duplicated) entries.
    """
    if regime not in REGIMES:
        raise ConstraintError(f"unknown regime {regime!r}")
    if approximation == "mean-field" and regime not in ("none", "diag", "blockdiag", "purediag"):
        raise ConstraintError("mean-field admits diagonal constraints only")
    if potts_diag_count not in (3, 4):
        raise ConstraintError("potts_diag_count must be 3 or 4")
    rg = rg if rg is not None else build_bethe_regions(fg)
    if scope is None or scope == "2core":
        scope = two_core(fg)
    elif scope == "all":
        scope = frozenset(range(fg.num_vars))
    else:
        scope = frozenset(int(v) for v in scope)
    bad = degenerate_variables(fg) & scope
    scope = frozenset(scope - bad)
    B = make_basis(fg.cards, basis, seed)
    entries = []
    if regime in ("diag", "blockdiag", "onoff"):
        for i in sorted(scope):
            H = B[i]
            r = H.shape[0]
            if potts_diag_count == 4:
                idx = [(s, t) for s in range(r) for t in range(r)]
            else:
                idx = [(s, t) for s in range(r) for t in range(s, r)]
            for s, t in idx:
                entries.append(ConstraintEntry(i, tuple(H[s]), i, tuple(H[t]), "diag"))
    if regime == "purediag":
        for i in sorted(scope):
            for y in range(fg.cards[i]):
                e = tuple(np.eye(fg.cards[i])[y])
                entries.append(ConstraintEntry(i, e, i, e, "diag"))
    if regime in ("offdiag", "onoff"):
        pairs = set()
        for r in rg.outer:
            vs = [v for v in r.variables if v in scope]
            for x in vs:
                for y in vs:
                    if x < y:
                        pairs.add((x, y))
        for i, j in sorted(pairs):
            for u in B[i]:
                for w in B[j]:
                    entries.append(ConstraintEntry(i, tuple(u), j, tuple(w), "off"))
    return ConstraintSpec(entries, regime, frozenset(scope), frozenset(bad))


def assign_to_regions(spec: ConstraintSpec, rg: RegionGraph) -> ConstraintAssignment:
    """First outer region (in index order) holding both variables of each entry."""
    region = np.zeros(len(spec.entries), dtype=np.int64)
    for c, e in enumerate(spec.entries):
        cover = rg.outer_containing({e.i, e.j})
        if not cover:
            raise ConstraintError(f"constraint on ({e.i}, {e.j}) is not covered by any region")
        region[c] = cover[0]
    return ConstraintAssignment(spec, region)


def make_terms(assign: ConstraintAssignment, n_outer: int) -> StatTerms:
    """Deduplicated per-region statistics for ``RegionProblem``."""
    stat_var = [[] for _ in range(n_outer)]
    stat_coef = [[] for _ in range(n_outer)]
    index = [dict() for _ in range(n_outer)]

    def slot(a, v, coef):
        key = (v, coef)
        if key not in index[a]:
            index[a][key] = len(stat_var[a])
            stat_var[a].append(v)
            stat_coef[a].append(np.array(coef))
        return index[a][key]

    ck, cl = [], []
    for e, a in zip(assign.spec.entries, assign.region):
        ck.append(slot(a, e.i, e.u))
        cl.append(slot(a, e.j, e.w))
    return StatTerms(stat_var, stat_coef, assign.region.copy(), np.array(ck, dtype=np.int64),
                     np.array(cl, dtype=np.int64))


# ------------------------------------------------------------------ lambda


@dataclass
class LambdaSet:
    values: np.ndarray
    damping: float = 0.0
    cycles: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("multipliers must be finite")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")


# ------------------------------------------------------------------ cavity map


@dataclass
class CavityContext:
    """Everything the local map of one region needs, frozen at the current state."""

    a: int
    cons: np.ndarray  # global constraint indices in this region
    s0: np.ndarray  # potential plus incoming messages
    F: np.ndarray  # (K, n) statistics
    ck: np.ndarray
    cl: np.ndarray
    rho: np.ndarray  # (len(cons), n) perturbation plus incoming responses
    m0: np.ndarray


@dataclass
class _RegionLayout:
    cons: np.ndarray
    sl: slice
    gather: np.ndarray  # (edges, n) positions in the flat message array
    rows: np.ndarray  # response rows needed by this region
    weights: np.ndarray  # (len(cons), len(rows)) statistic coefficients


def region_layout(problem: RegionProblem, targets, a: int) -> _RegionLayout:
    t = problem.terms
    cons = np.flatnonzero(t.c_region == a)
    sl = slice(problem.out_off[a], problem.out_off[a + 1])
    n = sl.stop - sl.start
    edges = problem.alpha_edges[problem.alpha_ptr[a]:problem.alpha_ptr[a + 1]]
    gather = np.zeros((len(edges), n), dtype=np.int64)
    for r, e in enumerate(edges):
        gather[r] = problem.msg_off[e] + problem.proj[problem.proj_off[e]:problem.proj_off[e + 1]]
    index = {tg: r for r, tg in enumerate(targets)}
    need, coef = [], {}
    for r, c in enumerate(cons):
        k = t.c_k[c]
        i = t.stat_var[a][k]
        u = t.stat_coef[a][k]
        for y in range(problem.fg.cards[i]):
            if u[y] != 0:
                tr = index[(i, y)]
                if tr not in need:
                    need.append(tr)
                coef[(r, tr)] = coef.get((r, tr), 0.0) + u[y]
    rows = np.array(need, dtype=np.int64)
    W = np.zeros((len(cons), len(need)))
    for (r, tr), v in coef.items():
        W[r, need.index(tr)] = v
    return _RegionLayout(cons, sl, gather, rows, W)


def cavity_context(problem: RegionProblem, state: InferenceState, rs, a: int,
                   src=None, layout: _RegionLayout | None = None) -> CavityContext:
    """``src`` is the perturbation table for ``rs.targets`` (computed if omitted).

    ``layout`` (from :func:`region_layout`) skips the index bookkeeping.
    """
    if layout is not None and src is not None:
        lo = layout
        t = problem.terms
        s0 = problem.base[lo.sl] + state.lmu_ba[lo.gather].sum(axis=0)
        part = src[lo.rows, lo.sl] + rs.dmu_ba[lo.rows[:, None, None], lo.gather].sum(axis=1)
        rho = lo.weights @ part
        m0 = state.means[problem.stat_ptr[a]:problem.stat_ptr[a + 1]].copy()
        return CavityContext(a, lo.cons, s0, problem.stat_tables[a], t.c_k[lo.cons],
                             t.c_l[lo.cons], np.ascontiguousarray(rho), m0)
    if src is None:
        src = _source(problem, rs.targets)
    t = problem.terms
    cons = np.flatnonzero(t.c_region == a)
    sl = slice(problem.out_off[a], problem.out_off[a + 1])
    s0 = problem.base[sl].copy()
    edges = problem.alpha_edges[problem.alpha_ptr[a]:problem.alpha_ptr[a + 1]]
    for e in edges:
        pj = problem.proj[problem.proj_off[e]:problem.proj_off[e + 1]]
        s0 += state.lmu_ba[problem.msg_off[e] + pj]
    F = problem.stat_tables[a]
    rows = {tg: r for r, tg in enumerate(rs.targets)}
    n = sl.stop - sl.start
    rho = np.zeros((len(cons), n))
    for r, c in enumerate(cons):
        k = t.c_k[c]
        i = t.stat_var[a][k]
        u = t.stat_coef[a][k]
        for y in range(problem.fg.cards[i]):
            if u[y] == 0:
                continue
            tr = rows[(i, y)]
            part = src[tr, sl].copy()
            for e in edges:
                pj = problem.proj[problem.proj_off[e]:problem.proj_off[e + 1]]
                part += rs.dmu_ba[tr, problem.msg_off[e] + pj]
            rho[r] += u[y] * part
    m0 = state.means[problem.stat_ptr[a]:problem.stat_ptr[a + 1]].copy()
    return CavityContext(a, cons, s0, F, t.c_k[cons], t.c_l[cons], rho, m0)


def _softmax(s):
    p = np.exp(s - s.max())
    return p / p.sum()


def _solve_means(s, F, B, m0, tol=1e-13, cap=500):
    m = m0.copy()
    for _ in range(cap):
        q = _softmax(s + (B @ m) @ F)
        mn = F @ q
        if np.max(np.abs(mn - m)) <= tol:
            return q, mn
        m = mn
    for _ in range(100):
        q = _softmax(s + (B @ m) @ F)
        Ef = F @ q
        G = Ef - m
        if np.max(np.abs(G)) <= tol:
            break
        Fc = F - Ef[:, None]
        V = (Fc * q) @ Fc.T
        m = m - np.linalg.solve(V @ B - np.eye(len(m)), G)
    q = _softmax(s + (B @ m) @ F)
    return q, F @ q


def local_violation(lam_a, ctx: CavityContext, jacobian=True):
    """Cavity-local violations Delta_a(lam_a) and optionally d Delta_a / d lam_a."""
    lam_a = np.ascontiguousarray(lam_a, dtype=float)
    delta, J = cavity_violation(ctx.s0, np.ascontiguousarray(ctx.F, dtype=float),
                                ctx.ck, ctx.cl, lam_a, ctx.m0, ctx.rho, jacobian, 1e-13, 500)
    return (delta, J) if jacobian else delta


def _local_violation_reference(lam_a, ctx: CavityContext, jacobian=True):
    # plain numpy version of the compiled kernel, kept for cross-checks
    lam_a = np.asarray(lam_a, dtype=float)
    F, ck, cl = ctx.F, ctx.ck, ctx.cl
    Kst, nc = F.shape[0], len(ctx.cons)
    B = np.zeros((Kst, Kst))
    np.add.at(B, (ck, cl), lam_a)
    np.add.at(B, (cl, ck), lam_a)
    g = -(lam_a[:, None] * F[ck] * F[cl]).sum(0) if nc else np.zeros(F.shape[1])
    q, m = _solve_means(ctx.s0 + g, F, B, ctx.m0)
    Fc = F - m[:, None]
    V = (Fc * q) @ Fc.T
    Minv = np.linalg.inv(np.eye(Kst) - V @ B)
    rc = ctx.rho - (ctx.rho @ q)[:, None]
    cov_r = (rc * q) @ Fc.T  # (nc, K)
    dm = cov_r @ Minv.T  # rows: Minv @ cov_r[c]
    graw = ctx.rho + (dm @ B.T) @ F  # (nc, n)
    wl = Fc[cl]  # (nc, n)
    chi = np.sum(graw * wl * q, axis=1)
    C = np.sum(Fc[ck] * wl * q, axis=1)
    delta = C - chi
    if not jacobian:
        return delta
    J = np.zeros((nc, nc))
    gc = graw - (graw @ q)[:, None]
    for d in range(nc):
        Bd = np.zeros((Kst, Kst))
        Bd[ck[d], cl[d]] += 1.0
        Bd[cl[d], ck[d]] += 1.0
        h0 = -F[ck[d]] * F[cl[d]] + (Bd @ m) @ F
        h0c = h0 - h0 @ q
        mdot = Minv @ ((Fc * q) @ h0c)
        sdot = h0 + (B @ mdot) @ F
        sc = sdot - sdot @ q
        qs = q * sc
        Cdot = np.sum(Fc[ck] * wl * qs, axis=1)
        Vdot = (Fc * qs) @ Fc.T
        rdot = (rc * qs) @ Fc.T  # (nc, K)
        Mdot = Vdot @ B + V @ Bd
        dmdot = (dm @ Mdot.T + rdot) @ Minv.T
        gdot = (dm @ Bd.T + dmdot @ B.T) @ F
        chidot = np.sum(gdot * wl * q, axis=1) + np.sum(gc * wl * qs, axis=1)
        J[:, d] = Cdot - chidot
    return delta, J


def newton_lambda_update(delta, jac, clip=1.0, floor=1e-10, noise=1e-12):
    """Newton step on one region's multipliers.

    A multiplier whose Jacobian column has norm below ``floor`` is frozen: a
    unit change moves the violations by less than the floor, so its value
    cannot be resolved in floating point.  The others take the minimum-norm
    least-squares step, which copes with redundant constraints.  If that
    linear model cannot halve a residual above ``noise``, a small gradient step
    is returned and ``flagged`` is True.  Returns (step, flagged).
    """
    delta = np.asarray(delta, dtype=float)
    jac = np.asarray(jac, dtype=float)
    step = np.zeros_like(delta)
    if delta.size == 0 or not np.any(delta):
        return step, False
    flagged = False
    if np.all(np.isfinite(jac)):
        live = np.linalg.norm(jac, axis=0) >= floor
        if live.any():
            step[live] = np.linalg.lstsq(jac[:, live], -delta, rcond=1e-12)[0]
        achieved = np.linalg.norm(jac @ step + delta)
        flagged = bool(achieved > 0.5 * np.linalg.norm(delta) and achieved > noise
                       and live.any())
    else:
        flagged = True
    if flagged:
        g = jac.T @ delta if np.all(np.isfinite(jac)) else delta
        nrm = np.linalg.norm(g)
        step = -0.1 * g / nrm * min(1.0, np.linalg.norm(delta)) if nrm > 0 else np.zeros_like(delta)
    big = np.max(np.abs(step))
    if big > clip:
        step = step * (clip / big)
    return step, flagged


def sherman_morrison_update(chi_ii, chi_jj, C, chi_ij, same_stat=False, spin=False):
    """Linearized single-multiplier update from the inverse-covariance identity.

    Solves chi_ii * dlam * chi_jj = C - chi_ij.  In the generic convention a
    constraint between a statistic and itself enters the inverse covariance
    twice, hence the factor 2; the spin convention (halved diagonal term)
    has no such factor.
    """
    den = chi_ii * chi_jj
    if not spin and same_stat:
        den *= 2.0
    if abs(den) < 1e-300:
        raise ZeroDivisionError("vanishing diagonal response")
    return (C - chi_ij) / den


# ------------------------------------------------------------------ outer loop


@dataclass
class ConstrainedOptions:
    tol_constraint: float = 1e-8
    tol_lambda: float = 1e-9
    lambda_clip: float = 1.0
    lambda_max_abs: float = 1e3
    k_div: int = 20
    max_cycles: int = 2000
    damping: float = 0.0
    damping_step: float = 0.1
    damping_max: float = 0.9
    updater: str = "newton"  # newton | sherman-morrison
    solver: str = "clbp"  # clbp | doubleloop
    belief_tol: float = 1e-12
    jac_floor: float = 1e-10
    delta_noise: float = 1e-16
    saturation_move: float = 0.5
    accel: str = "anderson"  # anderson | none
    accel_depth: int = 5
    stall_cycles: int = 100  # give up when max|delta| has not halved for this long
    inference: InferenceOptions = field(default_factory=InferenceOptions)
    response: ResponseOptions = field(default_factory=ResponseOptions)


@dataclass
class ConstrainedSolution:
    state: InferenceState | None
    chi: ChiMatrix | None
    C: CMatrix | None
    delta: ViolationVector | None
    lam: LambdaSet
    status: str
    cycles: int = 0
    diagnostic: str = ""
    marginals: list = field(default_factory=list)
    wall_ms: float = 0.0
    response: object = None
    trace: np.ndarray | None = None  # per cycle: max|delta|, max|step|, damping

    @property
    def converged(self):
        return self.status == "converged"

    def max_abs_delta(self):
        return self.delta.max_abs() if self.delta is not None else np.inf


def _anderson(lam, step, hist_x, hist_r, beta, clip, fallback):
    """Extrapolate the multiplier iteration from its recent steps.

    The damped update ``lam + beta * step`` is treated as a fixed-point map
    whose residual is ``step``; differences of past iterates and residuals
    give the usual least-squares mixing.  Falls back to the plain update when
    the history is too short or the fit is degenerate.
    """
    if len(hist_r) < 2:
        return fallback
    dX = np.diff(np.array(hist_x), axis=0).T
    dR = np.diff(np.array(hist_r), axis=0).T
    if not np.all(np.isfinite(dR)) or np.linalg.norm(dR) == 0.0:
        return fallback
    gamma = np.linalg.lstsq(dR, step, rcond=1e-10)[0]
    move = beta * step - (dX + beta * dR) @ gamma
    if not np.all(np.isfinite(move)):
        return fallback
    big = np.max(np.abs(move))
    if big > clip:
        move *= clip / big
    return lam + move


def _entries(assign: ConstraintAssignment):
    return [(e.i, np.array(e.u), e.j, np.array(e.w), int(a))
            for e, a in zip(assign.spec.entries, assign.region)]


class ConstrainedSolver:
    """A constraint set compiled against one model; temperatures can change."""

    def __init__(self, fg: FactorGraph, regime: str = "onoff", T: float = 1.0,
                 rg: RegionGraph | None = None, basis="orthonormal", scope=None,
                 potts_diag_count: int = 3, seed=None, opts: ConstrainedOptions | None = None):
        self.fg = fg
        self.rg = rg if rg is not None else build_bethe_regions(fg)
        self.opts = opts or ConstrainedOptions()
        self.spec = build_constraints(fg, regime, basis, scope, potts_diag_count, rg=self.rg,
                                      seed=seed)
        self.assign = assign_to_regions(self.spec, self.rg)
        self.problem = RegionProblem(fg, self.rg, T, make_terms(self.assign, len(self.rg.outer)))
        self.regions = sorted(set(int(a) for a in self.assign.region))
        used = sorted({e.i for e in self.spec.entries} | {e.j for e in self.spec.entries})
        self.targets = all_targets(self.problem, used)

    @property
    def n_constraints(self):
        return len(self.spec.entries)

    def _beliefs(self, lam, state):
        o = self.opts
        inf = InferenceOptions(**{**o.inference.__dict__,
                                  "tol_msg": min(o.inference.tol_msg, o.belief_tol)})
        if o.solver == "doubleloop":
            st = double_loop(self.problem, lam)
            messages_from_beliefs(self.problem, st)
            return st
        return clbp(self.problem, lam, inf, init=state)

    def solve(self, T=None, init: ConstrainedSolution | None = None) -> ConstrainedSolution:
        t0 = time.perf_counter()
        o = self.opts
        p = self.problem
        if T is not None:
            p.set_temperature(T)
        nc = self.n_constraints
        lam = np.zeros(nc) if init is None else init.lam.values.copy()
        lam0 = lam.copy()
        state = None if init is None or init.state is None else init.state
        d = o.damping
        prev_max = np.inf
        grow = 0
        status, diag = "max-iter", ""
        cycle = 0
        rs = None if init is None else init.response
        src = self._src()
        layouts = self._layouts()
        trace = []
        hist_x, hist_r = [], []
        mark, mark_cycle = np.inf, 0
        for cycle in range(1, o.max_cycles + 1):
            try:
                state = self._beliefs(lam, state)
            except NumericalFault as exc:
                status, diag = "no-solution-detected", str(exc)
                state = None
                break
            if not state.converged:
                status, diag = "max-iter", "belief stage did not converge"
                break
            if nc == 0:
                status = "converged"
                break
            rs, _ = clsp(p, state, self.targets, o.response, init=rs, src=src)
            if not rs.converged:
                status, diag = "no-solution-detected", "response stage did not converge"
                break
            step = np.zeros(nc)
            delta = np.zeros(nc)
            weak = np.zeros(nc, dtype=bool)
            for a in self.regions:
                ctx = cavity_context(p, state, rs, a, src, layouts[a])
                if o.updater == "newton":
                    dl, J = local_violation(lam[ctx.cons], ctx)
                    s, _ = newton_lambda_update(dl, J, o.lambda_clip, o.jac_floor)
                    weak[ctx.cons] = np.linalg.norm(J, axis=0) < o.jac_floor
                else:
                    dl = local_violation(lam[ctx.cons], ctx, jacobian=False)
                    s = self._sm_steps(state, rs, ctx, dl)
                delta[ctx.cons] = dl
                step[ctx.cons] = s
            if not np.all(np.isfinite(delta)) or not np.all(np.isfinite(step)):
                status, diag = "no-solution-detected", "non-finite violation or step"
                break
            max_delta = float(np.max(np.abs(delta)))
            trace.append((max_delta, float(np.max(np.abs(step))), d))
            # once the violations are pure round-off, further steps are noise
            settled = float(np.max(np.abs(step))) <= o.tol_lambda or max_delta <= o.delta_noise
            if max_delta <= o.tol_constraint and settled:
                status = "converged"
                # A multiplier that travelled far and then lost all influence
                # has run into saturated beliefs: the violation only vanishes
                # as lambda -> infinity, so there is no finite solution.
                moved = np.abs(lam - lam0)
                if np.any(weak & (moved > o.saturation_move)):
                    k = int(np.argmax(np.where(weak, moved, -1.0)))
                    status = "no-solution-detected"
                    diag = (f"multiplier {k} moved {moved[k]:.3g} and lost influence "
                            "(saturated beliefs, lambda unbounded)")
                break
            if max_delta <= 0.5 * mark:
                mark, mark_cycle = max_delta, cycle
            elif o.stall_cycles and cycle - mark_cycle >= o.stall_cycles:
                status, diag = "max-iter", f"max|delta| did not halve in {o.stall_cycles} cycles"
                break
            if max_delta > prev_max:
                d = min(o.damping_max, round(d + o.damping_step, 10))
                hist_x.clear()
                hist_r.clear()
            new = lam + (1.0 - d) * step
            if o.accel == "anderson" and o.accel_depth > 0:
                hist_x.append(lam.copy())
                hist_r.append(step.copy())
                del hist_x[:-(o.accel_depth + 1)], hist_r[:-(o.accel_depth + 1)]
                new = _anderson(lam, step, hist_x, hist_r, 1.0 - d, o.lambda_clip, new)
            big_old, big_new = np.max(np.abs(lam)), np.max(np.abs(new))
            grow = grow + 1 if (big_new > big_old and max_delta >= prev_max) else 0
            prev_max = max_delta
            lam = new
            if big_new > o.lambda_max_abs:
                status, diag = "no-solution-detected", f"|lambda| exceeded {o.lambda_max_abs:g}"
                break
            if grow >= o.k_div:
                status, diag = "no-solution-detected", f"lambda grew for {o.k_div} cycles"
                break
        sol = ConstrainedSolution(state, None, None, None, LambdaSet(lam, d, cycle), status, cycle,
                                  diag)
        sol.response = rs
        sol.trace = np.array(trace).reshape(-1, 3)
        if state is not None:
            self._finish(sol)
        sol.wall_ms = 1e3 * (time.perf_counter() - t0)
        return sol

    def _layouts(self):
        if getattr(self, "_layout_cache", None) is None:
            self._layout_cache = {a: region_layout(self.problem, self.targets, a)
                                  for a in self.regions}
        return self._layout_cache

    def _src(self):
        if getattr(self, "_src_cache", None) is None:
            self._src_cache = _source(self.problem, self.targets)
        return self._src_cache

    def _sm_steps(self, state, rs, ctx, dl):
        """Diagonal (one multiplier at a time) linearized updates."""
        t = self.problem.terms
        chi = rs.chi if hasattr(rs, "chi") else None
        if chi is None:
            from .response import assemble_chi

            rs.chi = chi = assemble_chi(self.problem, state, rs)
        out = np.zeros(len(ctx.cons))
        for r, c in enumerate(ctx.cons):
            e = self.spec.entries[c]
            u, w = np.array(e.u), np.array(e.w)
            cii = _chi_diag(chi, e.i, u)
            cjj = _chi_diag(chi, e.j, w)
            out[r] = sherman_morrison_update(cii, cjj, dl[r], 0.0, e.same_stat)
        big = np.max(np.abs(out)) if out.size else 0.0
        if big > self.opts.lambda_clip:
            out *= self.opts.lambda_clip / big
        return out

    def _finish(self, sol: ConstrainedSolution):
        p = self.problem
        state = sol.state
        sol.marginals = single_marginals(p, state)
        if state.converged:
            _, chi = clsp(p, state, None, self.opts.response)
            sol.chi = chi
            regions = {}
            for e, a in zip(self.spec.entries, self.assign.region):
                regions.setdefault((min(e.i, e.j), max(e.i, e.j)), int(a))
            sol.C = marginal_covariance(p, state, regions=regions)
            sol.delta = violation(sol.C, chi, _entries(self.assign))


def _chi_diag(chi: ChiMatrix, j, w):
    v = chi.stat(j, w, j, w)
    if not np.isfinite(v):
        raise ConstraintError(f"no response row for variable {j}")
    return v


def messages_from_beliefs(problem: RegionProblem, state: InferenceState):
    """Fit inner-to-outer log messages that reproduce the current outer beliefs.

    For each outer region the log belief minus potential, tilt and the
    self-consistent mean term is decomposed (least squares) into a sum of
    functions of the inner regions it contains.
    """
    tilt, bmat = problem.lambda_tables(state.lam)
    for a in range(problem.n_outer):
        sl = slice(problem.out_off[a], problem.out_off[a + 1])
        Ka = problem.stat_ptr[a + 1] - problem.stat_ptr[a]
        F = problem.stat_tables[a]
        r = state.lq_out[sl] - problem.base[sl] - tilt[sl]
        if Ka:
            B = bmat[problem.bmat_off[a]:problem.bmat_off[a + 1]].reshape(Ka, Ka)
            m = F @ np.exp(state.lq_out[sl])
            state.means[problem.stat_ptr[a]:problem.stat_ptr[a + 1]] = m
            r = r - (B @ m) @ F
        edges = problem.alpha_edges[problem.alpha_ptr[a]:problem.alpha_ptr[a + 1]]
        cols, spans = [], []
        for e in edges:
            nb = problem.msg_off[e + 1] - problem.msg_off[e]
            pj = problem.proj[problem.proj_off[e]:problem.proj_off[e + 1]]
            cols.append(np.eye(nb)[pj])
            spans.append((e, nb))
        if not cols:
            continue
        D = np.hstack(cols + [np.ones((sl.stop - sl.start, 1))])
        ok = np.isfinite(r)
        coef = np.linalg.lstsq(D[ok], r[ok], rcond=None)[0]
        pos = 0
        for e, nb in spans:
            v = coef[pos:pos + nb]
            state.lmu_ba[problem.msg_off[e]:problem.msg_off[e + 1]] = v - np.log(np.exp(v).sum())
            pos += nb


def solve_constrained(fg: FactorGraph, regime: str = "onoff", T: float = 1.0,
                      opts: ConstrainedOptions | None = None, rg: RegionGraph | None = None,
                      basis="orthonormal", scope=None, potts_diag_count: int = 3, seed=None,
                      init: ConstrainedSolution | None = None) -> ConstrainedSolution:
    solver = ConstrainedSolver(fg, regime, T, rg, basis, scope, potts_diag_count, seed, opts)
    return solver.solve(T, init)
