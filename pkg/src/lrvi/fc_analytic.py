"""Closed-form treatment of the fully connected ferromagnet.

The model is p(x) ~ exp[(h + sum_i x_i)^2 / (2T)] over N spins, i.e. every
pair coupled with J = 1 and every spin with field h, all divided by T.

For symmetric solutions the Bethe pair belief is written with natural
parameters,

    q_ij(x1, x2) ~ exp(J' x1 x2 + g (x1 + x2)),

which keeps the table strictly positive and lets every quantity below be
evaluated without overflow even at T ~ 0.02.  Stationarity in C fixes
J' = 1/T - lambda1, and stationarity in M reads

    (N-1) g = h/T + (N-1) lambda1 M + lambda0 M + (N-2) atanh(M).

The unknowns are the cavity field hc = T g plus whichever multipliers the
regime activates.  Multipliers follow the spin convention: lambda0 multiplies
(1 - M^2)/2 per variable and lambda1 multiplies C per pair.  In the generic
pipeline's orthonormal statistic x/sqrt(2) these are lambda_ii and
lambda_ij / 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import sympy as sp
from scipy.optimize import brentq
from scipy.special import expit, gammaln, logsumexp

REGIMES = ("none", "diag", "offdiag", "onoff", "mf", "mf-diag")
_ALIASES = {
    "bethe": "none", "bethe-none": "none", "bethe-diag": "diag", "bethe-offdiag": "offdiag",
    "bethe-onoff": "onoff", "mf-none": "mf",
}


def canonical_regime(regime: str) -> str:
    r = _ALIASES.get(regime.lower(), regime.lower())
    if r not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    return r


@dataclass(frozen=True)
class FCModel:
    N: int
    h: float
    T: float

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need N >= 2")
        if not self.T > 0:
            raise ValueError("need T > 0")

    def at(self, T: float) -> "FCModel":
        return replace(self, T=float(T))


@dataclass
class FCSolution:
    model: FCModel
    regime: str
    M: float
    C: float
    lambda0: float
    lambda1: float
    h_msg: float
    chi_ii: float
    chi_ij: float
    hessian_pd: bool
    pair_nonneg: bool
    residual: float
    iterations: int
    branch: str = ""
    # |d(residual)/d(lambda)| with the field equation solved out; below ~1e-9
    # a multiplier is not determined in double precision
    sensitivity: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.hessian_pd and self.pair_nonneg

    def identifiable(self, name: str, floor: float = 1e-9) -> bool:
        return self.sensitivity.get(name, np.inf) >= floor

    def pair_table(self) -> np.ndarray:
        """Pair belief from (M, C); index 0 is spin -1."""
        s = np.array([-1.0, 1.0])
        return ((1 + self.M * s[:, None]) * (1 + self.M * s[None, :])
                + self.C * np.outer(s, s)) / 4


# ----------------------------------------------------------------- exact


def fc_exact_pair(model: FCModel) -> np.ndarray:
    """Exact p(x_i, x_j) as a 2x2 table (index 0 = spin -1) by an O(N) binomial sum."""
    N, h, T = model.N, model.h, model.T
    if N > 10_000:
        raise ValueError("binomial sum limited to N <= 1e4")
    n = np.arange(N - 1)
    logc = gammaln(N - 1) - gammaln(n + 1) - gammaln(N - 1 - n)
    field_ = h + (N - 2 - 2 * n)
    s = np.array([-1.0, 1.0])
    out = np.empty((2, 2))
    for a in range(2):
        for b in range(2):
            e = (logc + field_ ** 2 / (2 * T) + s[a] * s[b] / T
                 + field_ * (s[a] + s[b]) / T)
            out[a, b] = logsumexp(e)
    out = np.exp(out - logsumexp(out))
    return out


def fc_exact_stats(model: FCModel):
    """(M, C) of the exact pair marginal."""
    p = fc_exact_pair(model)
    s = np.array([-1.0, 1.0])
    M = float(p.sum(1) @ s)
    return M, float(s @ p @ s) - M * M


# ------------------------------------------------------------ messages


def _logcosh(y):
    y = np.abs(y)
    return y + np.log1p(np.exp(-2 * y)) - math.log(2.0)


def _message_map(x, N, h, T):
    # atanh(tanh a tanh b) = (log cosh(a+b) - log cosh(a-b)) / 2, finite for any a, b
    a, b = 1.0 / T, x / T
    return h + (N - 2) * T * 0.5 * (_logcosh(a + b) - _logcosh(a - b))


def fc_bethe_message(model: FCModel, start: float | None = None, tol: float = 1e-14,
                     max_iter: int = 100_000) -> float:
    """Cavity field h_msg solving h_msg = h + (N-2) T atanh[tanh(1/T) tanh(h_msg/T)].

    A spin with N-1 neighbours passes on the messages of the other N-2 edges,
    hence N-2.  The default start at h selects the branch continuous in T with
    the high-temperature root (h_msg -> h); any other ``start`` follows plain
    iteration from there.  Roots are polished by bracketing.
    """
    N, h, T = model.N, model.h, model.T
    if N == 2:
        return float(h)
    x = float(h if start is None else start)
    if start is None and h != 0.0:
        # the map is increasing and concave on the side of h, so exactly one
        # root lies between h and h + sign(h)(N-2)
        sgn = math.copysign(1.0, h)
        lo, hi = h, h + sgn * (N - 2) + sgn
        f = lambda y: _message_map(y, N, h, T) - y
        if f(lo) == 0.0:
            return float(lo)
        return float(brentq(f, min(lo, hi), max(lo, hi), xtol=1e-15, rtol=1e-15, maxiter=500))
    for _ in range(max_iter):
        nxt = float(_message_map(x, N, h, T))
        if abs(nxt - x) <= tol * max(1.0, abs(x)):
            return nxt
        x = nxt
    return x


# ------------------------------------------------- symbolic closures


def _closure_functions():
    M, s, rho, w, l0, l1, N, T = sp.symbols("M s rho w l0 l1 N T", real=True)
    out = {}
    for kind in ("bethe", "mf"):
        if kind == "bethe":
            a = 1 + (N - 1) * rho ** 2 / w - l0 * s
            b = -l1 * s - rho / w
        else:
            a = 1 - l0 * s
            b = -s / T
        den = (a - b) * (a + (N - 1) * b)
        chi_ii = (a + (N - 2) * b) / den
        chi_ij = -b / den
        res = [chi_ii - 1, rho - chi_ij]
        args = (s, rho, w, l0, l1)
        grad = [[sp.diff(r, v) for v in args] for r in res]
        params = (s, rho, w, l0, l1, N, T)
        out[kind] = tuple(_quiet(sp.lambdify(params, e, "math"))
                          for e in ([chi_ii, chi_ij, a, b], res, grad))
    return out


def _quiet(f):
    # overflow to inf/nan is expected far out on a branch; callers check finiteness
    def g(*args):
        with np.errstate(all="ignore"):
            return f(*args)
    return g


_CLOSURE = _closure_functions()


# ------------------------------------------------------------- kernels


def _pair_primitives(g, Jp):
    """M, s = 1-M^2, rho = C/s, w = 1-rho^2, atanh(M) and their (g, J') derivatives."""
    u, v = 2 * Jp, 2 * g
    m = max(abs(u), abs(v))
    cu = 0.5 * (math.exp(u - m) + math.exp(-u - m))
    su = 0.5 * (math.exp(u - m) - math.exp(-u - m))
    cv = 0.5 * (math.exp(v - m) + math.exp(-v - m))
    sv = 0.5 * (math.exp(v - m) - math.exp(-v - m))
    den = cu + cv
    rho = su / den
    w = (math.exp(-2 * m) + 2 * cu * cv + cv * cv) / (den * den)
    A = 0.5 * (np.logaddexp(0.0, u + v) - np.logaddexp(0.0, u - v))
    M = math.tanh(A)
    e = math.exp(-2 * abs(A))
    s = 4 * e / (1 + e) ** 2
    sp_, sm = float(expit(u + v)), float(expit(u - v))
    dA = np.array([sp_ + sm, sp_ - sm])  # d/dg, d/dJ'
    drho = np.array([-2 * su * sv, 2 * (math.exp(-2 * m) + cu * cv)]) / (den * den)
    return dict(M=M, s=s, rho=rho, w=w, A=float(A), dA=dA, dM=s * dA, ds=-2 * M * s * dA,
                drho=drho, dw=-2 * rho * drho)


def _mf_primitives(wf):
    M = math.tanh(wf)
    e = math.exp(-2 * abs(wf))
    s = 4 * e / (1 + e) ** 2
    return dict(M=M, s=s, rho=0.0, w=1.0, A=wf)


class _System:
    """Residuals and Jacobian for one regime at one (N, h, T)."""

    def __init__(self, model: FCModel, regime: str):
        self.m = model
        self.regime = canonical_regime(regime)
        self.mf = self.regime.startswith("mf")
        self.diag = self.regime in ("diag", "onoff", "mf-diag")
        self.off = self.regime in ("offdiag", "onoff")
        self.kind = "mf" if self.mf else "bethe"

    @property
    def size(self):
        return 1 + self.diag + self.off

    def unpack(self, z):
        z = list(z)
        hc = z.pop(0)
        l0 = z.pop(0) if self.diag else 0.0
        l1 = z.pop(0) if self.off else 0.0
        return hc, l0, l1

    def pack(self, hc, l0, l1):
        z = [hc]
        if self.diag:
            z.append(l0)
        if self.off:
            z.append(l1)
        return np.array(z, dtype=float)

    def primitives(self, z):
        hc, l0, l1 = self.unpack(z)
        T = self.m.T
        if self.mf:
            return _mf_primitives(hc / T), l0, l1
        return _pair_primitives(hc / T, 1.0 / T - l1), l0, l1

    def residual(self, z, jac=False):
        N, h, T = self.m.N, self.m.h, self.m.T
        hc, l0, l1 = self.unpack(z)
        P, l0, l1 = self.primitives(z)
        M, A = P["M"], P["A"]
        args = (P["s"], P["rho"], P["w"], l0, l1, N, T)
        if self.mf:
            r1 = -h - (N - 1) * M - T * l0 * M + hc
        else:
            r1 = -h - T * (N - 1) * l1 * M - T * l0 * M + T * (2 - N) * A + (N - 1) * hc
        res = [r1]
        closure = _CLOSURE[self.kind][1](*args)
        if self.diag:
            res.append(closure[0])
        if self.off:
            res.append(closure[1])
        res = np.array(res, dtype=float)
        # closures come out relative to s = 1 - M^2; the absolute forms
        # chi_ii - s and C - chi_ij share the scale of the generic violations
        rel = res[1:].copy()
        res[1:] *= P["s"]
        if not jac:
            return res
        n = self.size
        Jm = np.zeros((n, n))
        cols = {"hc": 0}
        if self.diag:
            cols["l0"] = 1
        if self.off:
            cols["l1"] = 1 + self.diag
        if self.mf:
            dM_dhc = P["s"]  # M = tanh(hc/T) with wf = hc/T, s = sech^2
            Jm[0, 0] = -(N - 1) * dM_dhc / T - l0 * dM_dhc + 1.0
            if self.diag:
                Jm[0, cols["l0"]] = -T * M
            ds_dhc = -2 * M * P["s"] / T
            d = {"hc": np.array([ds_dhc, 0.0, 0.0])}
        else:
            # derivatives of primitives with respect to (hc, l1): g = hc/T, J' = 1/T - l1
            dg = {"hc": 1.0 / T, "l1": 0.0}
            dJ = {"hc": 0.0, "l1": -1.0}
            dprim = {}
            for key in ("hc", "l1"):
                vec = np.array([dg[key], dJ[key]])
                dprim[key] = {k: float(P[k2] @ vec) for k, k2 in
                              (("M", "dM"), ("A", "dA"), ("s", "ds"), ("rho", "drho"),
                               ("w", "dw"))}
            Jm[0, 0] = (-T * (N - 1) * l1 * dprim["hc"]["M"] - T * l0 * dprim["hc"]["M"]
                        + T * (2 - N) * dprim["hc"]["A"] + (N - 1))
            if self.diag:
                Jm[0, cols["l0"]] = -T * M
            if self.off:
                Jm[0, cols["l1"]] = (-T * (N - 1) * M - T * (N - 1) * l1 * dprim["l1"]["M"]
                                     - T * l0 * dprim["l1"]["M"] + T * (2 - N) * dprim["l1"]["A"])
            d = {k: np.array([dprim[k]["s"], dprim[k]["rho"], dprim[k]["w"]]) for k in dprim}
        grad = _CLOSURE[self.kind][2](*args)
        rows = []
        if self.diag:
            rows.append(grad[0])
        if self.off:
            rows.append(grad[1])
        for r, g_ in enumerate(rows, start=1):
            g_ = np.asarray(g_, dtype=float)
            Jm[r, 0] = g_[:3] @ d["hc"]
            if self.diag:
                Jm[r, cols["l0"]] = g_[3]
            if self.off:
                Jm[r, cols["l1"]] = g_[:3] @ d["l1"] + g_[4]
            Jm[r] *= P["s"]
            Jm[r, 0] += rel[r - 1] * d["hc"][0]
            if self.off:
                Jm[r, cols["l1"]] += rel[r - 1] * d["l1"][0]
        return res, Jm

    def solution(self, z, residual, iterations, branch=""):
        N, T = self.m.N, self.m.T
        hc, l0, l1 = self.unpack(z)
        P, _, _ = self.primitives(z)
        chi_ii_s, chi_ij_s, a, b = _CLOSURE[self.kind][0](P["s"], P["rho"], P["w"], l0, l1, N, T)
        s = P["s"]
        C = P["rho"] * s
        pd = (a - b) > 0 and (a + (N - 1) * b) > 0
        sol = FCSolution(self.m, self.regime, P["M"], C, l0, l1, hc, chi_ii_s * s, chi_ij_s * s,
                         bool(pd), True, float(residual), iterations, branch)
        sol.pair_nonneg = bool(np.all(sol.pair_table() >= -1e-15)) if not self.mf else True
        if self.size > 1:
            _, Jm = self.residual(z, jac=True)
            tot = Jm[1:, 1:] - np.outer(Jm[1:, 0], Jm[0, 1:]) / Jm[0, 0]
            names = [n for n, on in (("lambda0", self.diag), ("lambda1", self.off)) if on]
            sol.sensitivity = {n: float(abs(tot[k, k])) for k, n in enumerate(names)}
        return sol


def _frozen(Jm, floor):
    """Multipliers whose own residual barely reacts once the field equation is solved out."""
    if Jm.shape[0] == 1:
        return np.zeros(0, dtype=bool)
    tot = Jm[1:, 1:] - np.outer(Jm[1:, 0], Jm[0, 1:]) / Jm[0, 0]
    return np.abs(np.diag(tot)) < floor


def _newton(system: _System, z0, tol=1e-13, max_iter=100, lam_bound=1e6, floor=1e-10,
            frozen_tol=1e-10):
    """Damped Newton with backtracking on the max-norm residual.

    Multiplier k is frozen when d(residual k)/d(lambda_k), with the field
    equation solved out, falls below ``floor`` (the same rule as the generic
    update), so unresolvable multipliers keep their continuation value
    instead of chasing round-off.  Frozen rows only need |r| <= frozen_tol.
    """
    z = np.array(z0, dtype=float)
    try:
        r, Jm = system.residual(z, jac=True)
    except (OverflowError, ValueError, ZeroDivisionError):
        return None, np.inf, 0
    fz = _frozen(Jm, floor)
    act = np.concatenate([[True], ~fz])

    def measure(res):
        if not np.all(np.isfinite(res)):
            return np.inf, np.inf
        return float(np.max(np.abs(res[act]))), float(np.max(np.abs(res[~act]), initial=0.0))

    norm, side = measure(r)
    for it in range(1, max_iter + 1):
        if not np.isfinite(norm):
            return None, np.inf, it
        if norm <= tol:
            return (z, norm, it - 1) if side <= frozen_tol else (None, side, it - 1)
        step = np.zeros_like(z)
        step[act] = np.linalg.lstsq(Jm[np.ix_(act, act)], -r[act], rcond=1e-14)[0]
        t = 1.0
        for _ in range(40):
            zn = z + t * step
            if np.all(np.abs(zn[1:]) < lam_bound):
                try:
                    nn, ns = measure(system.residual(zn))
                except (OverflowError, ValueError, ZeroDivisionError):
                    nn, ns = np.inf, np.inf
                if np.isfinite(nn) and (nn < norm * (1 - 1e-4 * t) or nn <= tol):
                    break
            t *= 0.5
        else:
            ok = norm <= 1e3 * tol and side <= frozen_tol
            return (z, norm, it) if ok else (None, norm, it)
        z = zn
        r, Jm = system.residual(z, jac=True)
        norm, side = measure(r)
    return (z, norm, max_iter) if norm <= tol and side <= frozen_tol else (None, norm, max_iter)


def fc_chi(M: float, C: float, lambda0: float, model: FCModel, approximation: str = "bethe"):
    """(chi_ii, chi_ij) from the closed-form inverse.

    Raises ZeroDivisionError when (a-b)(a+(N-1)b) vanishes, the signature of a
    mean-field style divergence.  For the mean-field approximation C is ignored.
    """
    N, T = model.N, model.T
    s = 1 - M * M
    if approximation == "mf":
        a = 1 / s - lambda0
        b = -1 / T
    else:
        q = np.array([[(1 - M) ** 2 + C, s - C], [s - C, (1 + M) ** 2 + C]]) / 4
        D = s * s - C * C
        a = (1 + (N - 1) * C * C / D) / s - lambda0
        b = -1 / T + 0.25 * (math.log(q[0, 0]) + math.log(q[1, 1]) - 2 * math.log(q[0, 1])) - C / D
    den = (a - b) * (a + (N - 1) * b)
    if den == 0:
        raise ZeroDivisionError("chi diverges: singular inverse")
    return (a + (N - 2) * b) / den, -b / den


def _seed(model: FCModel, regime: str):
    sys_ = _System(model, regime)
    if sys_.mf:
        # mean-field: iterate M = tanh((h + (N-1) M)/T) from the field's sign
        M = math.copysign(1.0, model.h) if model.h else 0.0
        for _ in range(10_000):
            nxt = math.tanh((model.h + (model.N - 1) * M) / model.T)
            if abs(nxt - M) < 1e-15:
                break
            M = nxt
        return sys_.pack(model.h + (model.N - 1) * M, 0.0, 0.0)
    return sys_.pack(fc_bethe_message(model), 0.0, 0.0)


@dataclass
class Branch:
    label: str
    T: np.ndarray
    solutions: list = field(default_factory=list)  # FCSolution or None per grid point


def fc_continue(N: int, h: float, regime: str, T_grid, label: str = "", min_step=1e-5,
                max_step: float = 0.05, tol: float = 1e-13, z0=None) -> Branch:
    """Follow one solution branch along ``T_grid`` (monotone) in log T.

    The first grid point is solved from the unconstrained seed.  Between grid
    points the log-T step is at most ``max_step`` (small enough that Newton
    cannot hop onto another branch) and is halved whenever Newton fails; below ``min_step``
    (or on loss of validity) the branch is declared ended and every later
    point is None.
    """
    T_grid = np.asarray(T_grid, dtype=float)
    out = Branch(label, T_grid)
    regime = canonical_regime(regime)
    m0 = FCModel(N, h, T_grid[0])
    z = _seed(m0, regime) if z0 is None else np.asarray(z0, dtype=float)
    sys_ = _System(m0, regime)
    z, res, it = _newton(sys_, z, tol)
    if z is None:
        out.solutions = [None] * len(T_grid)
        return out
    sol = sys_.solution(z, res, it, label)
    if not sol.valid:
        out.solutions = [None] * len(T_grid)
        return out
    out.solutions.append(sol)
    alive = True
    for T in T_grid[1:]:
        if not alive:
            out.solutions.append(None)
            continue
        cur = math.log(out.solutions[-1].model.T)
        target = math.log(T)
        step = math.copysign(min(abs(target - cur), max_step), target - cur)
        zc = z
        while cur != target:
            nxt = target if abs(target - cur) <= abs(step) else cur + step
            sys_ = _System(FCModel(N, h, math.exp(nxt)), regime)
            zn, res, it = _newton(sys_, zc, tol)
            ok = zn is not None
            if ok:
                cand = sys_.solution(zn, res, it, label)
                ok = cand.valid
            if ok:
                zc, cur = zn, nxt
                step = math.copysign(min(abs(step) * 1.5, max_step), step)
            else:
                step *= 0.5
                if abs(step) < min_step:
                    alive = False
                    break
        if alive:
            z = zc
            out.solutions.append(sys_.solution(z, res, it, label))
        else:
            out.solutions.append(None)
    return out


def fc_branches(model: FCModel, regime: str, T_high: float = 20.0, T_low: float = 0.02,
                points: int = 60):
    """Both continuation branches evaluated at model.T: {"high": sol|None, "low": sol|None}."""
    res = {}
    T = model.T
    hi = np.geomspace(max(T_high, T), T, points)
    lo = np.geomspace(min(T_low, T), T, points)
    res["high"] = fc_continue(model.N, model.h, regime, hi, "high").solutions[-1]
    res["low"] = fc_continue(model.N, model.h, regime, lo, "low").solutions[-1]
    return res


def fc_solve_constrained(model: FCModel, regime: str, branch: str = "auto", **kw):
    """Symmetric constrained solution at model.T, or None when no branch reaches it.

    ``branch`` picks "high" or "low"; "auto" prefers the high-temperature branch.
    """
    b = fc_branches(model, regime, **kw)
    if branch == "auto":
        return b["high"] if b["high"] is not None else b["low"]
    return b[branch]


def fc_sweep(N: int, h: float, regime: str, T_grid, T_high: float = 20.0, T_low: float = 0.02):
    """Both branches on a shared grid: list of {"T", "high", "low"} dicts, ascending T."""
    Ts = np.sort(np.asarray(T_grid, dtype=float))
    down = np.concatenate([[max(T_high, Ts[-1])], Ts[::-1]])
    up = np.concatenate([[min(T_low, Ts[0])], Ts])
    hi = fc_continue(N, h, regime, down, "high").solutions[1:][::-1]
    lo = fc_continue(N, h, regime, up, "low").solutions[1:]
    return [{"T": float(T), "high": a, "low": b} for T, a, b in zip(Ts, hi, lo)]
