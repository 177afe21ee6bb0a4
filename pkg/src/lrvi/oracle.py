"""Brute-force reference statistics by full enumeration.

Everything is indexed in the indicator ("delta") basis: the flat index of
statistic ``delta(x_i = y)`` is ``offsets[i] + y``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_model import FactorGraph, FactorTable

DEFAULT_CAP = 2**24
CHUNK = 2**16
# up to this many states the joint table is held in memory as one array
DENSE_LIMIT = 2**22


class StateSpaceTooLarge(ValueError):
    pass


def offsets(cards) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(cards)]).astype(int)


@dataclass
class ExactStats:
    log_Z: float
    single_marginals: list[np.ndarray]
    pair_marginals: dict[tuple[int, int], np.ndarray]
    covariance: np.ndarray
    map_state: tuple[int, ...]
    cards: tuple[int, ...]

    @property
    def marginal_vector(self) -> np.ndarray:
        return np.concatenate(self.single_marginals)

    def spin_covariance(self) -> np.ndarray:
        """Covariance of spins ``x = delta_1 - delta_0`` for all-binary models."""
        if any(c != 2 for c in self.cards):
            raise ValueError("spin basis needs two-state variables")
        P = spin_projector(len(self.cards))
        return P @ self.covariance @ P.T

    def magnetizations(self) -> np.ndarray:
        return np.array([m[1] - m[0] for m in self.single_marginals])


@dataclass(frozen=True)
class PerturbationSpec:
    target: tuple[int, int]
    magnitude: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.magnitude):
            raise ValueError("perturbation magnitude must be finite")


def spin_projector(n: int) -> np.ndarray:
    """Map delta-basis vectors of ``n`` binary variables to spin components."""
    P = np.zeros((n, 2 * n))
    for i in range(n):
        P[i, 2 * i] = -1.0
        P[i, 2 * i + 1] = 1.0
    return P


def _log_tables(fg: FactorGraph):
    out = []
    for f in fg.factors:
        with np.errstate(divide="ignore"):
            out.append(np.log(f.table))
    return out


def _dense(fg: FactorGraph, want_second: bool):
    """Whole joint table as an n-d array; moments by summing out axes."""
    n = fg.num_vars
    logp = np.zeros(fg.cards)
    for f, lt in zip(fg.factors, _log_tables(fg)):
        arr = lt.reshape(f.cards, order="F")
        order = np.argsort(f.members)
        arr = arr.transpose(order)
        shape = [1] * n
        for k in order:
            shape[f.members[k]] = f.cards[k]
        logp += arr.reshape(shape)
    shift = logp.max()
    if shift == -np.inf:
        raise ValueError("model has zero total weight")
    w = np.exp(logp - shift)
    Z = w.sum()
    p = w / Z
    xmap = tuple(int(v) for v in np.unravel_index(int(np.argmax(logp)), logp.shape))
    off = offsets(fg.cards)
    axes = set(range(n))
    m1 = np.concatenate([p.sum(axis=tuple(axes - {i})) for i in range(n)])
    m2 = None
    if want_second:
        m2 = np.diag(m1)
        for i in range(n):
            # variables before i are summed out once per row of blocks
            rest = p.sum(axis=tuple(range(i))) if i else p
            for j in range(i + 1, n):
                tab = rest.sum(axis=tuple(k for k in range(rest.ndim) if k not in (0, j - i)))
                m2[off[i]:off[i + 1], off[j]:off[j + 1]] = tab
                m2[off[j]:off[j + 1], off[i]:off[i + 1]] = tab.T
    return shift + np.log(Z), m1, m2, xmap


def _enumerate(fg: FactorGraph, cap: int, want_second: bool):
    """Brute-force moments over every configuration.

    Small state spaces go through :func:`_dense`; larger ones are streamed in
    lexicographic chunks (variable 0 slowest).
    """
    cards = np.array(fg.cards, dtype=np.int64)
    n = len(cards)
    total = int(np.prod(cards, dtype=object))
    if total > cap:
        raise StateSpaceTooLarge(f"state space {total} exceeds enumeration cap {cap}")
    if total <= DENSE_LIMIT:
        return _dense(fg, want_second)
    return _stream(fg, want_second)


def _stream(fg: FactorGraph, want_second: bool):
    cards = np.array(fg.cards, dtype=np.int64)
    n = len(cards)
    total = int(np.prod(cards, dtype=object))
    # lexicographic: last variable fastest
    place = np.ones(n, dtype=np.int64)
    for k in range(n - 2, -1, -1):
        place[k] = place[k + 1] * cards[k + 1]
    logt = _log_tables(fg)
    strides = []
    for f in fg.factors:
        s = np.ones(len(f.cards), dtype=np.int64)
        for k in range(1, len(f.cards)):
            s[k] = s[k - 1] * f.cards[k - 1]
        strides.append(s)
    off = offsets(fg.cards)
    dim = int(off[-1])
    shift = -np.inf
    Z = 0.0
    m1 = np.zeros(dim)
    m2 = np.zeros((dim, dim)) if want_second else None
    best = (-np.inf, None)
    for start in range(0, total, CHUNK):
        idx = np.arange(start, min(total, start + CHUNK), dtype=np.int64)
        X = (idx[:, None] // place[None, :]) % cards[None, :]
        logp = np.zeros(idx.size)
        for f, lt, s in zip(fg.factors, logt, strides):
            lin = X[:, list(f.members)] @ s
            logp += lt[lin]
        cmax = logp.max()
        if cmax > best[0]:
            best = (cmax, tuple(int(v) for v in X[int(np.argmax(logp))]))
        if cmax == -np.inf:
            continue
        if cmax > shift:
            scale = np.exp(shift - cmax) if np.isfinite(shift) else 0.0
            Z *= scale
            m1 *= scale
            if m2 is not None:
                m2 *= scale
            shift = cmax
        w = np.exp(logp - shift)
        Z += w.sum()
        onehot = np.zeros((idx.size, dim))
        rows = np.arange(idx.size)
        for i in range(n):
            onehot[rows, off[i] + X[:, i]] = 1.0
        m1 += w @ onehot
        if m2 is not None:
            m2 += (onehot * w[:, None]).T @ onehot
    if not Z > 0:
        raise ValueError("model has zero total weight")
    m1 = m1 / Z
    if m2 is not None:
        m2 = m2 / Z
    return shift + np.log(Z), m1, m2, best[1]


def exact_stats(fg: FactorGraph, pairs=None, cap: int = DEFAULT_CAP) -> ExactStats:
    """Partition function, marginals, delta-basis covariance and a MAP state.

    ``pairs`` selects which pair marginal tables to materialize; ``None`` means
    every pair that shares a factor, ``"all"`` means every pair.
    """
    log_Z, m1, m2, xmap = _enumerate(fg, cap, want_second=True)
    off = offsets(fg.cards)
    singles = [m1[off[i] : off[i + 1]].copy() for i in range(fg.num_vars)]
    cov = m2 - np.outer(m1, m1)
    cov = 0.5 * (cov + cov.T)
    if pairs is None:
        pairs = sorted(
            {
                (min(a, b), max(a, b))
                for f in fg.factors
                for a in f.members
                for b in f.members
                if a != b
            }
        )
    elif pairs == "all":
        pairs = [(i, j) for i in range(fg.num_vars) for j in range(i + 1, fg.num_vars)]
    pair_tabs = {
        (i, j): m2[off[i] : off[i + 1], off[j] : off[j + 1]].copy() for i, j in pairs
    }
    return ExactStats(float(log_Z), singles, pair_tabs, cov, xmap, fg.cards)


def exact_marginals(fg: FactorGraph, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Flat delta-basis marginal vector only (cheaper than ``exact_stats``)."""
    return _enumerate(fg, cap, want_second=False)[1]


def log_partition(fg: FactorGraph, cap: int = DEFAULT_CAP) -> float:
    return float(_enumerate(fg, cap, want_second=False)[0])


def perturbed(fg: FactorGraph, i: int, y: int, nu: float) -> FactorGraph:
    """Append the factor ``exp(nu * delta(x_i = y))``."""
    tab = np.ones(fg.cards[i])
    tab[y] = np.exp(nu)
    return FactorGraph(fg.cards, fg.factors + (FactorTable((i,), (fg.cards[i],), tab),))


def exact_response_fd(
    fg: FactorGraph, spec: PerturbationSpec, eps: float = 1e-4, cap: int = DEFAULT_CAP
) -> np.ndarray:
    """Central difference of all delta-basis means with respect to ``nu_{i,y}``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    i, y = spec.target
    if not 0 <= y < fg.cards[i]:
        raise ValueError(f"state {y} out of range for variable {i}")
    plus = exact_marginals(perturbed(fg, i, y, spec.magnitude + eps), cap)
    minus = exact_marginals(perturbed(fg, i, y, spec.magnitude - eps), cap)
    return (plus - minus) / (2 * eps)


def exact_errors(approx_marginals, approx_C, approx_chi, stats: ExactStats):
    """Marginal, marginal-covariance and linear-response errors against ``stats``.

    Covariance estimates are full delta-basis matrices; entries that were not
    estimated should be NaN and stay NaN in the returned tables.
    """
    p = stats.marginal_vector
    q = np.concatenate([np.asarray(m, dtype=float).ravel() for m in approx_marginals]) \
        if isinstance(approx_marginals, (list, tuple)) else np.asarray(approx_marginals, float)
    if q.shape != p.shape:
        raise ValueError(f"marginal shape {q.shape} does not match {p.shape}")
    V = stats.covariance
    C = np.asarray(approx_C, dtype=float)
    chi = np.asarray(approx_chi, dtype=float)
    if C.shape != V.shape or chi.shape != V.shape:
        raise ValueError(f"covariance shapes {C.shape}, {chi.shape} do not match {V.shape}")
    return q - p, C - V, chi - V
