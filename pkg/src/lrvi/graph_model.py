"""Discrete factor graphs, temperature scaling and Bethe region graphs.

Tables are stored dense and flat with the first-listed member varying
fastest (the ``.fg`` convention).  ``FactorTable.array()`` returns the same
data reshaped so that axis ``k`` indexes member ``k``.

Two-state (Ising) variables use state 0 for spin -1 and state 1 for spin +1.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class FactorGraphError(ValueError):
    """Raised for malformed factor-graph input."""


@dataclass(frozen=True)
class FactorTable:
    members: tuple[int, ...]
    cards: tuple[int, ...]
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float).ravel()
        object.__setattr__(self, "members", tuple(int(m) for m in self.members))
        object.__setattr__(self, "cards", tuple(int(c) for c in self.cards))
        object.__setattr__(self, "table", table)
        table.setflags(write=False)
        if len(self.members) != len(self.cards):
            raise FactorGraphError("members and cardinalities differ in length")
        if len(set(self.members)) != len(self.members):
            raise FactorGraphError(f"duplicate member ids in factor {self.members}")
        size = int(np.prod(self.cards, dtype=np.int64)) if self.cards else 1
        if table.size != size:
            raise FactorGraphError(
                f"table size {table.size} does not match cardinalities {self.cards}"
            )
        if np.any(~np.isfinite(table)):
            raise FactorGraphError("non-finite table entry")
        if np.any(table < 0):
            raise FactorGraphError("negative table entry")

    def array(self) -> np.ndarray:
        return self.table.reshape(self.cards, order="F")

    def log_array(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.array())


@dataclass(frozen=True)
class FactorGraph:
    cards: tuple[int, ...]
    factors: tuple[FactorTable, ...]

    def __post_init__(self):
        object.__setattr__(self, "cards", tuple(int(c) for c in self.cards))
        object.__setattr__(self, "factors", tuple(self.factors))
        n = len(self.cards)
        if any(c < 2 for c in self.cards):
            raise FactorGraphError("every variable needs at least two states")
        seen = np.zeros(n, dtype=bool)
        for f in self.factors:
            for m, c in zip(f.members, f.cards):
                if not 0 <= m < n:
                    raise FactorGraphError(f"member id {m} out of range")
                if self.cards[m] != c:
                    raise FactorGraphError(f"inconsistent cardinality for variable {m}")
                seen[m] = True
        if n and not seen.all():
            missing = np.flatnonzero(~seen).tolist()
            raise FactorGraphError(f"variables {missing} appear in no factor")

    @property
    def num_vars(self) -> int:
        return len(self.cards)

    def neighbors(self, i: int) -> list[int]:
        return [a for a, f in enumerate(self.factors) if i in f.members]

    def state_space_size(self) -> int:
        return math.prod(self.cards)


@dataclass(frozen=True)
class IsingModel:
    """Pairwise spin model ``exp(sum J_ij x_i x_j + sum h_i x_i)``."""

    n: int
    edges: tuple[tuple[int, int], ...]
    J: tuple[float, ...]
    h: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        object.__setattr__(self, "J", tuple(float(v) for v in self.J))
        object.__setattr__(self, "h", tuple(float(v) for v in self.h))
        if len(self.edges) != len(self.J) or len(self.h) != self.n:
            raise FactorGraphError("inconsistent Ising model sizes")
        for i, j in self.edges:
            if i == j or not (0 <= i < self.n and 0 <= j < self.n):
                raise FactorGraphError(f"bad edge ({i}, {j})")

    def to_factor_graph(self) -> FactorGraph:
        """Edge factors first (in edge order), then one field factor per spin."""
        spins = np.array([-1.0, 1.0])
        factors = []
        for (i, j), J in zip(self.edges, self.J):
            # first member fastest: entries (x_i, x_j) = (-,-), (+,-), (-,+), (+,+)
            tab = np.exp(J * np.outer(spins, spins)).ravel(order="F")
            factors.append(FactorTable((i, j), (2, 2), tab))
        for i, h in enumerate(self.h):
            factors.append(FactorTable((i,), (2,), np.exp(h * spins)))
        return FactorGraph((2,) * self.n, tuple(factors))

    def scaled(self, T: float) -> "IsingModel":
        if not T > 0:
            raise ValueError("temperature must be positive")
        return IsingModel(self.n, self.edges, [J / T for J in self.J], [h / T for h in self.h])


# ---------------------------------------------------------------- file format


def _tokens(text: str) -> list[str]:
    return text.split()


def load_factor_graph(text: str, floor: float | None = None) -> FactorGraph:
    """Parse the plain-text ``.fg`` format.

    ``floor`` clamps zero entries to that value (off by default).
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def take() -> str:
        nonlocal pos
        if pos >= len(lines):
            raise FactorGraphError("unexpected end of input")
        pos += 1
        return lines[pos - 1]

    try:
        nfactors = int(take())
    except ValueError as exc:
        raise FactorGraphError("malformed header: expected factor count") from exc
    if nfactors < 0:
        raise FactorGraphError("malformed header: negative factor count")
    raw = []
    cards: dict[int, int] = {}
    for _ in range(nfactors):
        try:
            nmem = int(take())
            members = [int(t) for t in _tokens(take())] if nmem else []
            fcards = [int(t) for t in _tokens(take())] if nmem else []
            nent = int(take())
        except FactorGraphError:
            raise
        except ValueError as exc:
            raise FactorGraphError(f"malformed factor block near line {pos}") from exc
        if len(members) != nmem or len(fcards) != nmem:
            raise FactorGraphError(f"factor member count mismatch near line {pos}")
        if len(set(members)) != nmem:
            raise FactorGraphError(f"duplicate member ids {members}")
        size = math.prod(fcards)
        if not 0 <= nent <= size:
            raise FactorGraphError(
                f"table-size mismatch: {nent} entries for cardinalities {fcards}"
            )
        table = np.zeros(size)
        listed = set()
        for _ in range(nent):
            parts = _tokens(take())
            if len(parts) != 2:
                raise FactorGraphError(f"malformed table entry near line {pos}")
            try:
                idx, val = int(parts[0]), float(parts[1])
            except ValueError as exc:
                raise FactorGraphError(f"malformed table entry near line {pos}") from exc
            if not 0 <= idx < size:
                raise FactorGraphError(
                    f"table-size mismatch: index {idx} out of range for cardinalities {fcards}"
                )
            if idx in listed:
                raise FactorGraphError(f"table index {idx} listed twice")
            if not val >= 0 or not math.isfinite(val):
                raise FactorGraphError("negative or non-finite table entry")
            listed.add(idx)
            table[idx] = val
        for m, c in zip(members, fcards):
            if cards.setdefault(m, c) != c:
                raise FactorGraphError(f"inconsistent cardinality for variable {m}")
        raw.append((members, fcards, table))
    if pos != len(lines):
        raise FactorGraphError("trailing content after last factor")
    n = max(cards) + 1 if cards else 0
    if set(cards) != set(range(n)):
        raise FactorGraphError("variable labels must be contiguous from 0")
    factors = []
    for members, fcards, table in raw:
        if floor is not None:
            table = np.where(table == 0.0, floor, table)
        factors.append(FactorTable(members, fcards, table))
    return FactorGraph(tuple(cards[i] for i in range(n)), tuple(factors))


def save_factor_graph(fg: FactorGraph) -> str:
    """Serialize to ``.fg`` text; zero entries are omitted, values use ``repr``."""
    out = io.StringIO()
    out.write(f"{len(fg.factors)}\n")
    for f in fg.factors:
        out.write("\n")
        out.write(f"{len(f.members)}\n")
        out.write(" ".join(str(m) for m in f.members) + "\n")
        out.write(" ".join(str(c) for c in f.cards) + "\n")
        nz = np.flatnonzero(f.table)
        out.write(f"{nz.size}\n")
        for k in nz:
            out.write(f"{k} {float(f.table[k])!r}\n")
    return out.getvalue()


def read_factor_graph(path, floor: float | None = None) -> FactorGraph:
    with open(path) as fh:
        return load_factor_graph(fh.read(), floor=floor)


def write_factor_graph(fg: FactorGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(save_factor_graph(fg))


# --------------------------------------------------------------- temperature


def scale_temperature(fg: FactorGraph, T: float) -> FactorGraph:
    """Raise every table entry to the power ``1/T``; zeros stay zero."""
    if not (T > 0 and math.isfinite(T)):
        raise ValueError(f"temperature must be positive and finite, got {T}")
    if T == 1.0:
        return fg
    factors = []
    for f in fg.factors:
        with np.errstate(divide="ignore"):
            logt = np.log(f.table)
        tab = np.where(f.table > 0, np.exp(logt / T), 0.0)
        factors.append(FactorTable(f.members, f.cards, tab))
    return FactorGraph(fg.cards, tuple(factors))


# -------------------------------------------------------------- region graphs


@dataclass(frozen=True)
class OuterRegion:
    variables: tuple[int, ...]
    factors: tuple[int, ...]


@dataclass(frozen=True)
class InnerRegion:
    variables: tuple[int, ...]
    counting: int


@dataclass(frozen=True)
class RegionGraph:
    """Outer regions, counted inner regions and (outer, inner) containment edges.

    Region variable tuples are kept sorted; tables over a region use the same
    first-fastest linearization as factor tables.
    """

    outer: tuple[OuterRegion, ...]
    inner: tuple[InnerRegion, ...]
    edges: tuple[tuple[int, int], ...]

    def inner_neighbors(self, b: int) -> list[int]:
        return [a for a, bb in self.edges if bb == b]

    def outer_neighbors(self, a: int) -> list[int]:
        return [b for aa, b in self.edges if aa == a]

    def outer_containing(self, variables: Iterable[int]) -> list[int]:
        vs = set(variables)
        return [a for a, r in enumerate(self.outer) if vs <= set(r.variables)]


def build_bethe_regions(fg: FactorGraph) -> RegionGraph:
    outer = tuple(
        OuterRegion(tuple(sorted(f.members)), (a,)) for a, f in enumerate(fg.factors)
    )
    k = np.zeros(fg.num_vars, dtype=int)
    for r in outer:
        k[list(r.variables)] += 1
    inner = tuple(InnerRegion((i,), int(1 - k[i])) for i in range(fg.num_vars))
    edges = tuple(
        (a, i) for i in range(fg.num_vars) for a, r in enumerate(outer) if i in r.variables
    )
    return RegionGraph(outer, inner, edges)


def validate_region_graph(rg: RegionGraph, fg: FactorGraph) -> list[str]:
    """Return a list of violated region-graph invariants (empty when valid)."""
    problems = []
    owner: dict[int, list[int]] = {}
    for a, r in enumerate(rg.outer):
        for fa in r.factors:
            owner.setdefault(fa, []).append(a)
            if not 0 <= fa < len(fg.factors):
                problems.append(f"outer region {a} references unknown factor {fa}")
                continue
            if not set(fg.factors[fa].members) <= set(r.variables):
                problems.append(f"factor {fa} not contained in outer region {a}")
    for fa in range(len(fg.factors)):
        where = owner.get(fa, [])
        if len(where) != 1:
            problems.append(f"factor {fa} assigned to {len(where)} outer regions {where}")
    covered = set().union(*(set(r.variables) for r in rg.outer)) if rg.outer else set()
    missing = set(range(fg.num_vars)) - covered
    if missing:
        problems.append(f"variables {sorted(missing)} not covered by any outer region")
    for a, b in rg.edges:
        if not (0 <= a < len(rg.outer) and 0 <= b < len(rg.inner)):
            problems.append(f"edge ({a}, {b}) references unknown region")
            continue
        if not set(rg.inner[b].variables) <= set(rg.outer[a].variables):
            problems.append(f"inner region {b} is not a subset of connected outer region {a}")
    for b, r in enumerate(rg.inner):
        if r.counting != int(r.counting):
            problems.append(f"inner region {b} has non-integer counting number")
        if not rg.inner_neighbors(b):
            problems.append(f"inner region {b} is connected to no outer region")
    return problems


def two_core(fg: FactorGraph) -> frozenset[int]:
    """Variables left after recursively peeling variables in at most one outer region.

    Only regions that still hold at least two surviving variables count, so
    single-variable (field) factors never keep a variable in the core.
    """
    regions = [set(f.members) for f in fg.factors]
    alive = set(range(fg.num_vars))
    changed = True
    while changed:
        changed = False
        for i in sorted(alive):
            live = sum(1 for r in regions if i in r and len(r & alive) >= 2)
            if live <= 1:
                alive.discard(i)
                changed = True
    return frozenset(alive)


def remove_factor(fg: FactorGraph, a: int) -> FactorGraph:
    """Drop factor ``a``; variables left uncovered get a flat unary factor."""
    factors = [f for b, f in enumerate(fg.factors) if b != a]
    covered = {m for f in factors for m in f.members}
    for i in range(fg.num_vars):
        if i not in covered:
            factors.append(FactorTable((i,), (fg.cards[i],), np.ones(fg.cards[i])))
    return FactorGraph(fg.cards, tuple(factors))


def pairwise_factor_graph(
    cards: Sequence[int],
    edges: Sequence[tuple[int, int]],
    pair_tables: Sequence[np.ndarray],
    unary_tables: Sequence[np.ndarray] | None = None,
) -> FactorGraph:
    """Build a factor graph from ``(Y_i, Y_j)``-shaped pair arrays and unary vectors."""
    factors = []
    for (i, j), tab in zip(edges, pair_tables):
        tab = np.asarray(tab, dtype=float)
        factors.append(FactorTable((i, j), (cards[i], cards[j]), tab.ravel(order="F")))
    if unary_tables is not None:
        for i, tab in enumerate(unary_tables):
            factors.append(FactorTable((i,), (cards[i],), np.asarray(tab, dtype=float)))
    return FactorGraph(tuple(cards), tuple(factors))
