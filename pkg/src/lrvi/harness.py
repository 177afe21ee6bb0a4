"""Model generators, temperature sweeps, error metrics and CSV output.

All randomness goes through ``numpy.random.Generator(PCG64(seed))``; the name
of the bit generator is exported as :data:`RNG_ALGORITHM` and written into
generated model files so an instance can be regenerated elsewhere.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstrainedOptions, ConstrainedSolution, ConstrainedSolver
from .graph_model import FactorGraph, FactorTable, IsingModel, scale_temperature
from .oracle import ExactStats, exact_errors, exact_stats
from .response import marginal_covariance

RNG_ALGORITHM = "PCG64"
ORACLE_LIMIT = 2**20

CSV_COLUMNS = ("T", "status", "iterations", "mad_marginal", "mad_C", "mad_chi",
               "max_abs_delta", "lambda_q1", "lambda_q2", "lambda_q3", "lambda_min",
               "lambda_max", "wall_ms")


def rng_for(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ------------------------------------------------------------------ generators


def gen_fully_connected(N: int, h: float = 1.0) -> FactorGraph:
    """Ferromagnet with unit coupling on every pair and a uniform field ``h``."""
    if N < 2:
        raise ValueError("need at least two spins")
    edges = [(i, j) for i in range(N) for j in range(i + 1, N)]
    return IsingModel(N, edges, np.ones(len(edges)), np.full(N, float(h))).to_factor_graph()


def grid_edges(L: int) -> list[tuple[int, int]]:
    edges = []
    for r in range(L):
        for c in range(L):
            i = r * L + c
            if c + 1 < L:
                edges.append((i, i + 1))
            if r + 1 < L:
                edges.append((i, i + L))
    return edges


def gen_wainwright_jordan(L: int, seed) -> FactorGraph:
    """Open ``L x L`` spin grid, fields on [-0.25, 0.25], couplings on [-1, 1]."""
    if L < 2:
        raise ValueError("grid side must be at least 2")
    rng = rng_for(seed)
    edges = grid_edges(L)
    h = rng.uniform(-0.25, 0.25, L * L)
    J = rng.uniform(-1.0, 1.0, len(edges))
    return IsingModel(L * L, edges, J, h).to_factor_graph()


def random_regular_edges(N: int, degree: int, rng: np.random.Generator,
                         max_tries: int = 10_000) -> list[tuple[int, int]]:
    """Configuration-model pairing, rejecting loops and repeated edges."""
    if (N * degree) % 2:
        raise ValueError("N * degree must be even")
    stubs = np.repeat(np.arange(N), degree)
    for _ in range(max_tries):
        perm = rng.permutation(stubs)
        pairs = perm.reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        keyed = {(min(a, b), max(a, b)) for a, b in pairs.tolist()}
        if len(keyed) == len(pairs):
            return sorted(keyed)
    raise RuntimeError(f"no simple {degree}-regular graph after {max_tries} pairings")


def gen_potts_regular(N: int, seed, states: int = 3, field_weight: float = 4.0) -> FactorGraph:
    """Three-state Potts model on a random 3-regular graph.

    Edge factors are ``exp(J delta(x_i, x_j))`` with ``J`` drawn from {-1, +1};
    every variable also gets ``exp(field_weight * delta(x_i, 0))``.
    """
    if N < 4 or N % 2:
        raise ValueError("N must be even and at least 4")
    rng = rng_for(seed)
    edges = random_regular_edges(N, 3, rng)
    J = rng.choice(np.array([-1.0, 1.0]), size=len(edges))
    eye = np.eye(states)
    factors = []
    for (i, j), Jij in zip(edges, J):
        factors.append(FactorTable((i, j), (states, states), np.exp(Jij * eye).ravel()))
    unary = np.ones(states)
    unary[0] = math.exp(field_weight)
    for i in range(N):
        factors.append(FactorTable((i,), (states,), unary.copy()))
    return FactorGraph((states,) * N, tuple(factors))


# ------------------------------------------------------------------ schedules


@dataclass
class AnnealSchedule:
    T: np.ndarray
    direction: str = "down"

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        if T.ndim != 1 or T.size == 0 or np.any(~np.isfinite(T)) or np.any(T <= 0):
            raise ValueError("temperatures must be a non-empty list of positive numbers")
        d = np.diff(T)
        if self.direction == "down":
            ok = np.all(d < 0)
        elif self.direction == "up":
            ok = np.all(d > 0)
        else:
            raise ValueError(f"direction must be 'up' or 'down', got {self.direction!r}")
        if not ok:
            raise ValueError(f"grid is not strictly monotone in direction {self.direction!r}")
        self.T = T

    @classmethod
    def geometric(cls, t_start: float, t_end: float, steps: int, direction: str | None = None):
        """Points evenly spaced in log T (equivalently in log 1/T)."""
        if steps < 1:
            raise ValueError("need at least one temperature")
        if direction is None:
            direction = "down" if t_end < t_start else "up"
        lo, hi = sorted((t_start, t_end))
        T = np.geomspace(lo, hi, steps) if steps > 1 else np.array([float(t_start)])
        if direction == "down":
            T = T[::-1]
        return cls(T, direction)

    def __len__(self):
        return self.T.size


# ------------------------------------------------------------------ records


@dataclass
class SweepRecord:
    T: float
    status: str
    iterations: int
    mad_marginal: float = math.inf
    mad_C: float = math.inf
    mad_chi: float = math.inf
    max_abs_delta: float = math.inf
    lambda_q1: float = math.nan
    lambda_q2: float = math.nan
    lambda_q3: float = math.nan
    lambda_min: float = math.nan
    lambda_max: float = math.nan
    wall_ms: float = 0.0
    retried: bool = False
    diagnostic: str = ""
    solution: ConstrainedSolution | None = field(default=None, repr=False, compare=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class SweepOptions:
    solver: ConstrainedOptions = field(default_factory=ConstrainedOptions)
    oracle: str = "auto"  # auto | on | off
    oracle_limit: int = ORACLE_LIMIT
    basis: str = "orthonormal"
    scope: str | None = None
    potts_diag_count: int = 3
    seed: int | None = None
    cold_retry: bool = True
    keep_solutions: bool = False


def _use_oracle(fg: FactorGraph, mode: str, limit: int) -> bool:
    if mode == "off":
        return False
    if mode == "on":
        return True
    if mode != "auto":
        raise ValueError(f"oracle mode must be auto, on or off, got {mode!r}")
    return fg.state_space_size() <= limit


def covered_pairs(fg: FactorGraph) -> list[tuple[int, int]]:
    """Distinct variable pairs that share at least one factor."""
    out = set()
    for f in fg.factors:
        for a in f.members:
            for b in f.members:
                if a < b:
                    out.add((a, b))
    return sorted(out)


def _pair_mask(cards, pairs) -> np.ndarray:
    off = np.concatenate([[0], np.cumsum(cards)]).astype(int)
    mask = np.zeros((off[-1], off[-1]), dtype=bool)
    for i, j in pairs:
        mask[off[i]:off[i + 1], off[j]:off[j + 1]] = True
        mask[off[j]:off[j + 1], off[i]:off[i + 1]] = True
    return mask


def solution_errors(solver: ConstrainedSolver, sol: ConstrainedSolution, stats: ExactStats):
    """MAD of marginals, of region covariances and of linear-response estimates.

    Covariance errors are taken over distinct pairs that share a factor,
    in the indicator basis.
    """
    fg = solver.fg
    C = marginal_covariance(solver.problem, sol.state).values
    dq, dC, dchi = exact_errors(sol.marginals, C, sol.chi.values, stats)
    mask = _pair_mask(fg.cards, covered_pairs(fg))
    mad0 = float(np.max(np.abs(dq)))
    if not mask.any():
        return mad0, 0.0, 0.0
    return mad0, float(np.max(np.abs(dC[mask]))), float(np.max(np.abs(dchi[mask])))


def _lambda_stats(values: np.ndarray):
    if values.size == 0:
        return (math.nan,) * 5
    q1, q2, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    return float(q1), float(q2), float(q3), float(values.min()), float(values.max())


def _record(T, sol: ConstrainedSolution, solver, stats, retried, keep) -> SweepRecord:
    rec = SweepRecord(float(T), sol.status, int(sol.cycles), wall_ms=float(sol.wall_ms),
                      retried=retried, diagnostic=sol.diagnostic)
    lam = sol.lam.values
    (rec.lambda_q1, rec.lambda_q2, rec.lambda_q3,
     rec.lambda_min, rec.lambda_max) = _lambda_stats(lam)
    if sol.converged:
        rec.max_abs_delta = sol.max_abs_delta() if solver.n_constraints else 0.0
        if stats is not None:
            rec.mad_marginal, rec.mad_C, rec.mad_chi = solution_errors(solver, sol, stats)
    if keep:
        rec.solution = sol
    return rec


def anneal_sweep(fg: FactorGraph, regime: str, schedule: AnnealSchedule,
                 opts: SweepOptions | None = None, oracle_cache: dict | None = None
                 ) -> list[SweepRecord]:
    """Solve at each temperature of ``schedule`` in order.

    Each step starts from the last converged solution.  When that fails and
    ``cold_retry`` is set, the step is solved once more from scratch and the
    retry is kept if it converges.  Failures never raise; they are recorded.
    ``oracle_cache`` (T -> ExactStats) lets several regimes on the same model
    share one enumeration per temperature.
    """
    opts = opts or SweepOptions()
    solver = ConstrainedSolver(fg, regime, float(schedule.T[0]), basis=opts.basis,
                               scope=opts.scope, potts_diag_count=opts.potts_diag_count,
                               seed=opts.seed, opts=opts.solver)
    oracle = _use_oracle(fg, opts.oracle, opts.oracle_limit)
    records = []
    warm = None
    for T in schedule.T:
        t0 = time.perf_counter()
        sol = solver.solve(float(T), init=warm)
        retried = False
        if not sol.converged and warm is not None and opts.cold_retry:
            retried = True
            cold = solver.solve(float(T), init=None)
            if cold.converged:
                sol = cold
        sol.wall_ms = 1e3 * (time.perf_counter() - t0)
        stats = None
        if oracle and sol.converged:
            key = float(T)
            if oracle_cache is not None and key in oracle_cache:
                stats = oracle_cache[key]
            else:
                stats = exact_stats(scale_temperature(fg, key),
                                    cap=max(opts.oracle_limit, fg.state_space_size()))
                if oracle_cache is not None:
                    oracle_cache[key] = stats
        records.append(_record(T, sol, solver, stats, retried, opts.keep_solutions))
        if sol.converged:
            warm = sol
    return records


# ------------------------------------------------------------------ ensembles


def run_ensemble(make_model, seeds, regimes, schedule: AnnealSchedule,
                 opts: SweepOptions | None = None) -> dict:
    """Sweep every regime on every seeded instance.

    ``make_model(seed)`` builds one instance.  Returns ``{regime: [records
    per seed]}`` with seeds in the given order, ready for :func:`aggregate`.
    """
    out = {r: [] for r in regimes}
    for seed in seeds:
        fg = make_model(seed)
        cache = {}
        for r in regimes:
            out[r].append(anneal_sweep(fg, r, schedule, opts, oracle_cache=cache))
    return out


@dataclass
class EnsembleSummary:
    T: np.ndarray
    frac_converged: np.ndarray
    quartiles: dict  # metric name -> (len(T), 3) array

    def median(self, metric: str) -> np.ndarray:
        return self.quartiles[metric][:, 1]


def truncated_quartiles(values) -> np.ndarray:
    """Quartiles where +inf marks a failed run.

    The inverted-CDF rule makes a quartile infinite exactly when the
    failed fraction is larger than one minus that quartile's level.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return np.full(3, math.nan)
    return np.quantile(v, [0.25, 0.5, 0.75], method="inverted_cdf")


def aggregate(runs: list[list[SweepRecord]],
              metrics=("mad_marginal", "mad_C", "mad_chi")) -> EnsembleSummary:
    if not runs:
        raise ValueError("no runs to aggregate")
    T = np.array([r.T for r in runs[0]])
    for run in runs[1:]:
        other = np.array([r.T for r in run])
        if other.shape != T.shape or not np.array_equal(other, T):
            raise ValueError("runs were recorded on different temperature grids")
    conv = np.array([[r.converged for r in run] for run in runs], dtype=float)
    quart = {}
    for m in metrics:
        vals = np.array([[getattr(r, m) for r in run] for run in runs])
        quart[m] = np.array([truncated_quartiles(vals[:, t]) for t in range(T.size)])
    return EnsembleSummary(T, conv.mean(axis=0), quart)


# ------------------------------------------------------------------ output


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def sweep_csv(records: list[SweepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(v) for v in r.row()])
    return buf.getvalue()


def write_sweep_csv(records: list[SweepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(sweep_csv(records))


def read_sweep_csv(path_or_text) -> list[dict]:
    """Parse a sweep CSV back into dicts of floats (status stays a string)."""
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({k: (v if k == "status" else (int(v) if k == "iterations" else float(v)))
                     for k, v in row.items()})
    return rows
