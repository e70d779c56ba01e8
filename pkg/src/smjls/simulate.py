"""Monte Carlo ground truth on the original semi-Markov law.

Paths are drawn from the holding-time laws of the specification (never
from a fitted approximation).  The closed-loop state is advanced exactly
over each piece of a path on which the mode and the gain are constant:
the time axis is cut into cells, every cell is further split at jump
instants, and the gain on each piece is the schedule at the piece's
midpoint.  Running cost on a piece is integrated in closed form.

Random streams are derived from ``(seed, chunk index)`` with a fixed
chunk size, so results do not depend on how chunks are scheduled.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .control import GainSchedule
from .distributions import sample
from .errors import NumericError, ValidationError
from .markovianize import SemiMarkovSpec

CHUNK = 32768
DEFAULT_CELLS = 2000


@dataclass(frozen=True)
class PathRecord:
    """Modes visited and their entry times, truncated at ``t_f``."""

    modes: Tuple[str, ...]
    times: Tuple[float, ...]
    t_f: float

    def __post_init__(self):
        if len(self.modes) != len(self.times) or not self.modes:
            raise ValidationError("a path needs matching, non-empty mode and time sequences")
        if self.times[0] != 0.0:
            raise ValidationError("paths start at t = 0")
        t = np.asarray(self.times)
        if np.any(np.diff(t) <= 0) or t[-1] > self.t_f:
            raise ValidationError("entry times must increase strictly and stay within the horizon")
        if any(a == b for a, b in zip(self.modes, self.modes[1:])):
            raise ValidationError("consecutive modes must differ")

    @property
    def jumps(self) -> int:
        return len(self.modes) - 1

    def holding_times(self) -> List[Tuple[str, float, bool]]:
        """``(mode, duration, completed)``; the last sojourn is censored by ``t_f``."""
        ends = list(self.times[1:]) + [self.t_f]
        out = []
        for k, (m, a, b) in enumerate(zip(self.modes, self.times, ends)):
            out.append((m, b - a, k < len(self.modes) - 1))
        return out


class _Sampler:
    """Successor and holding-time draws for every mode of a spec."""

    def __init__(self, spec: SemiMarkovSpec):
        self.spec = spec
        probs = spec.resolved_probabilities()
        self.n_modes = len(spec.modes)
        self.targets, self.cum, self.laws = [], [], []
        for m in spec.modes:
            tg = [spec.index(e.target) for e in m.edges]
            p = np.array([probs[m.name][e.target] for e in m.edges], dtype=float)
            self.targets.append(np.array(tg, dtype=int))
            c = np.cumsum(p) if p.size else p
            if c.size:
                c[-1] = 1.0
            self.cum.append(c)
            if m.coalesced:
                self.laws.append([m.holding] * len(m.edges))
            else:
                self.laws.append([e.law for e in m.edges])
        self.mu0_cum = np.cumsum(spec.mu0)
        self.mu0_cum[-1] = 1.0

    def draw(self, rng: np.random.Generator, n: int):
        """Ragged jump lists for ``n`` paths as flat arrays.

        Returns ``(path, mode, entry)`` sorted by path then time.
        """
        t_f = self.spec.t_f
        paths = [np.arange(n)]
        mode = np.searchsorted(self.mu0_cum, rng.random(n), side="right")
        mode = np.minimum(mode, self.n_modes - 1)
        modes = [mode.copy()]
        entries = [np.zeros(n)]
        live = np.arange(n)
        now = np.zeros(n)
        while live.size:
            cur = mode[live]
            nxt = np.full(live.size, -1)
            hold = np.full(live.size, np.inf)
            u = rng.random(live.size)
            for i in range(self.n_modes):
                sel = np.flatnonzero(cur == i)
                if not sel.size or not self.targets[i].size:
                    continue
                pick = np.searchsorted(self.cum[i], u[sel], side="right")
                pick = np.minimum(pick, self.targets[i].size - 1)
                nxt[sel] = self.targets[i][pick]
                for j, law in enumerate(self.laws[i]):
                    sub = sel[pick == j]
                    if sub.size:
                        hold[sub] = sample(law, rng, sub.size)
            t_new = now[live] + hold
            go = t_new < t_f
            live, t_new, nxt = live[go], t_new[go], nxt[go]
            mode[live] = nxt
            now[live] = t_new
            paths.append(live.copy())
            modes.append(nxt)
            entries.append(t_new)
        p = np.concatenate(paths)
        order = np.lexsort((np.concatenate(entries), p))
        return p[order], np.concatenate(modes)[order], np.concatenate(entries)[order]


def _stream(seed: int, chunk: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chunk),)))


def sample_path(spec: SemiMarkovSpec, rng: np.random.Generator) -> PathRecord:
    """One semi-Markov path: successor from the embedded chain, then its holding time."""
    p, m, t = _Sampler(spec).draw(rng, 1)
    names = tuple(spec.modes[i].name for i in m)
    return PathRecord(names, tuple(float(x) for x in t), spec.t_f)


def sample_paths(spec: SemiMarkovSpec, n: int, seed: int = 0) -> List[PathRecord]:
    out = []
    sampler = _Sampler(spec)
    for c, lo in enumerate(range(0, n, CHUNK)):
        size = min(CHUNK, n - lo)
        p, m, t = sampler.draw(_stream(seed, c), size)
        cuts = np.searchsorted(p, np.arange(size + 1))
        for k in range(size):
            sl = slice(cuts[k], cuts[k + 1])
            out.append(PathRecord(tuple(spec.modes[i].name for i in m[sl]),
                                  tuple(float(x) for x in t[sl]), spec.t_f))
    return out


# ------------------------------------------------------------ dynamics ----

def _gain_lookup(gains: GainSchedule, cluster: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Linear interpolation of the schedule, per path, shape (n, nu, nx)."""
    g = gains.grid
    s = np.clip(t / g.h, 0.0, g.N)
    j = np.minimum(s.astype(int), g.N - 1)
    w = (s - j)[:, None, None]
    V = gains.values
    return (1.0 - w) * V[cluster, j] + w * V[cluster, j + 1]


def _piece_scalar(a, b, q, r, g, x, tau):
    """Exact scalar propagation and cost over a piece of length ``tau``."""
    abar = a + b * g
    w = q + r * g * g
    two = 2.0 * abar * tau
    # int_0^tau e^{2 abar s} ds, series near abar = 0
    small = np.abs(two) < 1e-8
    with np.errstate(over="ignore", invalid="ignore"):
        integral = np.where(small, tau * (1.0 + 0.5 * two), np.expm1(two) / np.where(small, 1.0, 2.0 * abar))
        x_new = x * np.exp(abar * tau)
    return x_new, w * x * x * integral


def _piece_matrix(A, B, Q, R, G, x, tau):
    """Van Loan propagation for a batch of pieces."""
    n, nx = x.shape
    Abar = A + B @ G
    W = Q + np.swapaxes(G, 1, 2) @ R @ G
    M = np.zeros((n, 2 * nx, 2 * nx))
    M[:, :nx, :nx] = -np.swapaxes(Abar, 1, 2)
    M[:, :nx, nx:] = W
    M[:, nx:, nx:] = Abar
    E = linalg.expm(M * tau[:, None, None])
    Phi = E[:, nx:, nx:]
    Cost = np.swapaxes(Phi, 1, 2) @ E[:, :nx, nx:]
    x_new = np.einsum("nij,nj->ni", Phi, x)
    return x_new, np.einsum("ni,nij,nj->n", x, Cost, x)


@dataclass(frozen=True)
class _Arrays:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray

    @classmethod
    def of(cls, spec: SemiMarkovSpec):
        get = lambda k: np.array([getattr(m.dynamics, k) for m in spec.modes])
        return cls(get("A"), get("B"), get("Q"), get("R"), get("S"))


def _cell_edges(t_f: float, cells: int, checkpoints: Sequence[float]) -> np.ndarray:
    edges = np.linspace(0.0, t_f, cells + 1)
    if len(checkpoints):
        edges = np.union1d(edges, np.clip(np.asarray(checkpoints, dtype=float), 0.0, t_f))
    return edges


def _simulate_chunk(spec, arrays, gains, edges, check_idx, rng, size):
    sampler = _Sampler(spec)
    p, m, t = sampler.draw(rng, size)
    cuts = np.searchsorted(p, np.arange(size + 1))
    ptr = cuts[:-1].copy()                     # index of the current sojourn per path
    last = cuts[1:] - 1
    mode = m[ptr].copy()
    nxt_time = np.where(ptr < last, t[np.minimum(ptr + 1, len(t) - 1)], np.inf)
    nx = arrays.A.shape[1]
    scalar = nx == 1 and arrays.B.shape[2] == 1
    x = np.tile(spec.x0, (size, 1))
    cost = np.zeros(size)
    moments = np.zeros((len(check_idx), size))
    if 0 in check_idx:
        moments[check_idx.index(0)] = np.einsum("ni,ni->n", x, x)
    all_modes = np.arange(sampler.n_modes)

    def piece(md, x_in, t0, t1):
        tau = t1 - t0
        G = _gain_lookup(gains, md, 0.5 * (t0 + t1))
        if scalar:
            xn, dc = _piece_scalar(arrays.A[md, 0, 0], arrays.B[md, 0, 0], arrays.Q[md, 0, 0],
                                   arrays.R[md, 0, 0], G[:, 0, 0], x_in[:, 0], tau)
            return xn[:, None], dc
        return _piece_matrix(arrays.A[md], arrays.B[md], arrays.Q[md], arrays.R[md], G, x_in, tau)

    for c in range(len(edges) - 1):
        lo, hi = edges[c], edges[c + 1]
        # paths without a jump in the cell share one propagator per mode
        steady = np.flatnonzero(nxt_time > hi)
        if steady.size:
            ones = np.ones(sampler.n_modes)
            if scalar:
                phi, cw = piece(all_modes, ones[:, None], np.full(sampler.n_modes, lo),
                                np.full(sampler.n_modes, hi))
                md = mode[steady]
                x0s = x[steady, 0]
                cost[steady] += cw[md] * x0s * x0s
                x[steady, 0] = phi[md, 0] * x0s
            else:
                xn, dc = piece(mode[steady], x[steady], np.full(steady.size, lo), np.full(steady.size, hi))
                x[steady] = xn
                cost[steady] += dc
        todo = np.flatnonzero(nxt_time <= hi)
        start = np.full(size, lo)
        while todo.size:
            end = np.minimum(nxt_time[todo], hi)
            xn, dc = piece(mode[todo], x[todo], start[todo], end)
            x[todo] = xn
            cost[todo] += dc
            jumped = nxt_time[todo] <= hi
            jp = todo[jumped]
            if jp.size:
                ptr[jp] += 1
                mode[jp] = m[ptr[jp]]
                start[jp] = nxt_time[jp]
                has_more = ptr[jp] < last[jp]
                nxt_time[jp] = np.where(has_more, t[np.minimum(ptr[jp] + 1, len(t) - 1)], np.inf)
            todo = jp[start[jp] < hi]
        if not np.all(np.isfinite(x)):
            raise NumericError(f"state blew up before t={hi:.6g}")
        if c + 1 in check_idx:
            moments[check_idx.index(c + 1)] = np.einsum("ni,ni->n", x, x)
    cost += np.einsum("ni,nij,nj->n", x, arrays.S[mode], x)
    return cost, moments


@dataclass(frozen=True)
class MonteCarloReport:
    n_paths: int
    mean: float
    stderr: float
    checkpoints: Tuple[float, ...]
    second_moment: Tuple[float, ...]
    second_moment_stderr: Tuple[float, ...]
    seed: int
    cells: int
    path_costs: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def agrees_with(self, value: float, sigmas: float = 3.0) -> bool:
        return abs(self.mean - value) <= sigmas * self.stderr

    def to_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "mean": self.mean,
            "stderr": self.stderr,
            "checkpoints": list(self.checkpoints),
            "second_moment": list(self.second_moment),
            "second_moment_stderr": list(self.second_moment_stderr),
            "seed": self.seed,
            "cells": self.cells,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def path_costs_csv(self) -> str:
        if self.path_costs is None:
            raise ValidationError("per-path costs were not retained")
        return "path,cost\n" + "".join(f"{i},{c:.17g}\n" for i, c in enumerate(self.path_costs))


def empirical_cost(spec: SemiMarkovSpec, gains: GainSchedule, N: int, seed: int = 0,
                   checkpoints: Sequence[float] = (), cells: Optional[int] = None,
                   substeps: int = 1, workers: int = 1, keep_paths: bool = False) -> MonteCarloReport:
    """Sample mean and standard error of the quadratic cost over ``N`` paths.

    ``cells`` uniform cells (default ``min(grid N, 2000)``) times
    ``substeps`` set where the gain is re-evaluated; jump instants and
    ``checkpoints`` always split a cell.
    """
    if N < 2:
        raise ValidationError("need at least two paths for a standard error")
    if gains.grid.t_f < spec.t_f * (1 - 1e-12):
        raise ValidationError("gain schedule does not cover the horizon")
    if gains.values.shape[0] != len(spec.modes):
        raise ValidationError("gain schedule must have one cluster per mode")
    arrays = _Arrays.of(spec)
    if gains.values.shape[2:] != arrays.B.shape[1:][::-1]:
        raise ValidationError("gain shape does not match the dynamics")
    base = min(gains.grid.N, DEFAULT_CELLS) if cells is None else int(cells)
    n_cells = max(1, base * int(substeps))
    edges = _cell_edges(spec.t_f, n_cells, checkpoints)
    cps = sorted(set(float(np.clip(c, 0.0, spec.t_f)) for c in checkpoints))
    check_idx = [int(np.argmin(np.abs(edges - c))) for c in cps]

    jobs = [(c, min(CHUNK, N - lo)) for c, lo in enumerate(range(0, N, CHUNK))]

    def run(job):
        c, size = job
        return _simulate_chunk(spec, arrays, gains, edges, check_idx, _stream(seed, c), size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    costs = np.concatenate([r[0] for r in results])
    mom = np.concatenate([r[1] for r in results], axis=1)
    se = lambda a: float(a.std(ddof=1) / np.sqrt(a.size))
    return MonteCarloReport(
        n_paths=int(N), mean=float(costs.mean()), stderr=se(costs),
        checkpoints=tuple(cps),
        second_moment=tuple(float(v.mean()) for v in mom),
        second_moment_stderr=tuple(se(v) for v in mom),
        seed=int(seed), cells=n_cells,
        path_costs=costs if keep_paths else None)


def empirical_occupancy(spec: SemiMarkovSpec, times: Sequence[float], N: int,
                        seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Fraction of paths in each mode at ``times``: ``(mean, stderr)``, shape (len(times), modes)."""
    times = np.asarray(times, dtype=float)
    counts = np.zeros((times.size, len(spec.modes)))
    sampler = _Sampler(spec)
    for c, lo in enumerate(range(0, N, CHUNK)):
        size = min(CHUNK, N - lo)
        p, m, t = sampler.draw(_stream(seed, c), size)
        first = np.searchsorted(p, np.arange(size))
        key = p.astype(float) * (spec.t_f + 1.0) * 2.0 + t
        for a, tau in enumerate(times):
            # last sojourn entered at or before tau, per path
            probe = np.arange(size) * (spec.t_f + 1.0) * 2.0 + tau
            idx = np.searchsorted(key, probe, side="right") - 1
            idx = np.maximum(idx, first)
            counts[a] += np.bincount(m[idx], minlength=len(spec.modes))
    frac = counts / N
    return frac, np.sqrt(frac * (1.0 - frac) / N)
