"""Coupled co-state / covariance equations and switching gains.

All solvers work on a uniform grid with classical fourth-order
Runge-Kutta steps.  Gains are piecewise linear between grid nodes, so a
half-step evaluation uses the average of the two neighbouring nodes.

Array conventions: per-phase matrices are stacked on the first axis,
time-indexed sequences on a leading time axis, e.g. ``Lam[j, i]`` is the
co-state of phase ``i`` at node ``t_j``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy import integrate, linalg

from .distributions import pdf_on_grid
from .errors import ModelQualityError, NumericError, ValidationError
from .markovianize import ClusteredChain

MU_SUM_TOL = 1e-8
OCCUPANCY_GUARD = 1e-12
COST_WARN = 1e-3
COST_FAIL = 1e-2


# ---------------------------------------------------------------- grid ----

@dataclass(frozen=True)
class TimeGrid:
    t_f: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 100:
            raise ValidationError("grid needs N >= 100 steps")
        if not self.t_f > 0:
            raise ValidationError("horizon must be positive")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "t_f", float(self.t_f))

    @property
    def h(self) -> float:
        return self.t_f / self.N

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.t_f, self.N + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t_f, self.N * factor)


def default_grid(chain: ClusteredChain, minimum: int = 3000) -> TimeGrid:
    """``N = max(3000, 100 t_f max|Re eig Pi|)``."""
    rate = np.abs(np.linalg.eigvals(chain.Pi).real).max()
    return TimeGrid(chain.t_f, max(minimum, int(math.ceil(100.0 * chain.t_f * rate))))


# --------------------------------------------------------------- gains ----

@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Gains ``values[k, j]`` (nu x nx) of cluster ``k`` at node ``t_j``."""

    grid: TimeGrid
    values: np.ndarray
    source: str = ""
    inert: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 4 or v.shape[1] != self.grid.N + 1:
            raise ValidationError("gain array must be (clusters, N+1, nu, nx)")
        if not np.all(np.isfinite(v)):
            raise ValidationError("gain schedule has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, chain: ClusteredChain, grid: TimeGrid, gains, source="constant"):
        """``gains`` is a sequence or mapping (cluster name/index -> matrix)."""
        nk = chain.n_clusters
        if isinstance(gains, dict):
            items = [gains[chain.cluster_names[k]] if chain.cluster_names[k] in gains else gains[k]
                     for k in range(nk)]
        else:
            items = list(gains)
        if len(items) != nk:
            raise ValidationError("one gain per cluster required")
        mats = np.array([np.asarray(g, dtype=float).reshape(chain.nu, chain.nx) for g in items])
        vals = np.broadcast_to(mats[:, None], (nk, grid.N + 1, chain.nu, chain.nx)).copy()
        return cls(grid, vals, source)

    @classmethod
    def zeros(cls, chain, grid):
        return cls(grid, np.zeros((chain.n_clusters, grid.N + 1, chain.nu, chain.nx)), "zero")

    @property
    def n_clusters(self) -> int:
        return self.values.shape[0]

    def node(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def half(self, j: int) -> np.ndarray:
        """Gain at ``t_j + h/2``."""
        return 0.5 * (self.values[:, j] + self.values[:, j + 1])

    def at(self, t) -> np.ndarray:
        """Linear interpolation; returns (clusters, len(t), nu, nx)."""
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), 0.0, self.grid.t_f)
        s = t / self.grid.h
        j = np.minimum(np.floor(s).astype(int), self.grid.N - 1)
        w = (s - j)[None, :, None, None]
        return (1 - w) * self.values[:, j] + w * self.values[:, j + 1]

    def resampled(self, grid: TimeGrid) -> "GainSchedule":
        return GainSchedule(grid, self.at(grid.t), self.source, self.inert)

    def blend(self, other: "GainSchedule", theta: float) -> "GainSchedule":
        return GainSchedule(self.grid, (1 - theta) * self.values + theta * other.values,
                            self.source, self.inert)

    def max_difference(self, other: "GainSchedule") -> float:
        return float(np.abs(self.values - other.values).max())

    def to_csv(self, names=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        nk, n1, nu, nx = self.values.shape
        w.writerow(["t", "cluster"] + [f"g{r}{c}" for r in range(nu) for c in range(nx)])
        t = self.grid.t
        for k in range(nk):
            label = names[k] if names else k
            for j in range(n1):
                w.writerow([repr(float(t[j])), label] + [repr(float(x)) for x in self.values[k, j].ravel()])
        return buf.getvalue()


# ----------------------------------------------------------- occupancy ----

@dataclass(frozen=True, eq=False)
class Occupancy:
    nodes: np.ndarray      # (N+1, n)
    halves: np.ndarray     # (N, n) at t_j + h/2

    def cluster_sums(self, chain: ClusteredChain) -> np.ndarray:
        out = np.zeros((self.nodes.shape[0], chain.n_clusters))
        np.add.at(out.T, chain.cluster_of, self.nodes.T)
        return out


def propagate_mu(chain: ClusteredChain, grid: TimeGrid) -> Occupancy:
    """Row vector ``mu(t) = mu(0) expm(Pi t)`` on nodes and half-steps."""
    E = linalg.expm(chain.Pi * grid.h)
    Eh = linalg.expm(chain.Pi * (grid.h / 2))
    nodes = np.empty((grid.N + 1, chain.n_phases))
    nodes[0] = chain.mu0
    for j in range(grid.N):
        nodes[j + 1] = nodes[j] @ E
    halves = nodes[:-1] @ Eh
    drift = np.abs(nodes.sum(axis=1) - 1.0).max()
    if drift > MU_SUM_TOL:
        raise NumericError(f"probability mass drifted by {drift:.3g}")
    occ = Occupancy(nodes, halves)
    low = occ.cluster_sums(chain).min()
    if low < -1e-6:
        raise ModelQualityError(f"cluster occupancy went negative ({low:.3g}); ME model too poor")
    return occ


# ------------------------------------------------------- RK4 machinery ----

def _closed_loop(chain, gains_k):
    """Per-phase closed-loop matrix and running cost for cluster gains (nk, nu, nx)."""
    G = gains_k[chain.cluster_of]                      # (n, nu, nx)
    Abar = chain.A + chain.B @ G
    L = chain.Q + np.swapaxes(G, 1, 2) @ chain.R @ G
    return Abar, L


def _costate_rhs(chain, Lam, gains_k):
    """``-dLam/dt``."""
    Abar, L = _closed_loop(chain, gains_k)
    coupling = np.tensordot(chain.Pi, Lam, axes=(1, 0))
    return np.swapaxes(Abar, 1, 2) @ Lam + Lam @ Abar + L + coupling


def _covariance_rhs(chain, X, gains_k):
    Abar, _ = _closed_loop(chain, gains_k)
    coupling = np.tensordot(chain.Pi.T, X, axes=(1, 0))
    return Abar @ X + X @ np.swapaxes(Abar, 1, 2) + coupling


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _costate_step(chain, Lam, g_hi, g_mid, g_lo, h):
    """One backward RK4 step from ``t+h`` (gain g_hi) to ``t`` (gain g_lo)."""
    k1 = _costate_rhs(chain, Lam, g_hi)
    k2 = _costate_rhs(chain, Lam + 0.5 * h * k1, g_mid)
    k3 = _costate_rhs(chain, Lam + 0.5 * h * k2, g_mid)
    k4 = _costate_rhs(chain, Lam + h * k3, g_lo)
    return _sym(Lam + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))


def _check_finite(M, t, what):
    if not np.all(np.isfinite(M)):
        raise NumericError(f"{what} blew up at t={t:.6g}")


@dataclass(frozen=True, eq=False)
class CostateSet:
    grid: TimeGrid
    values: np.ndarray      # (N+1, n, nx, nx)


@dataclass(frozen=True, eq=False)
class CovarianceSet:
    grid: TimeGrid
    values: np.ndarray

    def total_second_moment(self) -> np.ndarray:
        """``sum_i tr X_i(t_j)`` = E|x(t_j)|^2."""
        return np.trace(self.values, axis1=2, axis2=3).sum(axis=1)


def _stage_gains(gains: GainSchedule, lo: int, hi: int) -> np.ndarray:
    """Gains at nodes lo..hi interleaved with half-steps: shape (2(hi-lo)+1, nk, nu, nx)."""
    V = gains.values[:, lo:hi + 1]
    out = np.empty((2 * (hi - lo) + 1,) + V.shape[:1] + V.shape[2:])
    out[0::2] = np.moveaxis(V, 1, 0)
    out[1::2] = 0.5 * (out[0:-1:2] + out[2::2])
    return out


def _operators(chain: ClusteredChain, stage_gains: np.ndarray, forward: bool):
    """Row-major vectorized linear operators of the co-state (or covariance) field.

    Returns ``M`` (T, d, d) and ``c`` (T, d) with ``d = n nx^2`` so that the
    right-hand side is ``M @ vec + c``; for the co-state it is ``-dLam/dt``.
    """
    n, nx = chain.n_phases, chain.nx
    G = stage_gains[:, chain.cluster_of]                         # (T, n, nu, nx)
    Abar = chain.A[None] + chain.B[None] @ G                     # (T, n, nx, nx)
    I = np.eye(nx)
    if forward:
        blocks = np.einsum("tiab,cd->tiacbd", Abar, I) + np.einsum("ab,ticd->tiacbd", I, Abar)
        coupling = np.kron(chain.Pi.T, np.eye(nx * nx))
        c = None
    else:
        AT = np.swapaxes(Abar, 2, 3)
        blocks = np.einsum("tiab,cd->tiacbd", AT, I) + np.einsum("ab,ticd->tiacbd", I, AT)
        coupling = np.kron(chain.Pi, np.eye(nx * nx))
        L = chain.Q[None] + np.swapaxes(G, 2, 3) @ chain.R[None] @ G
        c = L.reshape(L.shape[0], -1)
    T = Abar.shape[0]
    q = nx * nx
    M = np.broadcast_to(coupling, (T,) + coupling.shape).copy()
    blocks = blocks.reshape(T, n, q, q)
    for i in range(n):
        M[:, i * q:(i + 1) * q, i * q:(i + 1) * q] += blocks[:, i]
    return M, c


_CHUNK = 1024


def _transpose_perm(n, nx):
    """Index map taking vec(Lam_i) to vec(Lam_i'); None when nx == 1."""
    if nx == 1:
        return None
    return np.arange(n * nx * nx).reshape(n, nx, nx).transpose(0, 2, 1).ravel()


#: largest ``h * |eig|`` of the linear operator accepted without internal substeps
STEP_RATE = 0.5


def substeps(chain: ClusteredChain, gains: GainSchedule, samples: int = 64) -> int:
    """RK4 substeps per grid interval needed to keep ``h |eig| <= STEP_RATE``."""
    N = gains.grid.N
    idx = np.unique(np.linspace(0, N, min(samples, N + 1)).astype(int))
    stage = np.moveaxis(gains.values[:, idx], 1, 0)
    M, _ = _operators(chain, stage, forward=False)
    rho = max(np.abs(np.linalg.eigvals(Mi)).max() for Mi in M)
    return max(1, int(math.ceil(gains.grid.h * rho / STEP_RATE)))


def _refine(chain, gains, grid, refine):
    m = substeps(chain, gains) if refine else 1
    if m == 1:
        return 1, gains, grid
    fine = grid.refined(m)
    return m, gains.resampled(fine), fine


def solve_costate(chain: ClusteredChain, gains: GainSchedule, grid: TimeGrid,
                  refine: bool = True) -> CostateSet:
    """Backward integration of the coupled co-state equation from ``Lam(t_f) = S``.

    With ``refine`` the RK4 step is subdivided when the closed loop is too
    fast for the grid; values are returned on ``grid`` either way.
    """
    _same_grid(gains, grid)
    m, g_f, fine = _refine(chain, gains, grid, refine)
    if m > 1:
        return CostateSet(grid, _solve_costate(chain, g_f, fine).values[::m])
    return _solve_costate(chain, gains, grid)


def solve_covariance(chain: ClusteredChain, gains: GainSchedule, grid: TimeGrid,
                     refine: bool = True) -> CovarianceSet:
    """Forward integration from ``X_i(0) = x0 x0' mu_i(0)``; see :func:`solve_costate`."""
    _same_grid(gains, grid)
    m, g_f, fine = _refine(chain, gains, grid, refine)
    if m > 1:
        return CovarianceSet(grid, _solve_covariance(chain, g_f, fine).values[::m])
    return _solve_covariance(chain, gains, grid)


@np.errstate(over="ignore", invalid="ignore")   # blow-ups surface via _check_finite
def _solve_costate(chain: ClusteredChain, gains: GainSchedule, grid: TimeGrid) -> CostateSet:
    h = grid.h
    n, nx = chain.n_phases, chain.nx
    out = np.empty((grid.N + 1, n * nx * nx))
    lam = chain.S.reshape(-1).copy()
    out[grid.N] = lam
    perm = _transpose_perm(n, nx)
    hi = grid.N
    while hi > 0:
        lo = max(0, hi - _CHUNK)
        M, c = _operators(chain, _stage_gains(gains, lo, hi), forward=False)
        for j in range(hi - 1, lo - 1, -1):
            s = 2 * (j - lo)
            k1 = M[s + 2] @ lam + c[s + 2]
            k2 = M[s + 1] @ (lam + 0.5 * h * k1) + c[s + 1]
            k3 = M[s + 1] @ (lam + 0.5 * h * k2) + c[s + 1]
            k4 = M[s] @ (lam + h * k3) + c[s]
            lam = lam + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if perm is not None:
                lam = 0.5 * (lam + lam[perm])
            out[j] = lam
        _check_finite(lam, lo * h, "co-state")
        hi = lo
    vals = _sym(out.reshape(grid.N + 1, n, nx, nx))
    return CostateSet(grid, vals)


@np.errstate(over="ignore", invalid="ignore")   # blow-ups surface via _check_finite
def _solve_covariance(chain: ClusteredChain, gains: GainSchedule, grid: TimeGrid) -> CovarianceSet:
    h = grid.h
    n, nx = chain.n_phases, chain.nx
    out = np.empty((grid.N + 1, n * nx * nx))
    x = (np.outer(chain.x0, chain.x0)[None] * chain.mu0[:, None, None]).reshape(-1)
    out[0] = x
    perm = _transpose_perm(n, nx)
    lo = 0
    while lo < grid.N:
        hi = min(grid.N, lo + _CHUNK)
        M, _ = _operators(chain, _stage_gains(gains, lo, hi), forward=True)
        for j in range(lo, hi):
            s = 2 * (j - lo)
            k1 = M[s] @ x
            k2 = M[s + 1] @ (x + 0.5 * h * k1)
            k3 = M[s + 1] @ (x + 0.5 * h * k2)
            k4 = M[s + 2] @ (x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if perm is not None:
                x = 0.5 * (x + x[perm])
            out[j + 1] = x
        _check_finite(x, hi * h, "covariance")
        lo = hi
    return CovarianceSet(grid, _sym(out.reshape(grid.N + 1, n, nx, nx)))


def _same_grid(gains, grid):
    if gains.grid != grid:
        raise ValidationError("gain schedule and solver grid differ")


# ------------------------------------------------------ closed-form gains --

def optimal_gains(chain: ClusteredChain, grid: Optional[TimeGrid] = None, max_factor: int = 64):
    """Closed-form switching gains by a joint backward sweep.

    At each Runge-Kutta stage the gain is formed from the stage co-state
    and the occupancy at the stage time.  A cluster whose occupancy is
    below ``1e-12`` keeps the gain of the later node.  When the resulting
    closed loop is too fast for ``grid`` the sweep is repeated on a
    subdivided grid and sampled back onto ``grid``.

    Returns
    -------
    (GainSchedule, CostateSet)
    """
    grid = grid or default_grid(chain)
    m = 1
    while True:
        fine = grid.refined(m) if m > 1 else grid
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                gains, lam = _closed_form_sweep(chain, fine)
            need = substeps(chain, gains)
        except NumericError:
            need = 2
        if need == 1:
            break
        if m * need > max_factor:
            raise NumericError(f"closed-form sweep still unresolved with {m}x subdivision")
        m *= need
    if m > 1:
        gains = GainSchedule(grid, gains.values[:, ::m], gains.source, gains.inert)
        lam = CostateSet(grid, lam.values[::m])
    return gains, lam


def _closed_form_sweep(chain: ClusteredChain, grid: TimeGrid):
    if not chain.homogeneous_clusters():
        raise ValidationError("closed-form gains need identical dynamics within each cluster")
    occ = propagate_mu(chain, grid)
    h = grid.h
    nk = chain.n_clusters
    members = [chain.members(k) for k in range(nk)]
    gains = np.empty((nk, grid.N + 1, chain.nu, chain.nx))
    inert = set()
    C = np.zeros((nk, chain.n_phases))
    C[chain.cluster_of, np.arange(chain.n_phases)] = 1.0
    first = [idx[0] for idx in members]
    # -R^-1 B' per cluster
    RB = np.array([-np.linalg.solve(chain.R[i], chain.B[i].T) for i in first])
    last = [None]

    def form(Lam, mu):
        w = C * mu[None, :]
        den = w.sum(axis=1)
        live = den >= OCCUPANCY_GUARD
        den_safe = np.where(live, den, 1.0)
        weighted = np.tensordot(w, Lam, axes=(1, 0)) / den_safe[:, None, None]
        g = RB @ weighted
        if not live.all():
            if last[0] is None:
                mean = np.tensordot(C / C.sum(axis=1, keepdims=True), Lam, axes=(1, 0))
                hold = RB @ mean
            else:
                hold = last[0]
            g[~live] = hold[~live]
        return g

    Lam = chain.S.copy()
    out = np.empty((grid.N + 1, chain.n_phases, chain.nx, chain.nx))
    out[grid.N] = Lam
    g = form(Lam, occ.nodes[grid.N])
    gains[:, grid.N] = g
    last[0] = g
    for j in range(grid.N - 1, -1, -1):
        mu_hi, mu_mid, mu_lo = occ.nodes[j + 1], occ.halves[j], occ.nodes[j]
        k1 = _costate_rhs(chain, Lam, form(Lam, mu_hi))
        L2 = Lam + 0.5 * h * k1
        k2 = _costate_rhs(chain, L2, form(L2, mu_mid))
        L3 = Lam + 0.5 * h * k2
        k3 = _costate_rhs(chain, L3, form(L3, mu_mid))
        L4 = Lam + h * k3
        k4 = _costate_rhs(chain, L4, form(L4, mu_lo))
        Lam = _sym(Lam + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        out[j] = Lam
        g = form(Lam, mu_lo)
        gains[:, j] = g
        last[0] = g
        if j % 256 == 0:
            _check_finite(Lam, j * h, "co-state")
    for k, idx in enumerate(members):
        if occ.nodes[:, idx].sum(axis=1).max() < OCCUPANCY_GUARD:
            inert.add(chain.cluster_names[k])
    _check_finite(out, 0.0, "co-state")
    _check_finite(gains, 0.0, "gain")
    return (GainSchedule(grid, gains, "closed-form", tuple(sorted(inert))), CostateSet(grid, out))


# ---------------------------------------------------------------- cost ----

@dataclass
class CostReport:
    J: float
    J_initial_weighted: float
    J_trace: float
    J_integral: float
    Lambda0: np.ndarray
    max_relative_gap: float
    provenance: str = ""
    warning: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "J": self.J,
            "J_initial_weighted": self.J_initial_weighted,
            "J_trace": self.J_trace,
            "J_integral": self.J_integral,
            "max_relative_gap": self.max_relative_gap,
            "Lambda0": self.Lambda0.tolist(),
            "provenance": self.provenance,
            "warning": self.warning,
        }


def _running_trace(chain, gains, X):
    """``sum_i tr[L_i X_i]`` at every node."""
    G = np.moveaxis(gains.values, 1, 0)[:, chain.cluster_of]        # (N+1, n, nu, nx)
    L = chain.Q[None] + np.swapaxes(G, 2, 3) @ chain.R[None] @ G
    return np.einsum("jiab,jiba->j", L, X.values)


def evaluate_cost(chain: ClusteredChain, gains: GainSchedule, grid: Optional[TimeGrid] = None,
                  costates: Optional[CostateSet] = None) -> CostReport:
    """Cost in three equivalent forms; raises if they disagree by more than 1 %.

    All forms are computed on the (possibly subdivided) solver grid.
    """
    grid = grid or gains.grid
    _same_grid(gains, grid)
    m, gains, grid = _refine(chain, gains, grid, True)
    lam = costates if costates is not None and costates.grid == grid else _solve_costate(chain, gains, grid)
    X = _solve_covariance(chain, gains, grid)
    L0 = lam.values[0]
    x0 = chain.x0
    J1 = float(x0 @ np.tensordot(chain.mu0, L0, axes=(0, 0)) @ x0)
    J2 = float(np.einsum("iab,iba->", L0, X.values[0]))
    run = _running_trace(chain, gains, X)
    J3 = float(integrate.simpson(run, dx=grid.h)
               + np.einsum("iab,iba->", chain.S, X.values[-1]))
    scale = max(abs(J1), 1e-12)
    gap = max(abs(J1 - J2), abs(J1 - J3), abs(J2 - J3)) / scale
    if scale == 1e-12 and max(abs(J2), abs(J3)) < 1e-12:
        gap = 0.0
    warn = None
    if gap > COST_FAIL:
        raise NumericError(f"cost forms disagree by {100 * gap:.3g}%; refine the grid")
    if gap > COST_WARN:
        warn = f"cost forms disagree by {100 * gap:.3g}%"
    return CostReport(J1, J1, J2, J3, L0, gap, gains.source, warn)


def cost_only(chain: ClusteredChain, gains: GainSchedule, refine: bool = True) -> float:
    """``x0'(sum mu_i(0) Lam_i(0)) x0`` from one backward solve."""
    lam = solve_costate(chain, gains, gains.grid, refine=refine)
    return float(chain.x0 @ np.tensordot(chain.mu0, lam.values[0], axes=(0, 0)) @ chain.x0)


# ------------------------------------------------- stationarity iteration --

def stationarity_residual(chain, gains: GainSchedule, lam: CostateSet, X: CovarianceSet) -> float:
    """Max over nodes and clusters of ``|sum_i (R_i G X_i + B_i' Lam_i X_i)|``."""
    worst = 0.0
    for k in range(chain.n_clusters):
        idx = chain.members(k)
        G = gains.values[k]                                     # (N+1, nu, nx)
        Xk = X.values[:, idx]                                   # (N+1, m, nx, nx)
        Lk = lam.values[:, idx]
        R, B = chain.R[idx], chain.B[idx]
        term = (np.einsum("iab,jbc,jicd->jad", R, G, Xk)
                + np.einsum("iba,jibc,jicd->jad", B, Lk, Xk))
        worst = max(worst, float(np.abs(term).max()))
    return worst


def _stationary_gain(chain, idx, Lam, X, fallback, ridge=1e-10):
    """Solve ``sum_i R_i G X_i = -sum_i B_i' Lam_i X_i`` for G (column-major vec)."""
    nu, nx = chain.nu, chain.nx
    Xi = X[idx]
    if np.trace(Xi.sum(axis=0)) <= 1e-300 or not np.any(Xi):
        return fallback
    M = sum(np.kron(Xi[a].T, chain.R[i]) for a, i in enumerate(idx))
    rhs = -sum(chain.B[i].T @ Lam[i] @ Xi[a] for a, i in enumerate(idx))
    Xs = Xi.sum(axis=0)
    w = np.linalg.eigvalsh(_sym(Xs))
    if w.min() <= 1e-10 * max(w.max(), 1e-300):
        M = M + ridge * max(np.abs(M).max(), 1.0) * np.eye(nu * nx)
    g = np.linalg.solve(M, rhs.reshape(-1, order="F"))
    return g.reshape(nu, nx, order="F")


def _sweep_update(chain, gains: GainSchedule, X: CovarianceSet, grid: TimeGrid, occupancy_floor):
    """Backward sweep computing stationary gains against the frozen covariance.

    The node gain at ``t_j`` depends on ``Lam(t_j)``, which itself depends
    on that gain through the step; the coupling is resolved by a short
    fixed-point loop so the returned schedule reproduces the same discrete
    co-state when re-solved with frozen gains.
    """
    h = grid.h
    nk = chain.n_clusters
    members = [chain.members(k) for k in range(nk)]
    new = np.empty_like(gains.values)
    Xv = X.values
    # a cluster is treated as unoccupied when its share of the second moment
    # at that instant is negligible; the stationarity condition is homogeneous
    # in X so absolute decay of the state does not matter
    def form(Lam, Xj, held):
        g = np.empty((nk, chain.nu, chain.nx))
        total = max(np.trace(Xj.sum(axis=0)), 1e-300)
        for k, idx in enumerate(members):
            if np.trace(Xj[idx].sum(axis=0)) <= occupancy_floor * total:
                g[k] = held[k]
            else:
                g[k] = _stationary_gain(chain, idx, Lam, Xj, held[k])
        return g

    Lam = chain.S.copy()
    g_hi = form(Lam, Xv[grid.N], gains.values[:, grid.N])
    new[:, grid.N] = g_hi
    for j in range(grid.N - 1, -1, -1):
        g = g_hi.copy()
        for _ in range(60):
            L_try = _costate_step(chain, Lam, g_hi, 0.5 * (g_hi + g), g, h)
            g_next = form(L_try, Xv[j], g_hi)
            delta = np.abs(g_next - g).max()
            g = g_next
            if delta <= 1e-14 * max(1.0, np.abs(g).max()):
                break
        else:
            raise NumericError(f"node gain fixed point failed to settle at t={j * h:.6g}")
        Lam = _costate_step(chain, Lam, g_hi, 0.5 * (g_hi + g), g, h)
        new[:, j] = g
        g_hi = g
        if j % 256 == 0:
            _check_finite(Lam, j * h, "co-state")
    return GainSchedule(grid, new, "stationarity-iteration")


def averaged_lqr_gains(chain: ClusteredChain, grid: TimeGrid) -> GainSchedule:
    """Per-cluster finite-horizon LQR of the occupancy-averaged dynamics (jumps ignored)."""
    occ = propagate_mu(chain, grid)
    weight = integrate.trapezoid(occ.nodes, dx=grid.h, axis=0)
    nk = chain.n_clusters
    out = np.empty((nk, grid.N + 1, chain.nu, chain.nx))
    h = grid.h
    for k in range(nk):
        idx = chain.members(k)
        w = weight[idx]
        w = w / w.sum() if w.sum() > 0 else np.full(idx.size, 1.0 / idx.size)
        avg = lambda arr: np.tensordot(w, arr[idx], axes=(0, 0))
        A, B, Q, R, S = (avg(a) for a in (chain.A, chain.B, chain.Q, chain.R, chain.S))
        Rinv = np.linalg.inv(R)

        def rhs(P):
            return A.T @ P + P @ A + Q - P @ B @ Rinv @ B.T @ P

        P = S.copy()
        out[k, grid.N] = -Rinv @ B.T @ P
        for j in range(grid.N - 1, -1, -1):
            k1 = rhs(P)
            k2 = rhs(P + 0.5 * h * k1)
            k3 = rhs(P + 0.5 * h * k2)
            k4 = rhs(P + h * k3)
            P = _sym(P + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
            out[k, j] = -Rinv @ B.T @ P
    return GainSchedule(grid, out, "averaged-lqr")


@dataclass
class IterationResult:
    gains: GainSchedule
    residuals: List[float]
    costs: List[float]
    thetas: List[float]
    converged: bool
    iterations: int
    costates: Optional[CostateSet] = None
    covariances: Optional[CovarianceSet] = None


def mjlspom_gains_iterative(chain: ClusteredChain, grid: Optional[TimeGrid] = None,
                            init: Optional[GainSchedule] = None, max_iters: int = 50,
                            tol: float = 1e-6, occupancy_floor: float = 1e-14,
                            max_halvings: int = 12) -> IterationResult:
    """Block-coordinate search for gains satisfying the cluster stationarity condition.

    Each iteration freezes the covariance of the current gains, sweeps
    backward to get new stationary gains, and accepts a damped blend
    ``(1 - theta) G + theta G_new`` with theta halved from 1 until the cost
    does not increase.  Stops when the residual drops below ``tol`` or no
    step decreases the cost.
    """
    grid = grid or default_grid(chain)
    gains = init.resampled(grid) if init is not None and init.grid != grid else init
    if gains is None:
        gains = averaged_lqr_gains(chain, grid)
    lam = solve_costate(chain, gains, grid, refine=False)
    X = solve_covariance(chain, gains, grid, refine=False)
    J = float(chain.x0 @ np.tensordot(chain.mu0, lam.values[0], axes=(0, 0)) @ chain.x0)
    res = stationarity_residual(chain, gains, lam, X)
    residuals, costs, thetas = [res], [J], []
    it = 0
    converged = res < tol
    while not converged and it < max_iters:
        cand = _sweep_update(chain, gains, X, grid, occupancy_floor)
        theta, accepted = 1.0, None
        for _ in range(max_halvings + 1):
            trial = gains.blend(cand, theta)
            lam_t = solve_costate(chain, trial, grid, refine=False)
            J_t = float(chain.x0 @ np.tensordot(chain.mu0, lam_t.values[0], axes=(0, 0)) @ chain.x0)
            if J_t <= J * (1 + 1e-12) + 1e-15:
                accepted = (trial, lam_t, J_t)
                break
            theta *= 0.5
        if accepted is None:
            break
        it += 1
        gains, lam, J = accepted
        X = solve_covariance(chain, gains, grid, refine=False)
        res = stationarity_residual(chain, gains, lam, X)
        residuals.append(res)
        costs.append(J)
        thetas.append(theta)
        converged = res < tol
        if len(costs) > 2 and not converged and abs(costs[-2] - costs[-1]) <= 1e-14 * abs(costs[-1]):
            break
    return IterationResult(GainSchedule(grid, gains.values, "stationarity-iteration"),
                           residuals, costs, thetas, bool(converged), it, lam, X)


# ------------------------------------------------ convolution oracle ------

def _magnus_step(A_of, t0, h):
    """Fourth-order Magnus propagator of dPhi/dt = A(t) Phi over [t0, t0 + h]."""
    c = math.sqrt(3.0) / 6.0
    A1, A2 = A_of(t0 + (0.5 - c) * h), A_of(t0 + (0.5 + c) * h)
    omega = 0.5 * h * (A1 + A2) + (math.sqrt(3.0) / 12.0) * h * h * (A2 @ A1 - A1 @ A2)
    return linalg.expm(omega)


@dataclass(frozen=True, eq=False)
class OracleResult:
    grid: TimeGrid
    entry_first: np.ndarray     # (N+1, nx, nx) co-state at the entry phase of cluster 0
    entry_second: np.ndarray    # same for cluster 1
    phases: tuple               # chain phase indices of the two entry phases


def _weighted_congruence(c, Ph, X):
    """``sum_d c_d Ph_d^T X_d Ph_d``."""
    if Ph.shape[1] == 1:
        return np.array([[np.dot(c, Ph[:, 0, 0] ** 2 * X[:, 0, 0])]])
    return np.einsum("d,dji,djk,dkl->il", c, Ph, X, Ph, optimize=True)


def _volterra_march(chain, gains, grid, blocks):
    """Trapezoid discretization of the two coupled renewal-type equations."""
    N, h = grid.N, grid.h
    nx = chain.nx
    dens = [pdf_on_grid(b.model, h, N + 1) for b in blocks]
    surv = []
    for b in blocks:
        rows = np.einsum("j,njk->nk", b.model.start_vector,
                         _grid_expm(b.model.sub_generator, h, N + 1))
        surv.append(rows.sum(axis=1))
    ks = [chain.cluster_index(b.mode) for b in blocks]
    phase = [b.start for b in blocks]
    V = gains.values

    def abar(k, t):
        s = min(max(t / h, 0.0), N)
        j = min(int(s), N - 1)
        w = s - j
        G = (1 - w) * V[k, j] + w * V[k, j + 1]
        return chain.A[phase[ks.index(k)]] + chain.B[phase[ks.index(k)]] @ G

    def running(k, j):
        G = V[k, j]
        i0 = phase[ks.index(k)]
        return chain.Q[i0] + G.T @ chain.R[i0] @ G

    Lrun = [np.array([running(k, j) for j in range(N + 1)]) for k in ks]
    S = [chain.S[p] for p in phase]
    # rows[side][N - i + d] holds Phi(t_{i+d}, t_i); filled from the back as i decreases
    rows = [np.empty((N + 1, nx, nx)) for _ in ks]
    for side in range(2):
        rows[side][N] = np.eye(nx)
    lam = [np.empty((N + 1, nx, nx)) for _ in ks]
    for side in range(2):
        lam[side][N] = S[side]
    for i in range(N - 1, -1, -1):
        m = N - i
        for side, k in enumerate(ks):
            P = _magnus_step(lambda t, k=k: abar(k, t), i * h, h)
            cur = rows[side][i + 1:]
            if nx == 1:
                cur *= P[0, 0]
            else:
                cur[...] = np.matmul(cur, P)
            rows[side][i] = np.eye(nx)
        w = np.full(m + 1, h)
        w[0] = w[-1] = 0.5 * h
        known, diag = [], []
        for side in range(2):
            other = 1 - side
            Ph = rows[side][i:]                               # (m+1, nx, nx)
            term = surv[side][m] * (Ph[m].T @ S[side] @ Ph[m])
            term = term + _weighted_congruence(w * surv[side][: m + 1], Ph, Lrun[side][i:])
            term = term + _weighted_congruence(w[1:] * dens[side][1: m + 1], Ph[1:], lam[other][i + 1:])
            known.append(term)
            diag.append(w[0] * dens[side][0])
        if abs(diag[0] * diag[1]) >= 1.0:
            raise NumericError("endpoint coupling is not contractive; refine the grid")
        a, b = known[0].copy(), known[1].copy()
        for _ in range(100):
            a_new = known[0] + diag[0] * b
            b_new = known[1] + diag[1] * a_new
            done = (np.abs(a_new - a).max() <= 1e-15 * max(1.0, np.abs(a_new).max())
                    and np.abs(b_new - b).max() <= 1e-15 * max(1.0, np.abs(b_new).max()))
            a, b = a_new, b_new
            if done:
                break
        else:
            raise NumericError("fixed point at the diagonal node did not converge in 100 sweeps")
        lam[0][i], lam[1][i] = _sym(a), _sym(b)
    return lam, phase


def _grid_expm(pi, dt, count):
    from .distributions import _expm_batch
    block = max(1, int(np.sqrt(count)))
    nanch = -(-count // block)
    fine = _expm_batch(pi, np.arange(block) * dt)
    anch = _expm_batch(pi, np.arange(nanch) * block * dt)
    return np.einsum("aij,bjk->abik", anch, fine).reshape(nanch * block, *pi.shape)[:count]


def oracle_grid(chain: ClusteredChain, gains: GainSchedule, step_rate: float = 1.5,
                minimum: int = 500) -> TimeGrid:
    """Coarsest grid on which ``h`` times the fastest closed-loop or phase rate is ``step_rate``."""
    rate = np.abs(np.linalg.eigvals(chain.Pi).real).max()
    V = gains.values
    for k in range(V.shape[0]):
        for i in chain.members(k):
            for j in range(0, V.shape[1], max(1, V.shape[1] // 50)):
                ev = np.linalg.eigvals(chain.A[i] + chain.B[i] @ V[k, j])
                rate = max(rate, 2.0 * np.abs(ev.real).max())
    return TimeGrid(chain.t_f, max(minimum, int(math.ceil(chain.t_f * rate / step_rate))))


def costate_convolution_oracle(chain: ClusteredChain, gains: GainSchedule,
                               grid: Optional[TimeGrid] = None, levels: int = 3) -> OracleResult:
    """Entry-phase co-states of a two-cluster chain from the convolution equations.

    Each cluster must consist of one holding block feeding the other
    cluster.  Quadrature is the trapezoid rule on ``grid`` and on
    ``levels - 1`` successive doublings; the results are combined by
    Romberg extrapolation in even powers of the step.
    """
    if grid is None:
        grid = oracle_grid(chain, gains)
    if levels < 1:
        raise ValidationError("levels must be at least 1")
    if chain.n_clusters != 2:
        raise ValidationError("oracle needs exactly two clusters")
    blocks = []
    for k in range(2):
        bs = [b for b in chain.blocks if b.mode == chain.cluster_names[k]]
        if len(bs) != 1 or bs[0].model is None:
            raise ValidationError("each cluster must be a single transient block")
        blocks.append(bs[0])
    g = gains if gains.grid == grid else gains.resampled(grid)
    lam, phase = _volterra_march(chain, g, grid, blocks)
    table = [[np.asarray(x) for x in lam]]
    for lev in range(1, levels):
        fine_grid = grid.refined(2 ** lev)
        lam_f, _ = _volterra_march(chain, gains.resampled(fine_grid), fine_grid, blocks)
        row = [np.asarray(x)[:: 2 ** lev] for x in lam_f]
        new_table = [row]
        for j, prev in enumerate(table, start=1):
            w = 4.0 ** j
            new_table.append([(w * a - b) / (w - 1.0) for a, b in zip(new_table[-1], prev)])
        table = new_table
    lam = table[-1]
    return OracleResult(grid, lam[0], lam[1], tuple(phase))
