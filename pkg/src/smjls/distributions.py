"""Phase-type and matrix-exponential holding-time distributions.

A holding-time model is stored as a sub-generator ``Pi`` with the
conventions ``exit = -Pi @ 1`` and ``start = e_1``, so the density is
``e_1' expm(Pi t) exit``.  Strict phase-type (PH) models additionally
obey the sign pattern of a transient Markov generator; matrix-exponential
(ME) models do not, and their densities have to be checked on a grid.

Reference laws (exponential, Weibull) are provided as small immutable
classes used as fitting targets and for inverse-cdf sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, special

from .errors import DomainError, NumericError, UnsupportedOperation, ValidationError

PH = "ph"
ME = "me"

#: tolerance on eta + Pi 1 at construction
EXIT_TOL = 1e-12
#: pdf values above -NEG_TOL count as non-negative for ME certification
NEG_TOL = 1e-9


def _as_times(t):
    arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError("times must be finite and non-negative")
    return arr


def _expm_batch(pi, times):
    """expm(pi * t) for every t in a 1-d array, shape (len(t), m, m)."""
    times = np.atleast_1d(times)
    out = np.empty((times.size,) + pi.shape)
    chunk = 4096
    for lo in range(0, times.size, chunk):
        tt = times[lo:lo + chunk]
        out[lo:lo + chunk] = linalg.expm(tt[:, None, None] * pi[None, :, :])
    return out


def _row_on_grid(row, pi, dt, count):
    """Row vectors ``row @ expm(pi * k dt)`` for k = 0..count-1.

    Uses exact exponentials on a two-level grid (coarse anchors times fine
    offsets), so nothing accumulates across the grid and the work is fully
    vectorized.
    """
    m = pi.shape[0]
    block = max(1, int(np.sqrt(count)))
    nanch = -(-count // block)
    fine = _expm_batch(pi, np.arange(block) * dt)
    anchors = _expm_batch(pi, np.arange(nanch) * block * dt)
    heads = np.einsum("i,aij->aj", np.asarray(row, dtype=float), anchors)
    out = np.einsum("aj,bjk->abk", heads, fine).reshape(nanch * block, m)
    return out[:count]


@dataclass(frozen=True, eq=False)
class PhaseModel:
    """Holding-time model ``(Pi, exit, start)`` with start fixed to ``e_1``.

    Parameters
    ----------
    sub_generator : (m, m) array_like
        Hurwitz matrix ``Pi``.
    kind : {"ph", "me"}
        ``"ph"`` enforces the Markov sign pattern.

    Notes
    -----
    ``exit_vector`` and ``start_vector`` are derived, never supplied.  Use
    :meth:`from_triple` for a general ``(Pi, eta, alpha)``.
    """

    sub_generator: np.ndarray
    kind: str = PH
    exit_vector: np.ndarray = field(init=False, repr=False)
    start_vector: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pi = np.array(self.sub_generator, dtype=float)
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1] or pi.shape[0] == 0:
            raise ValidationError("sub_generator must be a non-empty square matrix")
        if not np.all(np.isfinite(pi)):
            raise ValidationError("sub_generator has non-finite entries")
        if self.kind not in (PH, ME):
            raise ValidationError(f"unknown kind {self.kind!r}")
        pi.setflags(write=False)
        eta = -pi.sum(axis=1)
        eta.setflags(write=False)
        alpha = np.zeros(pi.shape[0])
        alpha[0] = 1.0
        alpha.setflags(write=False)
        object.__setattr__(self, "sub_generator", pi)
        object.__setattr__(self, "exit_vector", eta)
        object.__setattr__(self, "start_vector", alpha)
        problems = self._structural_problems()
        if problems:
            raise ValidationError("; ".join(problems))

    def _structural_problems(self):
        out = []
        ev = np.linalg.eigvals(self.sub_generator)
        if not np.all(ev.real < 0):
            out.append(f"sub_generator is not Hurwitz (max Re eig = {ev.real.max():.3g})")
        if self.kind == PH:
            pi = self.sub_generator
            off = pi - np.diag(np.diag(pi))
            if np.any(off < 0):
                out.append("PH model has negative off-diagonal rates")
            if np.any(np.diag(pi) >= 0):
                out.append("PH model needs strictly negative diagonal")
            if np.any(self.exit_vector < -EXIT_TOL * max(1.0, np.abs(pi).max())):
                out.append("PH model has negative exit rates")
        return out

    # -- constructors -----------------------------------------------------
    @classmethod
    def from_triple(cls, pi, eta, alpha, kind=PH):
        """Build a model from a general triple by similarity transform.

        The transform ``T`` satisfies ``alpha' T = e_1'`` and
        ``T 1 = -Pi^{-1} eta`` so the result has ``start = e_1`` and
        ``exit = -Pi' 1``.  A PH request whose transformed matrix breaks
        the sign pattern comes back as kind ``"me"``.
        """
        pi = np.asarray(pi, dtype=float)
        eta = np.asarray(eta, dtype=float).ravel()
        alpha = np.asarray(alpha, dtype=float).ravel()
        m = pi.shape[0]
        if eta.size != m or alpha.size != m:
            raise ValidationError("triple dimensions disagree")
        if abs(alpha.sum() - 1.0) > 1e-9:
            raise DomainError("start vector must sum to one")
        v = -np.linalg.solve(pi, eta)
        if abs(alpha @ v - 1.0) > 1e-8:
            raise DomainError("triple does not integrate to one")
        p = int(np.argmax(np.abs(alpha)))
        cols = []
        for j in range(m):
            if j == p:
                continue
            c = np.zeros(m)
            c[j] = 1.0
            c[p] = -alpha[j] / alpha[p]
            cols.append(c)
        first = v - (np.sum(cols, axis=0) if cols else 0.0)
        T = np.column_stack([first] + cols)
        new_pi = np.linalg.solve(T, pi @ T)
        if kind == PH:
            try:
                return cls(new_pi, PH)
            except ValidationError:
                return cls(new_pi, ME)
        return cls(new_pi, kind)

    @classmethod
    def unchecked(cls, sub_generator, kind=ME):
        """Bypass the construction checks; only :func:`validate` should use it."""
        obj = object.__new__(cls)
        pi = np.array(sub_generator, dtype=float)
        object.__setattr__(obj, "sub_generator", pi)
        object.__setattr__(obj, "kind", kind)
        object.__setattr__(obj, "exit_vector", -pi.sum(axis=1))
        alpha = np.zeros(pi.shape[0])
        alpha[0] = 1.0
        object.__setattr__(obj, "start_vector", alpha)
        return obj

    # -- basic accessors --------------------------------------------------
    @property
    def dim(self) -> int:
        return self.sub_generator.shape[0]

    @property
    def is_ph(self) -> bool:
        return self.kind == PH

    def __eq__(self, other):
        if not isinstance(other, PhaseModel):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.sub_generator, other.sub_generator)

    def __hash__(self):
        return hash((self.kind, self.sub_generator.tobytes()))

    # -- evaluation --------------------------------------------------------
    def pdf(self, t):
        return pdf_at(self, t)

    def ccdf(self, t):
        return ccdf_at(self, t)

    def cdf(self, t):
        return 1.0 - ccdf_at(self, t)

    def mean(self) -> float:
        return moment(self, 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pi": self.sub_generator.ravel().tolist(), "dim": self.dim}

    @classmethod
    def from_dict(cls, data) -> "PhaseModel":
        try:
            m = int(data["dim"])
            pi = np.asarray(data["pi"], dtype=float)
            kind = data.get("kind", PH)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad PhaseModel document: {exc}") from None
        if pi.ndim == 1:
            if pi.size != m * m:
                raise ValidationError("pi length does not match dim")
            pi = pi.reshape(m, m)
        if pi.shape != (m, m):
            raise ValidationError("pi shape does not match dim")
        return cls(pi, kind)


def coxian(diagonal: Sequence[float], superdiagonal: Sequence[float]) -> PhaseModel:
    """Coxian model with given diagonal and forward (superdiagonal) rates.

    Exit rates are implied: ``eta_i = -diag_i - super_i``.
    """
    d = np.asarray(diagonal, dtype=float)
    s = np.asarray(superdiagonal, dtype=float)
    if s.size != d.size - 1:
        raise ValidationError("superdiagonal must have one fewer entry than diagonal")
    pi = np.diag(d) + np.diag(s, 1)
    return PhaseModel(pi, PH)


def exponential_model(rate: float) -> PhaseModel:
    if not rate > 0:
        raise DomainError("rate must be positive")
    return PhaseModel(np.array([[-float(rate)]]), PH)


# -- Lemma-1 style evaluation -----------------------------------------------

def pdf_at(model: PhaseModel, t):
    """Density ``e_1' expm(Pi t) eta``; accepts scalars or arrays."""
    tt = _as_times(t)
    flat = tt.ravel()
    if model.dim == 1:
        lam = -model.sub_generator[0, 0]
        vals = model.exit_vector[0] * np.exp(-lam * flat)
    else:
        E = _expm_batch(model.sub_generator, flat)
        vals = E[:, 0, :] @ model.exit_vector
    return vals.reshape(tt.shape) if tt.ndim else float(vals[0])


def ccdf_at(model: PhaseModel, t):
    """Survival ``e_1' expm(Pi t) 1``."""
    tt = _as_times(t)
    flat = tt.ravel()
    if model.dim == 1:
        vals = np.exp(model.sub_generator[0, 0] * flat)
    else:
        E = _expm_batch(model.sub_generator, flat)
        vals = E[:, 0, :].sum(axis=1)
    return vals.reshape(tt.shape) if tt.ndim else float(vals[0])


def pdf_on_grid(model: PhaseModel, dt: float, count: int) -> np.ndarray:
    """Density on the uniform grid ``k*dt``; much cheaper than :func:`pdf_at`."""
    rows = _row_on_grid(model.start_vector, model.sub_generator, dt, count)
    return rows @ model.exit_vector


def moment(model: PhaseModel, n: int) -> float:
    """n-th raw moment ``(-1)^n n! e_1' Pi^{-n} 1`` via repeated solves."""
    if int(n) != n or n < 1:
        raise DomainError("moment order must be a positive integer")
    pi = model.sub_generator
    cond = np.linalg.cond(pi)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericError(f"sub_generator singular to working precision (cond={cond:.3g})")
    x = np.ones(model.dim)
    for _ in range(int(n)):
        x = np.linalg.solve(pi, x)
    return float((-1) ** n * math.factorial(int(n)) * x[0])


def truncation_horizon(model: PhaseModel, tol: float = 1e-10) -> float:
    """Smallest t (to bracketing accuracy) with ccdf(t) < tol, capped at 1e6 x mean."""
    mean = moment(model, 1)
    cap = 1e6 * mean
    hi = mean
    while ccdf_at(model, hi) >= tol:
        hi *= 2.0
        if hi >= cap:
            return cap
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ccdf_at(model, mid) < tol:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    kind: str
    hurwitz: bool
    sign_pattern_ok: bool
    min_pdf: float
    argmin_pdf: float
    total_mass: float
    dominant_eigenvalue: complex
    dominant_real_simple: bool
    ph_representable: bool
    messages: tuple = ()


def _dominant(ev):
    top = ev.real.max()
    near = ev[np.abs(ev.real - top) <= 1e-8 * max(1.0, abs(top))]
    dom = near[np.argmin(np.abs(near.imag))]
    real_simple = bool(np.all(np.abs(near.imag) <= 1e-8 * max(1.0, abs(top))))
    return complex(dom), real_simple


def validate(model: PhaseModel, horizon: float = 0.0, grid_points: int = 10_000) -> ValidityReport:
    """Structured validity check; never raises for a bad model.

    The grid spans ``[0, max(horizon, 10 * mean)]``.  Grid minima are
    refined locally so isolated zeros such as the one of
    ``exp(-t)(t-1)^2`` at ``t = 1`` are not missed.
    """
    if grid_points < 2:
        raise DomainError("grid_points must be at least 2")
    pi = np.asarray(model.sub_generator, dtype=float)
    msgs = []
    ev = np.linalg.eigvals(pi)
    hurwitz = bool(np.all(ev.real < 0))
    dom, real_simple = _dominant(ev)
    eta = -pi.sum(axis=1)
    off = pi - np.diag(np.diag(pi))
    signs = bool(np.all(off >= 0) and np.all(np.diag(pi) < 0) and np.all(eta >= -EXIT_TOL))
    if not hurwitz:
        msgs.append("not Hurwitz")
        return ValidityReport(False, model.kind, False, signs, float("nan"), float("nan"),
                              float("nan"), dom, real_simple, False, tuple(msgs))
    mass = float(-np.linalg.solve(pi, eta)[0])
    mean = float(-np.linalg.solve(pi, np.ones(len(pi)))[0])
    span = max(float(horizon), 10.0 * abs(mean))
    grid = np.linspace(0.0, span, int(grid_points))
    rows = _row_on_grid(np.eye(len(pi))[0], pi, grid[1] - grid[0], grid.size)
    vals = rows @ eta
    scale = max(np.abs(vals).max(), 1e-300)
    k = int(np.argmin(vals[1:])) + 1
    tmin, fmin = grid[k], vals[k]
    # refine around the smallest interior local minima; the decaying tail is not one
    inner = vals[1:-1]
    local = np.flatnonzero((inner <= vals[:-2]) & (inner <= vals[2:])) + 1
    cand = local[np.argsort(vals[local])[:5]]
    inner_min = np.inf
    for c in cand:
        a, b = grid[max(c - 1, 0)], grid[min(c + 1, grid.size - 1)]
        res = optimize.minimize_scalar(
            lambda s: float(linalg.expm(pi * s)[0] @ eta), bounds=(a, b), method="bounded",
            options={"xatol": 1e-12 * max(1.0, span)})
        inner_min = min(inner_min, float(res.fun), float(vals[c]))
        if res.fun < fmin:
            tmin, fmin = float(res.x), float(res.fun)
    nonneg = fmin >= -NEG_TOL
    if not nonneg:
        msgs.append(f"pdf negative ({fmin:.3g} at t={tmin:.4g})")
    if abs(mass - 1.0) > 1e-6:
        msgs.append(f"density integrates to {mass:.9g}")
    if model.kind == PH and not signs:
        msgs.append("PH sign pattern violated")
    positive_inside = inner_min > 1e-10 * scale
    ph_rep = bool(signs or (real_simple and positive_inside and nonneg))
    if not ph_rep:
        msgs.append("not PH-representable")
    valid = hurwitz and nonneg and abs(mass - 1.0) <= 1e-6 and (signs or model.kind == ME)
    return ValidityReport(bool(valid), model.kind, hurwitz, signs, float(fmin), float(tmin),
                          mass, dom, real_simple, ph_rep, tuple(msgs))


# -- analytic reference laws -------------------------------------------------

class AnalyticLaw:
    """Base class for closed-form reference laws."""

    name = "law"

    def pdf(self, t):
        raise NotImplementedError

    def cdf(self, t):
        raise NotImplementedError

    def ccdf(self, t):
        return 1.0 - self.cdf(t)

    def ppf(self, q):
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def settling_time(self, eps: float = 0.02) -> float:
        """Time at which the survival function equals ``eps``."""
        return float(self.ppf(1.0 - eps))

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(data) -> "AnalyticLaw":
        kind = str(data.get("type", "")).lower()
        if kind == "exponential":
            return Exponential(float(data["rate"]))
        if kind == "weibull":
            return Weibull(float(data["shape"]), float(data["scale"]))
        if kind == "density":
            return ModelDensityLaw(PhaseModel.from_dict(data["model"]))
        raise ValidationError(f"unknown law type {data.get('type')!r}")


@dataclass(frozen=True)
class Exponential(AnalyticLaw):
    rate: float
    name = "exponential"

    def __post_init__(self):
        if not (self.rate > 0 and np.isfinite(self.rate)):
            raise DomainError("rate must be positive")

    def pdf(self, t):
        t = _as_times(t)
        return self.rate * np.exp(-self.rate * t)

    def cdf(self, t):
        t = _as_times(t)
        return -np.expm1(-self.rate * t)

    def ccdf(self, t):
        t = _as_times(t)
        return np.exp(-self.rate * t)

    def ppf(self, q):
        return -np.log1p(-np.asarray(q, dtype=float)) / self.rate

    def mean(self):
        return 1.0 / self.rate

    def to_dict(self):
        return {"type": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class Weibull(AnalyticLaw):
    """Weibull law with ``F(t) = 1 - exp(-(t/scale)^shape)``."""

    shape: float
    scale: float
    name = "weibull"

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise DomainError("shape and scale must be positive")

    def pdf(self, t):
        t = _as_times(t)
        k, lam = self.shape, self.scale
        z = t / lam
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (k / lam) * np.power(z, k - 1) * np.exp(-np.power(z, k))
        if k < 1:
            out = np.where(t == 0, np.inf, out)
        return out

    def cdf(self, t):
        t = _as_times(t)
        return -np.expm1(-np.power(t / self.scale, self.shape))

    def ccdf(self, t):
        t = _as_times(t)
        return np.exp(-np.power(t / self.scale, self.shape))

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        return self.scale * np.power(-np.log1p(-q), 1.0 / self.shape)

    def mean(self):
        return self.scale * special.gamma(1.0 + 1.0 / self.shape)

    def to_dict(self):
        return {"type": "weibull", "shape": self.shape, "scale": self.scale}


class ModelDensityLaw(AnalyticLaw):
    """A law defined by the density of a validated model, PH or ME.

    Quantiles come from a tabulated cdf on ``2**16`` points up to the
    truncation horizon, so ME-defined laws can be sampled by inversion.
    """

    name = "density"
    TABLE_POINTS = 1 << 16

    def __init__(self, model: PhaseModel):
        rep = validate(model)
        if not rep.valid:
            raise DomainError("model does not define a valid density: " + "; ".join(rep.messages))
        self.model = model
        horizon = truncation_horizon(model, 1e-12)
        dt = horizon / (self.TABLE_POINTS - 1)
        ones = np.ones(model.dim)
        surv = _row_on_grid(model.start_vector, model.sub_generator, dt, self.TABLE_POINTS) @ ones
        cdf = np.maximum.accumulate(np.clip(1.0 - surv, 0.0, 1.0))
        cdf[0] = 0.0
        self._t = np.arange(self.TABLE_POINTS) * dt
        self._cdf = cdf

    def pdf(self, t):
        return pdf_at(self.model, t)

    def cdf(self, t):
        return 1.0 - ccdf_at(self.model, t)

    def ccdf(self, t):
        return ccdf_at(self.model, t)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        return np.interp(q, self._cdf, self._t)

    def mean(self):
        return moment(self.model, 1)

    def to_dict(self):
        return {"type": "density", "model": self.model.to_dict()}

    def __eq__(self, other):
        return isinstance(other, ModelDensityLaw) and self.model == other.model

    def __hash__(self):
        return hash(self.model)


# -- sampling ----------------------------------------------------------------

def _phase_walk(model: PhaseModel, rng: np.random.Generator, size: int) -> np.ndarray:
    pi = model.sub_generator
    m = model.dim
    out_rate = -np.diag(pi)
    jump = np.zeros((m, m + 1))
    jump[:, :m] = pi / out_rate[:, None]
    jump[np.arange(m), np.arange(m)] = 0.0
    jump[:, m] = model.exit_vector / out_rate
    jump = np.clip(jump, 0.0, None)
    cum = np.cumsum(jump / jump.sum(axis=1, keepdims=True), axis=1)
    cum[:, -1] = 1.0
    total = np.zeros(size)
    state = np.zeros(size, dtype=np.int64)
    live = np.arange(size)
    while live.size:
        s = state[live]
        total[live] += rng.exponential(1.0, live.size) / out_rate[s]
        u = rng.random(live.size)
        nxt = (u[:, None] > cum[s]).sum(axis=1)
        state[live] = nxt
        live = live[nxt < m]
    return total


def sample(law, rng: np.random.Generator, size=None):
    """Draw holding times from an analytic law or a PH model.

    ME models are rejected: sample from the analytic law they approximate.
    """
    n = 1 if size is None else int(size)
    if isinstance(law, PhaseModel):
        if law.kind != PH:
            raise UnsupportedOperation("ME models have no Markov chain to walk; sample the analytic law")
        draws = _phase_walk(law, rng, n)
    elif isinstance(law, AnalyticLaw):
        draws = np.asarray(law.ppf(rng.random(n)), dtype=float)
    else:
        raise ValidationError(f"cannot sample from {type(law).__name__}")
    return float(draws[0]) if size is None else draws


def law_mean(law) -> float:
    return moment(law, 1) if isinstance(law, PhaseModel) else float(law.mean())


def law_ccdf(law, t):
    return ccdf_at(law, t) if isinstance(law, PhaseModel) else law.ccdf(t)


def law_pdf(law, t):
    return pdf_at(law, t) if isinstance(law, PhaseModel) else law.pdf(t)
