"""Fitting matrix-exponential models to holding-time densities.

Pipeline: sample the target density on a uniform grid, project it on an
orthonormal Laguerre basis, optionally pull the transient part up with a
smooth bump and filter the tail with a lead-lag compensator until the
impulse response is non-negative, then convert the unit-DC-gain rational
function to a canonical ME realization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal
from scipy.special import eval_laguerre

from .distributions import (ME, NEG_TOL, AnalyticLaw, PhaseModel,
                            _row_on_grid, validate)
from .errors import DomainError, FitFailure, ValidationError

DC_TOL = 1e-9
RATIO_LADDER = (1.01, 1.05, 1.1, 1.25, 1.5)


def _trap(y, dt):
    return dt * (np.sum(y, axis=-1) - 0.5 * (y[..., 0] + y[..., -1]))


def _norm(y, dt, p):
    if p == 1:
        return float(_trap(np.abs(y), dt))
    if p == 2:
        return float(np.sqrt(_trap(y * y, dt)))
    if p == np.inf:
        return float(np.abs(y).max())
    raise DomainError("norms supported for p in {1, 2, inf}")


# ---------------------------------------------------------------- types ----

@dataclass(frozen=True)
class PdfSamples:
    """Density values on the grid ``t_k = k * dt``, k = 0..N-1."""

    dt: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ValidationError("need a 1-d series with at least two samples")
        if not np.all(np.isfinite(v)):
            raise ValidationError("density samples must be finite")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        object.__setattr__(self, "values", v)

    @property
    def count(self) -> int:
        return self.values.size

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.count) * self.dt

    @property
    def t_end(self) -> float:
        return (self.count - 1) * self.dt

    def mass(self) -> float:
        return float(_trap(self.values, self.dt))

    def same_grid(self, other: "PdfSamples") -> bool:
        return self.count == other.count and math.isclose(self.dt, other.dt, rel_tol=1e-12)


def sample_law(law: AnalyticLaw, dt: float, t_end: float, eps: float = 0.02) -> PdfSamples:
    """Sample ``law.pdf`` on ``[0, t_end]``; the grid must reach the settling time."""
    t_eps = law.settling_time(eps)
    if t_end < t_eps:
        raise ValidationError(f"grid end {t_end} is before the settling time {t_eps:.4g}")
    n = int(round(t_end / dt)) + 1
    t = np.arange(n) * dt
    f = np.asarray(law.pdf(t), dtype=float)
    if not np.isfinite(f[0]):
        # Weibull shape < 1 has a pole at the origin; use the right limit proxy
        f[0] = f[1]
    return PdfSamples(dt, f)


@dataclass(frozen=True)
class RationalModel:
    """``H(s) = (b1 s^{m-1} + ... + bm) / (s^m + a1 s^{m-1} + ... + am)``."""

    num: np.ndarray
    den: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.num, dtype=float))
        a = np.atleast_1d(np.asarray(self.den, dtype=float))
        if a.size == 0:
            raise ValidationError("order must be at least one")
        if b.size > a.size:
            raise ValidationError("model must be strictly proper")
        if b.size < a.size:
            b = np.concatenate([np.zeros(a.size - b.size), b])
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValidationError("non-finite coefficients")
        object.__setattr__(self, "num", b)
        object.__setattr__(self, "den", a)

    @classmethod
    def from_polys(cls, num_poly, den_poly):
        """From numpy ``poly1d``-style coefficient arrays (highest power first)."""
        den_poly = np.trim_zeros(np.asarray(den_poly, dtype=float), "f")
        lead = den_poly[0]
        num_poly = np.asarray(num_poly, dtype=float) / lead
        den_poly = den_poly / lead
        m = den_poly.size - 1
        num_poly = np.trim_zeros(num_poly, "f") if np.any(num_poly) else np.zeros(1)
        if num_poly.size > m:
            extra = num_poly[: num_poly.size - m]
            if np.any(np.abs(extra) > 1e-12 * max(1.0, np.abs(num_poly).max())):
                raise ValidationError("model must be strictly proper")
            num_poly = num_poly[num_poly.size - m:]
        return cls(num_poly, den_poly[1:])

    @property
    def order(self) -> int:
        return self.den.size

    @property
    def num_poly(self):
        return self.num.copy()

    @property
    def den_poly(self):
        return np.concatenate([[1.0], self.den])

    @property
    def dc_gain(self) -> float:
        return float(self.num[-1] / self.den[-1])

    def poles(self) -> np.ndarray:
        return np.roots(self.den_poly)

    def is_stable(self) -> bool:
        return bool(np.all(self.poles().real < 0))

    def dominant_decay(self) -> float:
        """``|Re|`` of the slowest pole."""
        return float(-self.poles().real.max())

    def scaled(self, k: float) -> "RationalModel":
        return RationalModel(self.num * k, self.den)

    def normalized(self) -> "RationalModel":
        return self.scaled(1.0 / self.dc_gain)

    def __call__(self, s):
        return np.polyval(self.num, s) / np.polyval(self.den_poly, s)

    def companion(self):
        """Observable canonical triple ``(Pi_c, b, e_1)`` with ``e_1'(sI - Pi_c)^{-1} b = H``."""
        m = self.order
        pi = np.zeros((m, m))
        pi[:, 0] = -self.den
        pi[np.arange(m - 1), np.arange(1, m)] = 1.0
        return pi, self.num.copy()

    def impulse_on_grid(self, dt: float, count: int) -> np.ndarray:
        pi, b = self.companion()
        rows = _row_on_grid(np.eye(self.order)[0], pi, dt, count)
        return rows @ b


def partial_fraction_impulse(model: RationalModel, t, pole_tol: float = 1e-3) -> np.ndarray:
    """Impulse response from the residue expansion of ``H``.

    Independent of any state-space realization; repeated poles (equal
    within ``pole_tol``) contribute ``r t^(j-1) / (j-1)! e^{p t}``.
    """
    t = np.asarray(t, dtype=float)
    r, p, _ = signal.residue(model.num_poly, model.den_poly, tol=pole_tol)
    out = np.zeros(t.shape, dtype=complex)
    power = 0
    for i in range(len(p)):
        power = power + 1 if i and abs(p[i] - p[i - 1]) <= pole_tol * max(1.0, abs(p[i])) else 1
        out += r[i] * t ** (power - 1) / math.factorial(power - 1) * np.exp(p[i] * t)
    return out.real


# ------------------------------------------------------------- Laguerre ----

def laguerre_basis(beta: float, n: int, t) -> np.ndarray:
    """Orthonormal Laguerre functions phi_0..phi_n at times ``t``, shape (n+1, len(t))."""
    t = np.asarray(t, dtype=float)
    decay = np.sqrt(2.0 * beta) * np.exp(-beta * t)
    x = 2.0 * beta * t
    return np.array([decay * eval_laguerre(k, x) for k in range(n + 1)])


def laguerre_rational(coeffs: Sequence[float], beta: float) -> RationalModel:
    """Sum of ``a_k sqrt(2 beta) (s - beta)^k / (s + beta)^{k+1}`` over a common denominator."""
    coeffs = np.asarray(coeffs, dtype=float)
    n = coeffs.size - 1
    num = np.zeros(1)
    for k, a in enumerate(coeffs):
        term = np.polymul(_binomial_power(-beta, k), _binomial_power(beta, n - k))
        num = np.polyadd(num, np.sqrt(2.0 * beta) * a * term)
    return RationalModel.from_polys(num, _binomial_power(beta, n + 1))


def _binomial_power(c, k):
    """Coefficients of (s + c)^k, highest power first."""
    return np.array([math.comb(k, j) * c ** j for j in range(k + 1)], dtype=float)


@dataclass(frozen=True)
class LaguerreFit:
    model: RationalModel          # unit DC gain
    raw_model: RationalModel      # before DC normalization
    coefficients: np.ndarray
    beta: float
    residual: float               # l2 residual of the projection on the grid
    previous_residual: float      # same with one basis function fewer
    ill_conditioned: bool


def laguerre_fit(samples: PdfSamples, n: int, beta: float, tol: float = 1e-9,
                 match_origin: bool = False) -> LaguerreFit:
    """Project ``samples`` on phi_0..phi_n by trapezoid quadrature.

    The result has order ``n + 1`` and is rescaled to unit DC gain.  With
    ``match_origin`` the projection is constrained so the fitted density
    equals the sampled one at ``t = 0``.
    """
    if n < 0 or int(n) != n:
        raise DomainError("n must be a non-negative integer")
    if not beta > 0:
        raise DomainError("beta must be positive")
    if samples.mass() < 0.99:
        raise ValidationError(f"samples carry only {samples.mass():.4f} of the mass")
    t = samples.t
    phi = laguerre_basis(beta, n, t)
    coeffs = _trap(phi * samples.values, samples.dt)
    if match_origin and n > 0:
        # closest coefficients (in l2) with sum_k c_k phi_k(0) = f(0)
        p0 = phi[:, 0]
        coeffs = coeffs - p0 * (p0 @ coeffs - samples.values[0]) / (p0 @ p0)
    approx = coeffs @ phi
    res = _norm(samples.values - approx, samples.dt, 2)
    if n > 0:
        prev = _norm(samples.values - coeffs[:-1] @ phi[:-1], samples.dt, 2)
    else:
        prev = _norm(samples.values, samples.dt, 2)
    raw = laguerre_rational(coeffs, beta)
    if abs(raw.dc_gain) < 1e-14:
        raise ValidationError("fitted model has zero DC gain")
    return LaguerreFit(raw.normalized(), raw, coeffs, float(beta), res, prev,
                       bool(res > prev + tol))


# -------------------------------------------------------- modifications ----

@dataclass(frozen=True)
class BumpSpec:
    amplitude: float
    half_width: float
    center: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0 or not self.half_width > 0 or self.center < 0:
            raise DomainError("bump needs amplitude >= 0, half_width > 0, center >= 0")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        z = self.half_width ** 2 - (t - self.center) ** 2
        out = np.zeros_like(t)
        inside = z > 0
        out[inside] = self.amplitude * np.exp(-1.0 / z[inside])
        return out

    def peak(self) -> float:
        return self.amplitude * math.exp(-1.0 / self.half_width ** 2)


@dataclass(frozen=True)
class PullUpResult:
    samples: PdfSamples
    bump: BumpSpec
    e_norm1: float
    e_norm2: float
    mass: float                  # ||f + e||_1

    def bound(self, f: PdfSamples, p) -> float:
        """Right-hand side of the pull-up distance bound for fixed ``p``."""
        e = self.bump(f.t)
        return (abs(1.0 - self.mass) / self.mass * _norm(f.values, f.dt, p)
                + _norm(e, f.dt, p) / self.mass)


def pull_up(samples: PdfSamples, bump: BumpSpec) -> PullUpResult:
    """Return ``(f + e) / ||f + e||_1`` on the same grid."""
    if bump.center + bump.half_width > samples.t_end:
        raise DomainError("bump support leaves the grid")
    e = bump(samples.t)
    if bump.amplitude == 0:
        return PullUpResult(samples, bump, 0.0, 0.0, 1.0)
    raised = samples.values + e
    mass = float(_trap(raised, samples.dt))
    return PullUpResult(PdfSamples(samples.dt, raised / mass), bump,
                        _norm(e, samples.dt, 1), _norm(e, samples.dt, 2), mass)


@dataclass(frozen=True)
class CompensatedModel:
    model: RationalModel
    z0: float
    p0: float
    min_impulse: float
    nonnegative: bool

    def bound_factor(self) -> float:
        """``2 (1 - p0/z0)``; multiply by ``||h||_p``."""
        return 2.0 * (1.0 - self.p0 / self.z0)


def compensate(model: RationalModel, z0: float, p0: float,
               dt: Optional[float] = None, count: Optional[int] = None) -> CompensatedModel:
    """Multiply by ``W(s) = (p0/z0)(s + z0)/(s + p0)`` and renormalize the DC gain.

    With ``dt``/``count`` the impulse response of the result is checked on
    that grid.
    """
    if not (z0 > 0 and p0 > 0):
        raise DomainError("z0 and p0 must be positive")
    if z0 < p0:
        raise DomainError("compensator needs z0 >= p0")
    if z0 == p0:
        out = model
    else:
        num = np.polymul(model.num_poly, [1.0, z0]) * (p0 / z0)
        den = np.polymul(model.den_poly, [1.0, p0])
        out = RationalModel.from_polys(num, den)
        out = out.scaled(model.dc_gain / out.dc_gain)
    lo, ok = float("nan"), True
    if dt is not None and count is not None:
        h = out.impulse_on_grid(dt, count)
        lo = float(h.min())
        ok = lo >= -NEG_TOL
    return CompensatedModel(out, float(z0), float(p0), lo, bool(ok))


# ---------------------------------------------------------- realization ----

def to_me_realization(model: RationalModel) -> PhaseModel:
    """Canonical ME model with ``exit = -Pi 1`` and ``start = e_1``.

    Starts from the observable companion triple and applies the unit lower
    triangular similarity whose first column is ``(1, a_1-b_1-1, ...,
    a_{m-1}-b_{m-1}-1)``.
    """
    if abs(model.den[-1]) < 1e-300:
        raise DomainError("model has a pole at the origin")
    if abs(model.dc_gain - 1.0) > DC_TOL:
        raise DomainError(f"DC gain must be one, got {model.dc_gain:.12g}")
    if not model.is_stable():
        raise DomainError("model is unstable")
    pi_c, b = model.companion()
    m = model.order
    T = np.eye(m)
    T[1:, 0] = model.den[:-1] - model.num[:-1] - 1.0
    pi = np.linalg.solve(T, pi_c @ T)
    # T 1 = -pi_c^{-1} b makes eta = -pi 1 exact up to roundoff
    return PhaseModel(pi, ME)


def fit_percent(actual: PdfSamples, estimate: PdfSamples) -> float:
    """``100 (1 - ||f - fhat|| / ||f - mean(f)||)`` with Euclidean norms of the series."""
    if not actual.same_grid(estimate):
        raise DomainError("fit_percent needs identical grids")
    f, g = actual.values, estimate.values
    return float(100.0 * (1.0 - np.linalg.norm(f - g) / np.linalg.norm(f - f.mean())))


def _series_fit(f, g):
    return float(100.0 * (1.0 - np.linalg.norm(f - g) / np.linalg.norm(f - f.mean())))


# ------------------------------------------------------------- pipeline ----

@dataclass
class FitOptions:
    """Knobs of :func:`fit_pipeline`; every default is deterministic.

    ``beta`` may be a number, ``"mean"`` (1/mean, clamped) or ``"search"``
    (best fit over a geometric ladder seeded at the ``"mean"`` value).
    ``bump_amplitude`` of ``None`` uses the dip heuristic.
    """

    beta: object = "search"
    dt: Optional[float] = None
    t_end: Optional[float] = None
    eps: float = 0.02
    bump_half_width: Optional[float] = None
    bump_amplitude: Optional[float] = None
    ratio_ladder: Sequence[float] = RATIO_LADDER
    p0_shrink: float = 0.85
    p0_steps: int = 40
    compensator: Optional[tuple] = None   # fixed (z0, p0) instead of the ladder
    beta_ladder: Sequence[float] = tuple(2.0 ** (k / 4.0) for k in range(-8, 21))
    max_bump_doublings: int = 12
    match_origin: bool = False

    @classmethod
    def from_dict(cls, data) -> "FitOptions":
        data = dict(data or {})
        if "compensator" in data and data["compensator"] is not None:
            c = data["compensator"]
            data["compensator"] = (float(c["z0"]), float(c["p0"])) if isinstance(c, dict) else tuple(c)
        if "ratio_ladder" in data:
            data["ratio_ladder"] = tuple(data["ratio_ladder"])
        if "beta_ladder" in data:
            data["beta_ladder"] = tuple(data["beta_ladder"])
        known = set(cls.__dataclass_fields__)
        bad = set(data) - known
        if bad:
            raise ValidationError(f"unknown fit options {sorted(bad)}")
        return cls(**data)


@dataclass
class FitReport:
    order: int
    beta: float
    fit_percent: float
    cdf_fit_percent: float
    pulled_up: bool
    compensated: bool
    bump: Optional[dict]
    compensator: Optional[dict]
    min_pdf: float
    mass: float
    pullup_bounds: dict = field(default_factory=dict)
    compensator_bounds: dict = field(default_factory=dict)
    bounds_hold: bool = True
    notes: list = field(default_factory=list)
    heuristics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class FitResult:
    model: PhaseModel
    rational: RationalModel
    report: FitReport


def _default_beta(law: AnalyticLaw, samples: PdfSamples) -> float:
    """1/mean clamped to [0.1, 10] x the decay rate seen in the sample tail."""
    beta = 1.0 / law.mean()
    f, t = samples.values, samples.t
    tail = (t > law.settling_time(0.02)) & (f > 1e-12 * f.max())
    if tail.sum() >= 4:
        slope = np.polyfit(t[tail], np.log(f[tail]), 1)[0]
        rate = max(-slope, 1e-12)
        beta = float(np.clip(beta, 0.1 * rate, 10.0 * rate))
    return float(beta)


def _check_bounds(f, fbar_res, h_fit, comp, h_final, dt):
    """Evaluate both distance bounds on the grid.  Returns (pull, comp, ok)."""
    ok = True
    pull = {}
    if fbar_res is not None:
        for p in (1, 2):
            lhs = abs(_norm(f.values - h_fit, dt, p) - _norm(fbar_res.samples.values - h_fit, dt, p))
            rhs = fbar_res.bound(f, p)
            pull[f"p{p}"] = {"lhs": lhs, "rhs": rhs}
            ok &= lhs <= rhs * (1 + 1e-9) + 1e-12
    cmp_ = {}
    if comp is not None:
        for p in (1, 2):
            lhs = abs(_norm(f.values - h_fit, dt, p) - _norm(f.values - h_final, dt, p))
            rhs = comp.bound_factor() * _norm(h_fit, dt, p)
            cmp_[f"p{p}"] = {"lhs": lhs, "rhs": rhs}
            ok &= lhs <= rhs * (1 + 1e-9) + 1e-12
    return pull, cmp_, bool(ok)


def _pipeline_for_beta(law, f, order, beta, opts, t_eps):
    dt, N = f.dt, f.count
    transient = f.t <= t_eps
    notes, heur = [], []

    # plain fit of full order
    full = laguerre_fit(f, order - 1, beta, match_origin=opts.match_origin)
    h = full.model.impulse_on_grid(dt, N)
    if h.min() >= -NEG_TOL and opts.compensator is None:
        return dict(rational=full.model, h_fit=h, h=h, bump=None, pull=None, comp=None,
                    notes=notes, heur=heur)
    if order < 2:
        raise FitFailure("order-1 fit is negative and leaves no room for a compensator",
                         {"beta": beta, "min_pdf": float(h.min())})

    # one order below, then pull-up and compensate
    target = f
    pull = None
    base = laguerre_fit(target, order - 2, beta, match_origin=opts.match_origin)
    hb = base.model.impulse_on_grid(dt, N)
    dip = float(-(hb[transient].min()))
    if dip > NEG_TOL:
        d0 = opts.bump_half_width or (0.4 / 1.4) * t_eps
        d0 = min(d0, f.t_end)
        if opts.bump_amplitude is not None:
            amps = [float(opts.bump_amplitude)]
        else:
            heur.append("bump amplitude from dip heuristic (peak = 1.05 x transient dip, doubled until clear)")
            first = 1.05 * dip * math.exp(1.0 / d0 ** 2)
            amps = [first * 2.0 ** k for k in range(opts.max_bump_doublings + 1)]
        for a0 in amps:
            pull = pull_up(f, BumpSpec(a0, d0, 0.0))
            base = laguerre_fit(pull.samples, order - 2, beta, match_origin=opts.match_origin)
            hb = base.model.impulse_on_grid(dt, N)
            if hb[transient].min() >= -NEG_TOL:
                break
        else:
            raise FitFailure("pull-up could not clear the transient zero crossings; raise the order",
                             {"beta": beta, "transient_min": float(hb[transient].min())})
    if hb.min() >= -NEG_TOL and opts.compensator is None and pull is not None:
        # the compensator would only add distortion; try the full order on the raised samples
        top = laguerre_fit(pull.samples, order - 1, beta, match_origin=opts.match_origin)
        ht = top.model.impulse_on_grid(dt, N)
        if ht.min() >= -NEG_TOL:
            notes.append("pull-up alone sufficed at full order")
            return dict(rational=top.model, h_fit=ht, h=ht, bump=pull, pull=pull, comp=None,
                        notes=notes, heur=heur)

    if opts.compensator is not None:
        z0, p0 = opts.compensator
        comp = compensate(base.model, z0, p0, dt, N)
        if not comp.nonnegative:
            raise FitFailure("fixed compensator leaves a negative impulse response",
                             {"beta": beta, "min_pdf": comp.min_impulse})
    else:
        alpha0 = base.model.dominant_decay()
        comp = None
        for ratio in opts.ratio_ladder:
            for k in range(1, opts.p0_steps + 1):
                p0 = alpha0 * opts.p0_shrink ** k
                cand = compensate(base.model, ratio * p0, p0, dt, N)
                if cand.nonnegative:
                    comp = cand
                    break
            if comp is not None:
                break
        if comp is None:
            raise FitFailure("no compensator in the ladder gives a non-negative density; raise the order",
                             {"beta": beta, "alpha0": alpha0})
    hc = comp.model.impulse_on_grid(dt, N)
    return dict(rational=comp.model, h_fit=hb, h=hc, bump=pull, pull=pull, comp=comp,
                notes=notes, heur=heur)


def fit_pipeline(target: AnalyticLaw, order: int, options: Optional[FitOptions] = None) -> FitResult:
    """Fit an order-``order`` ME model with a non-negative density to ``target``.

    Raises :class:`FitFailure` if no admissible model is found for any
    candidate ``beta``.
    """
    if order < 1 or int(order) != order:
        raise DomainError("order must be a positive integer")
    opts = options or FitOptions()
    t_eps = target.settling_time(opts.eps)
    dt = opts.dt or t_eps / 1000.0
    t_end = opts.t_end or 25.0 * t_eps
    f = sample_law(target, dt, t_end, opts.eps)
    seed = _default_beta(target, f)
    if isinstance(opts.beta, (int, float)):
        betas = [float(opts.beta)]
    elif opts.beta == "mean":
        betas = [seed]
    elif opts.beta == "search":
        betas = [seed] + [seed * r for r in opts.beta_ladder if r != 1.0]
    else:
        raise ValidationError(f"bad beta option {opts.beta!r}")

    cdf_true = target.cdf(f.t)
    best, failures = None, []
    for beta in betas:
        try:
            out = _pipeline_for_beta(target, f, int(order), beta, opts, t_eps)
        except FitFailure as exc:
            failures.append({"beta": beta, "reason": str(exc)})
            continue
        h = out["h"]
        score = _series_fit(f.values, h)
        if best is None or score > best[0] + 1e-9:
            best = (score, beta, out)
    if best is None:
        raise FitFailure("no admissible fit; raise the order", {"attempts": failures})

    score, beta, out = best
    rational = out["rational"].normalized()
    model = to_me_realization(rational)
    h = out["h"]
    cdf_hat = np.concatenate([[0.0], np.cumsum(0.5 * (h[1:] + h[:-1])) * dt])
    pull_b, comp_b, ok = _check_bounds(f, out["pull"], out["h_fit"], out["comp"], h, dt)
    rep = validate(model, horizon=t_end, grid_points=min(f.count, 20000))
    comp = out["comp"]
    report = FitReport(
        order=model.dim, beta=beta, fit_percent=score,
        cdf_fit_percent=_series_fit(cdf_true, cdf_hat),
        pulled_up=out["pull"] is not None, compensated=comp is not None,
        bump=None if out["pull"] is None else {
            "amplitude": out["pull"].bump.amplitude, "half_width": out["pull"].bump.half_width,
            "center": out["pull"].bump.center, "e_norm1": out["pull"].e_norm1,
            "e_norm2": out["pull"].e_norm2, "mass": out["pull"].mass},
        compensator=None if comp is None else {"z0": comp.z0, "p0": comp.p0,
                                               "k0": comp.p0 / comp.z0},
        min_pdf=float(min(h.min(), rep.min_pdf)), mass=rep.total_mass,
        pullup_bounds=pull_b, compensator_bounds=comp_b, bounds_hold=ok,
        notes=list(out["notes"]) + [f"beta candidates tried: {len(betas)}",
                                    f"grid dt={dt:.4g}, t_end={t_end:.4g}"],
        heuristics=list(out["heur"]) + (["beta chosen by fit-percent search"] if len(betas) > 1 else []),
    )
    if not rep.valid:
        raise FitFailure("fitted model failed validation: " + "; ".join(rep.messages), report.to_dict())
    return FitResult(model, rational, report)
