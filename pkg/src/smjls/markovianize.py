"""Expansion of a semi-Markov jump linear system into a clustered chain.

Every conditional holding-time model becomes a diagonal block of the
expanded rate matrix.  A block's exit-rate vector is routed into the
entry (first) phases of the successor mode's blocks, so the cluster of a
mode is the set of phases belonging to its blocks.

Two wirings are supported per mode:

* per-edge blocks: one block per successor; the block routes wholly to
  its own successor, and the embedded probability is applied on entry;
* a shared (coalesced) block: one unconditional holding law whose exit
  rates are split across successors by the embedded probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy import integrate

from .distributions import (ME, PH, Exponential, ModelDensityLaw, PhaseModel,
                            exponential_model, law_ccdf, law_mean, law_pdf,
                            truncation_horizon, validate)
from .errors import DomainError, NumericError, ValidationError

ROW_TOL = 1e-9


def _mat(x, name):
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    return a


@dataclass(frozen=True)
class ModeDynamics:
    """``dx = (A + B K) x`` with stage weights ``Q``, ``R`` and terminal ``S``."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        A, B = _mat(self.A, "A"), _mat(self.B, "B")
        Q, R, S = _mat(self.Q, "Q"), _mat(self.R, "R"), _mat(self.S, "S")
        nx, nu = A.shape[0], B.shape[1]
        if A.shape != (nx, nx) or B.shape[0] != nx:
            raise ValidationError("A must be square and B must have as many rows as A")
        if Q.shape != (nx, nx) or S.shape != (nx, nx) or R.shape != (nu, nu):
            raise ValidationError("weight shapes do not match the dynamics")
        for name, W, floor in (("Q", Q, -1e-9), ("S", S, -1e-9), ("R", R, 1e-9)):
            if not np.allclose(W, W.T, atol=1e-12, rtol=0):
                raise ValidationError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(W).min() < floor:
                raise ValidationError(f"{name} violates its definiteness floor")
        for name, val in zip("ABQRS", (A, B, Q, R, S)):
            object.__setattr__(self, name, val)

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    def same_as(self, other: "ModeDynamics") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "ABQRS")


@dataclass(frozen=True)
class Edge:
    """Transition to ``target``; ``law`` is the conditional holding law."""

    target: str
    probability: Optional[float] = None
    law: object = None


@dataclass(frozen=True)
class Mode:
    """A mode, its dynamics and outgoing edges.

    ``transition`` is ``"given"`` (probabilities on the edges) or ``"race"``
    (probabilities computed by racing the edge laws).  ``holding`` is an
    optional shared law used by every edge; the chain then gets a single
    block for the mode.
    """

    name: str
    dynamics: ModeDynamics
    edges: Tuple[Edge, ...] = ()
    transition: str = "given"
    holding: object = None

    @property
    def coalesced(self) -> bool:
        return self.holding is not None

    def edge_law(self, edge: Edge):
        return self.holding if self.coalesced else edge.law


@dataclass(frozen=True)
class SemiMarkovSpec:
    modes: Tuple[Mode, ...]
    mu0: np.ndarray
    x0: np.ndarray
    t_f: float

    def __post_init__(self):
        names = [m.name for m in self.modes]
        if len(set(names)) != len(names):
            raise ValidationError("mode names must be unique")
        mu0 = np.asarray(self.mu0, dtype=float).ravel()
        if mu0.size != len(self.modes) or np.any(mu0 < 0) or abs(mu0.sum() - 1) > 1e-9:
            raise ValidationError("initial mode probabilities must be non-negative and sum to one")
        x0 = np.asarray(self.x0, dtype=float).ravel()
        if not self.t_f > 0:
            raise ValidationError("horizon must be positive")
        nx = {m.dynamics.nx for m in self.modes}
        nu = {m.dynamics.nu for m in self.modes}
        if len(nx) != 1 or len(nu) != 1 or x0.size not in nx:
            raise ValidationError("all modes must share state and input dimensions matching x0")
        for m in self.modes:
            if m.transition not in ("given", "race"):
                raise ValidationError(f"mode {m.name}: transition must be 'given' or 'race'")
            seen = set()
            for e in m.edges:
                if e.target == m.name:
                    raise ValidationError(f"mode {m.name}: self transitions are not allowed")
                if e.target not in names:
                    raise ValidationError(f"mode {m.name}: dangling successor {e.target!r}")
                if e.target in seen:
                    raise ValidationError(f"mode {m.name}: duplicate edge to {e.target!r}")
                seen.add(e.target)
                if m.edge_law(e) is None:
                    raise ValidationError(f"mode {m.name}: edge to {e.target} has no holding law")
            if m.transition == "given" and m.edges:
                ps = [e.probability for e in m.edges]
                if any(p is None for p in ps):
                    raise ValidationError(f"mode {m.name}: given transitions need probabilities")
                if any(p < 0 for p in ps) or abs(sum(ps) - 1.0) > 1e-9:
                    raise ValidationError(f"mode {m.name}: probabilities must sum to one")
            if m.transition == "race" and m.coalesced:
                raise ValidationError(f"mode {m.name}: a shared holding law cannot be raced")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "t_f", float(self.t_f))

    def index(self, name: str) -> int:
        for i, m in enumerate(self.modes):
            if m.name == name:
                return i
        raise KeyError(name)

    def mode(self, name: str) -> Mode:
        return self.modes[self.index(name)]

    def resolved_probabilities(self) -> Dict[str, Dict[str, float]]:
        """Embedded probabilities per mode, racing where requested."""
        out = {}
        for m in self.modes:
            if not m.edges:
                out[m.name] = {}
            elif m.transition == "given":
                out[m.name] = {e.target: float(e.probability) for e in m.edges}
            else:
                out[m.name] = embedded_probability({e.target: e.law for e in m.edges})
        return out

    def embedded_matrix(self) -> np.ndarray:
        probs = self.resolved_probabilities()
        P = np.zeros((len(self.modes),) * 2)
        for m in self.modes:
            for tgt, p in probs[m.name].items():
                P[self.index(m.name), self.index(tgt)] = p
        return P

    def map_laws(self, fn) -> "SemiMarkovSpec":
        """Copy with every holding law replaced by ``fn(law)``."""
        modes = []
        for m in self.modes:
            edges = tuple(Edge(e.target, e.probability, None if e.law is None else fn(e.law))
                          for e in m.edges)
            holding = None if m.holding is None else fn(m.holding)
            modes.append(Mode(m.name, m.dynamics, edges, m.transition, holding))
        return SemiMarkovSpec(tuple(modes), self.mu0, self.x0, self.t_f)


def mean_matched_exponential(spec: SemiMarkovSpec) -> SemiMarkovSpec:
    """Nominal Markov surrogate: each law replaced by an exponential of equal mean.

    Racing modes keep the probabilities of the original race.
    """
    probs = spec.resolved_probabilities()
    modes = []
    for m in spec.modes:
        edges = tuple(Edge(e.target, probs[m.name][e.target],
                           None if e.law is None else Exponential(1.0 / law_mean(e.law)))
                      for e in m.edges)
        holding = None if m.holding is None else Exponential(1.0 / law_mean(m.holding))
        modes.append(Mode(m.name, m.dynamics, edges, "given", holding))
    return SemiMarkovSpec(tuple(modes), spec.mu0, spec.x0, spec.t_f)


# ------------------------------------------------------------- racing ----

def embedded_probability(racing_laws: Mapping[str, object], epsabs: float = 1e-11) -> Dict[str, float]:
    """Probabilities that each law's draw is the smallest.

    ``p_j = int f_j(t) prod_{l != j} (1 - F_l(t)) dt`` by adaptive
    quadrature, renormalized to sum to one.
    """
    names = list(racing_laws)
    if not names:
        raise ValidationError("racing needs at least one successor")
    if len(names) == 1:
        return {names[0]: 1.0}
    laws = [racing_laws[n] for n in names]
    horizon = 0.0
    for law in laws:
        if isinstance(law, PhaseModel):
            horizon = max(horizon, truncation_horizon(law))
        else:
            horizon = max(horizon, float(law.ppf(1.0 - 1e-12)))
    raw = []
    for j, name in enumerate(names):
        def integrand(t, j=j):
            val = float(law_pdf(laws[j], t))
            for l, other in enumerate(laws):
                if l != j:
                    val *= float(law_ccdf(other, t))
            return val
        val, err = integrate.quad(integrand, 0.0, horizon, epsabs=epsabs, epsrel=1e-10, limit=500)
        if err > 1e-7:
            raise NumericError(f"race quadrature for {name!r} reached only {err:.2g}")
        raw.append(val)
    total = sum(raw)
    if abs(total - 1.0) > 1e-5:
        raise NumericError(f"race probabilities sum to {total:.8f} before renormalization")
    return {n: v / total for n, v in zip(names, raw)}


# -------------------------------------------------------------- chain ----

@dataclass(frozen=True)
class Block:
    mode: str
    target: Optional[str]      # None for a shared (coalesced) or absorbing block
    start: int
    dim: int
    model: Optional[PhaseModel]

    @property
    def phases(self) -> range:
        return range(self.start, self.start + self.dim)


@dataclass(frozen=True, eq=False)
class ClusteredChain:
    """Expanded chain with per-phase copies of the cluster dynamics."""

    Pi: np.ndarray
    cluster_of: np.ndarray
    cluster_names: Tuple[str, ...]
    A: np.ndarray              # (n_v, nx, nx)
    B: np.ndarray              # (n_v, nx, nu)
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    mu0: np.ndarray
    x0: np.ndarray
    t_f: float
    pseudo: bool
    blocks: Tuple[Block, ...] = field(default=())

    def __post_init__(self):
        rows = np.abs(self.Pi.sum(axis=1)).max()
        scale = max(1.0, np.abs(self.Pi).max())
        if rows > ROW_TOL * scale:
            raise ValidationError(f"rate matrix rows do not sum to zero (max {rows:.3g})")
        if abs(self.mu0.sum() - 1.0) > 1e-9:
            raise ValidationError("initial phase probabilities must sum to one")
        if not self.pseudo:
            off = self.Pi - np.diag(np.diag(self.Pi))
            if np.any(off < -1e-12):
                raise ValidationError("negative off-diagonal rate in a non-pseudo chain")
        k = self.cluster_of
        if np.any(np.diff(k) < 0):
            raise ValidationError("cluster phases must be contiguous")

    @property
    def n_phases(self) -> int:
        return self.Pi.shape[0]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_names)

    @property
    def nx(self) -> int:
        return self.A.shape[1]

    @property
    def nu(self) -> int:
        return self.B.shape[2]

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == k)

    def cluster_index(self, name: str) -> int:
        return self.cluster_names.index(name)

    def homogeneous_clusters(self) -> bool:
        """True when every phase of a cluster shares A, B, Q, R, S."""
        for k in range(self.n_clusters):
            idx = self.members(k)
            for arr in (self.A, self.B, self.Q, self.R, self.S):
                if not np.all(arr[idx] == arr[idx[0]]):
                    return False
        return True

    def with_dynamics(self, A=None, B=None, Q=None, R=None, S=None) -> "ClusteredChain":
        kw = {name: (getattr(self, name) if val is None else np.asarray(val, dtype=float))
              for name, val in zip("ABQRS", (A, B, Q, R, S))}
        return ClusteredChain(self.Pi, self.cluster_of, self.cluster_names, mu0=self.mu0,
                              x0=self.x0, t_f=self.t_f, pseudo=self.pseudo, blocks=self.blocks, **kw)

    def with_horizon(self, t_f: float) -> "ClusteredChain":
        return ClusteredChain(self.Pi, self.cluster_of, self.cluster_names, self.A, self.B,
                              self.Q, self.R, self.S, self.mu0, self.x0, float(t_f),
                              self.pseudo, self.blocks)

    # -- interchange --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "pi": self.Pi.ravel().tolist(),
            "n_phases": self.n_phases,
            "cluster_of": self.cluster_of.tolist(),
            "cluster_names": list(self.cluster_names),
            "nx": self.nx,
            "nu": self.nu,
            "A": self.A.ravel().tolist(),
            "B": self.B.ravel().tolist(),
            "Q": self.Q.ravel().tolist(),
            "R": self.R.ravel().tolist(),
            "S": self.S.ravel().tolist(),
            "mu0": self.mu0.tolist(),
            "x0": self.x0.tolist(),
            "t_f": self.t_f,
            "pseudo": self.pseudo,
        }

    @classmethod
    def from_dict(cls, d) -> "ClusteredChain":
        n, nx, nu = int(d["n_phases"]), int(d["nx"]), int(d["nu"])
        arr = lambda k, shape: np.asarray(d[k], dtype=float).reshape(shape)
        return cls(arr("pi", (n, n)), np.asarray(d["cluster_of"], dtype=int),
                   tuple(d["cluster_names"]), arr("A", (n, nx, nx)), arr("B", (n, nx, nu)),
                   arr("Q", (n, nx, nx)), arr("R", (n, nu, nu)), arr("S", (n, nx, nx)),
                   np.asarray(d["mu0"], dtype=float), np.asarray(d["x0"], dtype=float),
                   float(d["t_f"]), bool(d["pseudo"]))


def exact_model(law) -> PhaseModel:
    """PhaseModel for a law that has an exact finite representation."""
    if isinstance(law, PhaseModel):
        return law
    if isinstance(law, Exponential):
        return exponential_model(law.rate)
    if isinstance(law, ModelDensityLaw):
        return law.model
    raise ValidationError(f"{type(law).__name__} has no exact phase model; supply a fitted one")


def edge_keys(spec: SemiMarkovSpec):
    """Keys of the models ``assemble_chain`` needs: (mode, target) or (mode, None)."""
    keys = []
    for m in spec.modes:
        if not m.edges:
            continue
        if m.coalesced:
            keys.append((m.name, None))
        else:
            keys.extend((m.name, e.target) for e in m.edges)
    return keys


def model_law_spec(spec: SemiMarkovSpec, models: Mapping[tuple, PhaseModel]) -> SemiMarkovSpec:
    """The semi-Markov system whose holding laws are the given models.

    Probabilities are those of ``spec``.  Simulating this spec samples the
    law the chain was built from, so it isolates simulator error from
    approximation error.
    """
    probs = spec.resolved_probabilities()
    modes = []
    for m in spec.modes:
        if m.coalesced:
            holding = ModelDensityLaw(models[(m.name, None)]) if m.edges else m.holding
            edges = tuple(Edge(e.target, probs[m.name][e.target], None) for e in m.edges)
        else:
            holding = None
            edges = tuple(Edge(e.target, probs[m.name][e.target], ModelDensityLaw(models[(m.name, e.target)]))
                          for e in m.edges)
        modes.append(Mode(m.name, m.dynamics, edges, "given", holding))
    return SemiMarkovSpec(tuple(modes), spec.mu0, spec.x0, spec.t_f)


def default_models(spec: SemiMarkovSpec) -> Dict[tuple, PhaseModel]:
    out = {}
    for m in spec.modes:
        if m.coalesced and m.edges:
            out[(m.name, None)] = exact_model(m.holding)
        else:
            for e in m.edges:
                out[(m.name, e.target)] = exact_model(e.law)
    return out


def assemble_chain(spec: SemiMarkovSpec, models: Optional[Mapping[tuple, PhaseModel]] = None,
                   validate_horizon: Optional[float] = None) -> ClusteredChain:
    """Build the clustered chain.

    ``models`` maps ``(mode, target)`` (or ``(mode, None)`` for a shared
    law) to the PhaseModel placed on the diagonal; by default the exact
    representation of each law is used.
    """
    models = dict(default_models(spec) if models is None else models)
    probs = spec.resolved_probabilities()
    horizon = validate_horizon or spec.t_f

    blocks = []
    start = 0
    for m in spec.modes:
        if not m.edges:
            blocks.append(Block(m.name, None, start, 1, None))
            start += 1
            continue
        keys = [(m.name, None)] if m.coalesced else [(m.name, e.target) for e in m.edges]
        for key in keys:
            if key not in models:
                raise ValidationError(f"no phase model for edge {key}")
            model = models[key]
            if model.kind == ME:
                rep = validate(model, horizon=horizon)
                if not rep.valid:
                    raise ValidationError(f"edge {key}: model failed validation ({'; '.join(rep.messages)})")
            blocks.append(Block(m.name, key[1], start, model.dim, model))
            start += model.dim

    n = start
    Pi = np.zeros((n, n))
    mu0 = np.zeros(n)
    names = tuple(m.name for m in spec.modes)
    cluster_of = np.empty(n, dtype=int)

    def entry_weight(block: Block) -> float:
        mode = spec.mode(block.mode)
        if block.model is None or mode.coalesced:
            return 1.0
        return probs[mode.name][block.target]

    by_mode = {name: [b for b in blocks if b.mode == name] for name in names}
    for b in blocks:
        cluster_of[list(b.phases)] = names.index(b.mode)
        mu0[b.start] += spec.mu0[names.index(b.mode)] * entry_weight(b)
        if b.model is None:
            continue
        sl = slice(b.start, b.start + b.dim)
        Pi[sl, sl] = b.model.sub_generator
        mode = spec.mode(b.mode)
        routes = probs[mode.name] if mode.coalesced else {b.target: 1.0}
        for tgt, route in routes.items():
            for c in by_mode[tgt]:
                Pi[sl, c.start] += b.model.exit_vector * route * entry_weight(c)

    dyn = [spec.mode(names[k]).dynamics for k in cluster_of]
    stack = lambda attr: np.array([getattr(d, attr) for d in dyn])
    pseudo = any(b.model is not None and b.model.kind == ME for b in blocks)
    return ClusteredChain(Pi, cluster_of, names, stack("A"), stack("B"), stack("Q"),
                          stack("R"), stack("S"), mu0, spec.x0.copy(), spec.t_f, pseudo,
                          tuple(blocks))


def pdf_equivalent_variant(chain: ClusteredChain, block, transform) -> ClusteredChain:
    """Similar chain where one block's realization is replaced by ``T^-1 Pi T``.

    ``block`` is a block index or a mode name (first block of that mode).
    ``T`` must satisfy ``T 1 = 1`` and ``e_1' T = e_1'`` so the entry and
    exit conventions, hence the holding pdf, are preserved.
    """
    if isinstance(block, str):
        candidates = [i for i, b in enumerate(chain.blocks) if b.mode == block and b.model is not None]
        if not candidates:
            raise DomainError(f"mode {block!r} has no transient block")
        block = candidates[0]
    b = chain.blocks[block]
    T = np.atleast_2d(np.asarray(transform, dtype=float))
    if T.shape != (b.dim, b.dim):
        raise DomainError("transform size does not match the block")
    if not np.allclose(T @ np.ones(b.dim), 1.0, atol=1e-12, rtol=0):
        raise DomainError("transform must satisfy T 1 = 1")
    if not np.allclose(T[0], np.eye(b.dim)[0], atol=1e-12, rtol=0):
        raise DomainError("transform must satisfy e_1' T = e_1'")
    if abs(np.linalg.det(T)) < 1e-12:
        raise DomainError("transform must be invertible")
    n = chain.n_phases
    D = np.eye(n)
    sl = slice(b.start, b.start + b.dim)
    D[sl, sl] = T
    Pi = np.linalg.solve(D, chain.Pi @ D)
    mu0 = chain.mu0 @ D
    new_block = PhaseModel(Pi[sl, sl].copy(), ME)
    if b.model is not None:
        grid = np.linspace(0.0, max(chain.t_f, 10 * b.model.mean()), 400)
        diff = np.abs(new_block.pdf(grid) - b.model.pdf(grid)).max()
        if diff > 1e-10 * max(1.0, np.abs(b.model.pdf(grid)).max()):
            raise NumericError(f"transformed block pdf moved by {diff:.3g}")
    try:
        kind = PhaseModel(new_block.sub_generator, PH).kind
    except ValidationError:
        kind = ME
    new_model = PhaseModel(new_block.sub_generator, kind)
    blocks = tuple(Block(x.mode, x.target, x.start, x.dim, new_model if i == block else x.model)
                   for i, x in enumerate(chain.blocks))
    off = Pi - np.diag(np.diag(Pi))
    pseudo = chain.pseudo or kind == ME or bool(np.any(off < -1e-12))
    return ClusteredChain(Pi, chain.cluster_of.copy(), chain.cluster_names, chain.A, chain.B,
                          chain.Q, chain.R, chain.S, mu0, chain.x0, chain.t_f, pseudo, blocks)


def convention_preserving_transform(dim: int, rng: Optional[np.random.Generator] = None,
                                    scale: float = 0.5) -> np.ndarray:
    """Random ``T = I + u w'`` with ``u_1 = 0`` and ``w'1 = 0`` (so ``T 1 = 1``, ``e_1'T = e_1'``)."""
    if dim == 1:
        return np.eye(1)
    rng = rng or np.random.default_rng(0)
    u = rng.uniform(-scale, scale, dim)
    u[0] = 0.0
    w = rng.uniform(-1.0, 1.0, dim)
    w -= w.mean()
    T = np.eye(dim) + np.outer(u, w)
    return T
