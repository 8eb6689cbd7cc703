"""Subcriticality constants, the dominating branching process and the
closed-form bounds built from them.

Notation used below:

* ``alpha0(beta)``: sum over contours containing a fixed plaquette of
  ``|g| exp(-beta |g|)``.
* ``alpha(beta)``: sup over ``g`` of ``|g|^-1`` times the sum over contours
  ``h`` meeting ``g`` of ``|h| exp(-beta |h|)``.  A contour of length ``n``
  has at most ``n`` vertices, so the per-vertex sum
  ``sum_{h through v} |h| exp(-beta |h|)`` is an upper bracket; the unit
  square gives a lower witness.

All values are computed on the catalog (contours of length <= L).  Tail
terms for longer contours come from the catalog's counting model and are
reported separately, because the walk model diverges for beta <= log 4
while the truncated quantities are exact for the truncated gas that the
simulators realize.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .lattice import ContourCatalog, TailDiverges, tail_sum, unit_square
from .rng import BRANCH, Stream


class DomainError(ValueError):
    """A bound was requested outside its range of validity."""


class PopulationExplosion(RuntimeError):
    """Branching population exceeded the configured node cap."""


def _weights(catalog: ContourCatalog, beta: float) -> np.ndarray:
    return np.exp(-beta * catalog.lengths.astype(float))


def _tail(catalog: ContourCatalog, beta: float, power: int, scale: float = 1.0) -> float:
    return tail_sum(beta, catalog.max_length, catalog.tail_model, power=power, scale=scale)


def alpha0(beta: float, catalog: ContourCatalog) -> tuple[float, float]:
    """(truncated value, tail bound) for the origin sum."""
    if beta <= 0:
        raise TailDiverges("beta must be positive")
    total = 0.0
    if catalog.origin_mode == "plaquette":
        for c in catalog.classes:
            total += c.multiplicity * c.length * math.exp(-beta * c.length)
        return total, _tail(catalog, beta, 1)
    if catalog.origin_mode == "site":
        return vertex_sum(beta, catalog), vertex_tail(beta, catalog)
    raise ValueError(f"unknown origin_mode {catalog.origin_mode!r}")


def vertex_sum(beta: float, catalog: ContourCatalog) -> float:
    """Truncated sum over contours through a fixed vertex of |h| e^{-beta|h|}."""
    total = 0.0
    for c in catalog.classes:
        total += len(c.vertex_offsets) * c.length * math.exp(-beta * c.length)
    return total


def vertex_tail(beta: float, catalog: ContourCatalog) -> float:
    """Tail bound for :func:`vertex_sum`.

    A contour through a vertex uses at least two of the four incident edges,
    so it is counted at most twice as often as contours through one edge.
    """
    return _tail(catalog, beta, 1, scale=2.0)


def neighbor_sum(beta: float, catalog: ContourCatalog, c: int) -> float:
    """Truncated sum over contours h meeting class representative c of |h| e^{-beta|h|}."""
    w = _weights(catalog, beta) * catalog.lengths
    return float(catalog.incompat_counts()[c] @ w)


@dataclass(frozen=True)
class AlphaBracket:
    lower: float          # ratio at the unit square (truncated)
    upper: float          # per-vertex bracket (truncated)
    tail: float           # bound on what contours longer than L add to either

    @property
    def upper_certified(self) -> float:
        return self.upper + self.tail


def alpha(beta: float, catalog: ContourCatalog) -> AlphaBracket:
    if beta <= 0:
        raise TailDiverges("beta must be positive")
    upper = vertex_sum(beta, catalog)
    sq = catalog.instance(unit_square())[0]
    lower = neighbor_sum(beta, catalog, sq) / 4.0
    try:
        tail = vertex_tail(beta, catalog)
    except TailDiverges:
        tail = math.inf
    return AlphaBracket(lower, upper, tail)


def alpha_upper(beta: float, catalog: ContourCatalog, include_tail: bool = False) -> float:
    a = alpha(beta, catalog)
    return a.upper_certified if include_tail else a.upper


def beta_star(catalog: ContourCatalog, tol: float = 1e-6, include_tail: bool = False,
              lo: float = 1e-3, hi: float = 20.0) -> tuple[float, float]:
    """Interval [lo, hi] with alpha_upper(hi) < 1 <= alpha_upper(lo), width <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")

    def f(b):
        try:
            return alpha_upper(b, catalog, include_tail)
        except TailDiverges:
            return math.inf

    if f(hi) >= 1:
        raise DomainError(f"alpha_upper >= 1 even at beta={hi}")
    if f(lo) < 1:
        return (0.0, lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 1:
            hi = mid
        else:
            lo = mid
    return (lo, hi)


def offspring_mean(g, h, beta: float, catalog: ContourCatalog | None = None) -> float:
    """Poisson mean of type-h children of a type-g node: exp(-beta|h|) if they meet."""
    from .lattice import Contour, incompatible
    if isinstance(g, Contour):
        return math.exp(-beta * h.length) if incompatible(g, h) else 0.0
    if catalog is None:
        raise ValueError("instances need a catalog")
    if catalog.instances_incompatible(g, h):
        return math.exp(-beta * catalog.length(h))
    return 0.0


def mean_matrix(beta: float, catalog: ContourCatalog) -> np.ndarray:
    """Class-level mean matrix K[c, c'] = N[c, c'] exp(-beta |c'|)."""
    return catalog.incompat_counts() * _weights(catalog, beta)[None, :]


def generation_means(beta: float, catalog: ContourCatalog, n_max: int,
                     weighted: bool = True) -> np.ndarray:
    """Row n holds, per root class, sum over h of m^n(root, h) (times |h| if weighted)."""
    K = mean_matrix(beta, catalog)
    u = catalog.lengths.astype(float) if weighted else np.ones(len(catalog))
    out = [u]
    for _ in range(n_max):
        u = K @ u
        out.append(u)
    return np.array(out)


# ---------------------------------------------------------------------------
# branching simulation

@dataclass
class BranchingRun:
    sizes: list[int]              # nodes per generation (root generation 0)
    masses: list[int]             # sum of |theta| per generation
    nodes: list[tuple] = field(default_factory=list)   # (generation, instance)


class _Offspring:
    """Per-class categorical sampler over incompatible instances."""

    def __init__(self, catalog: ContourCatalog, beta: float):
        self.catalog = catalog
        self.w = _weights(catalog, beta)
        self._cache: dict = {}

    def table(self, c: int):
        got = self._cache.get(c)
        if got is None:
            cls, dx, dy = self.catalog.incompat_table(c)
            cum = np.cumsum(self.w[cls])
            got = (cls, dx, dy, cum, float(cum[-1]))
            self._cache[c] = got
        return got


def simulate_branching(root, max_gen: int, beta: float, catalog: ContourCatalog, seed: int,
                       node_cap: int = 1_000_000, keep_nodes: bool = False,
                       _offspring: _Offspring | None = None) -> BranchingRun:
    """Multitype Galton-Watson tree: a type-g node has Poisson(m(g, h)) children
    of each type h, independently."""
    if max_gen < 0:
        raise ValueError("max_gen must be >= 0")
    root = tuple(root) if not isinstance(root, int) else (root, 0, 0)
    off = _offspring or _Offspring(catalog, beta)
    stream = Stream(seed, BRANCH, *root)
    lengths = catalog.lengths
    sizes = [1]
    masses = [int(lengths[root[0]])]
    nodes = [(0, root)] if keep_nodes else []
    frontier = [root]
    total = 1
    for n in range(1, max_gen + 1):
        nxt = []
        for g in frontier:
            cls, dx, dy, cum, lam = off.table(g[0])
            k = stream.poisson(lam)
            for _ in range(k):
                i = int(np.searchsorted(cum, stream.uniform() * lam, side="right"))
                i = min(i, len(cls) - 1)
                nxt.append((int(cls[i]), g[1] + int(dx[i]), g[2] + int(dy[i])))
            total += k
            if total > node_cap:
                raise PopulationExplosion(f"branching population exceeded {node_cap}")
        frontier = nxt
        sizes.append(len(nxt))
        masses.append(int(sum(lengths[h[0]] for h in nxt)))
        if keep_nodes:
            nodes.extend((n, h) for h in nxt)
        if not nxt:
            sizes.extend([0] * (max_gen - n))
            masses.extend([0] * (max_gen - n))
            break
    return BranchingRun(sizes, masses, nodes)


# ---------------------------------------------------------------------------
# domination of a clan by a branching process

@dataclass
class DominationResult:
    clan_sizes: list[int]         # members per generation (roots first)
    branching_sizes: list[int]    # nodes per generation of the dominating process
    fresh: int                    # nodes drawn independently of the field
    contained: bool

    @property
    def clan_total(self) -> int:
        return sum(self.clan_sizes)

    @property
    def branching_total(self) -> int:
        return sum(self.branching_sizes)


def coupled_domination_check(clan, field, seed: int, node_cap: int = 200_000,
                             extra_generations: int = 64) -> DominationResult:
    """Build a branching process B containing the clan, member by member.

    Members are processed in discovery order.  The children of a member C in
    B are the real cylinders in its ancestor region R(C) not already in the
    region of an earlier-processed member, plus independent fresh Poisson
    points in the part of R(C) that earlier members already covered.  Every
    member's offspring is then Poisson with means m(Basis C, .) and independent
    of the others, real ancestors are never lost, and fresh points start
    independent subtrees.
    """
    catalog = field.catalog
    beta = field.beta
    off = _Offspring(catalog, beta)
    stream = Stream(seed, BRANCH, 0x5EED)
    verts = catalog.vertices
    gen = clan.generation
    members = list(clan.members)
    depth = max(gen.values()) if gen else 0
    clan_sizes = [0] * depth
    for c in members:
        clan_sizes[gen[c.uid] - 1] += 1
    b_sizes = list(clan_sizes) + [0] * extra_generations
    explorer_ancestors = _ancestor_fn(field)
    in_b = {c.uid for c in clan.roots}
    contained = True
    processed: list = []
    fresh_total = 0
    total = len(members)

    def covered(basis, birth, death) -> bool:
        vb = verts(basis)
        for p in processed:
            if birth < p.birth < death and not vb.isdisjoint(verts(p.basis)):
                return True
        return False

    for c in members:
        if c.uid not in in_b:
            contained = False
        n = gen[c.uid]
        for a in explorer_ancestors(c):
            if covered(a.basis, a.birth, a.death):
                continue          # claimed by an earlier member
            in_b.add(a.uid)
        # fresh points over the region of c, kept where already covered
        cls, dx, dy, cum, lam = off.table(c.basis[0])
        k = stream.poisson(lam)
        for _ in range(k):
            i = min(int(np.searchsorted(cum, stream.uniform() * lam, side="right")), len(cls) - 1)
            h = (int(cls[i]), c.basis[1] + int(dx[i]), c.basis[2] + int(dy[i]))
            age = stream.exponential()
            residual = stream.exponential()
            birth, death = c.birth - age, c.birth + residual
            if not covered(h, birth, death):
                continue
            fresh_total += 1
            sub = simulate_branching(h, extra_generations, beta, catalog,
                                     seed=_sub_seed(seed, fresh_total), node_cap=node_cap,
                                     _offspring=off)
            for j, s in enumerate(sub.sizes):
                if n + j < len(b_sizes):
                    b_sizes[n + j] += s
            total += sum(sub.sizes)
            if total > node_cap:
                raise PopulationExplosion(f"dominating process exceeded {node_cap} nodes")
        processed.append(c)
    while len(b_sizes) > len(clan_sizes) and b_sizes[-1] == 0:
        b_sizes.pop()
    ok = contained and all(a <= b for a, b in zip(clan_sizes, b_sizes))
    return DominationResult(clan_sizes, b_sizes, fresh_total, ok)


def _sub_seed(seed: int, i: int) -> int:
    from .rng import hash_key
    return hash_key(seed, BRANCH, 0x50B, i)


def _ancestor_fn(field):
    from .clans import ClanExplorer
    return ClanExplorer(field, warn=False).ancestors


# ---------------------------------------------------------------------------
# bound report and closed-form bounds

@dataclass
class BoundReport:
    beta: float
    max_length: int
    tail_model: str
    alpha0: float
    alpha0_tail: float
    alpha_lower: float
    alpha_upper: float
    alpha_tail: float
    beta_star: tuple[float, float]
    beta_tilde: float | None
    alpha0_tilde: float | None
    alpha_tilde: float | None
    rho: float | None
    M2: float | None
    M3: float | None
    h_max: float | None

    @property
    def subcritical(self) -> bool:
        return self.alpha_upper < 1.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["beta_star"] = list(self.beta_star)
        return d

    def as_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())


def _finite_or_inf(fn):
    try:
        return fn()
    except TailDiverges:
        return math.inf


def bound_report(beta: float, catalog: ContourCatalog, beta_tilde: float | None = None,
                 tol: float = 1e-9) -> BoundReport:
    a0 = alpha0_truncated(beta, catalog)
    a0_tail = _finite_or_inf(lambda: alpha0(beta, catalog)[1])
    br = alpha(beta, catalog)
    bs = beta_star(catalog, tol)
    sub = br.upper < 1.0
    rho = (1 - br.upper) / (2 - br.upper) if sub else None
    M2 = M3 = a0t = at = None
    if sub and beta > bs[1]:
        if beta_tilde is None:
            beta_tilde = 0.5 * (beta + bs[1])
        if not bs[1] < beta_tilde < beta:
            raise DomainError(f"beta_tilde={beta_tilde} outside ({bs[1]}, {beta})")
        at = alpha(beta_tilde, catalog).upper
        a0t = alpha0_truncated(beta_tilde, catalog)
        M2 = 1.0 / (1.0 - at)
        M3 = beta - beta_tilde
    else:
        beta_tilde = None
    return BoundReport(beta, catalog.max_length, catalog.tail_model.kind, a0, a0_tail,
                       br.lower, br.upper, br.tail, bs, beta_tilde, a0t, at, rho, M2, M3,
                       (1.0 / br.upper) if br.upper > 0 else math.inf)


def alpha0_truncated(beta: float, catalog: ContourCatalog) -> float:
    if catalog.origin_mode == "plaquette":
        return sum(c.multiplicity * c.length * math.exp(-beta * c.length) for c in catalog.classes)
    return vertex_sum(beta, catalog)


class Bounds:
    """Closed-form bounds evaluated from a :class:`BoundReport`."""

    def __init__(self, report: BoundReport, catalog: ContourCatalog | None = None):
        self.r = report
        self.catalog = catalog

    def _need_sub(self):
        if not self.r.subcritical:
            raise DomainError(f"alpha_upper = {self.r.alpha_upper:.4g} >= 1")

    def _need_tilde(self):
        self._need_sub()
        if self.r.M2 is None:
            raise DomainError("beta must exceed beta_star for the space bounds")

    def time_conv(self, t: float, supp_size: int, f_norm: float = 1.0) -> float:
        self._need_sub()
        r = self.r
        return 2 * f_norm * supp_size * (r.alpha0 / r.rho) * math.exp(-r.rho * t)

    def space_conv(self, distances: Sequence[float], f_norm: float = 1.0) -> float:
        """Distances from each support site to the complement of the volume."""
        self._need_tilde()
        r = self.r
        return 2 * f_norm * r.alpha0_tilde * r.M2 * sum(math.exp(-r.M3 * d) for d in distances)

    def mixing(self, pairs_distances: Sequence[float], f_norm: float = 1.0,
               g_norm: float = 1.0) -> float:
        self._need_tilde()
        r = self.r
        return 2 * f_norm * g_norm * r.M2 ** 2 * sum(d * math.exp(-r.M3 * d) for d in pairs_distances)

    def tl_tail(self, t: float) -> float:
        self._need_sub()
        return self.r.alpha0 * math.exp(-(1 - self.r.alpha_upper) * t)

    def tl_tail_gamma(self, t: float) -> float:
        self._need_sub()
        a = self.r.alpha_upper
        return self.r.alpha0 / (a * (1 - a)) * math.exp(-(1 - a) * t)

    @property
    def sw_mean(self) -> float:
        self._need_sub()
        return self.r.alpha0 / (1 - self.r.alpha_upper)

    def sw_mgf(self, a: float) -> float:
        """Bound on E exp(a SW), valid for a < beta - beta_star."""
        self._need_sub()
        b = self.r.beta - a
        if not a < self.r.beta - self.r.beta_star[1]:
            raise DomainError(f"a={a} must be below beta - beta_star")
        if self.catalog is None:
            raise DomainError("sw_mgf needs the catalog")
        al = alpha(b, self.catalog).upper
        return alpha0_truncated(b, self.catalog) / (1 - al)

    def sw_tail(self, ell: float, beta_tilde: float | None = None) -> float:
        self._need_tilde()
        r = self.r
        if beta_tilde is None or beta_tilde == r.beta_tilde:
            a0t, at, bt = r.alpha0_tilde, r.alpha_tilde, r.beta_tilde
        else:
            if not r.beta_star[1] < beta_tilde < r.beta:
                raise DomainError("beta_tilde outside (beta_star, beta)")
            if self.catalog is None:
                raise DomainError("custom beta_tilde needs the catalog")
            a0t = alpha0_truncated(beta_tilde, self.catalog)
            at = alpha(beta_tilde, self.catalog).upper
            bt = beta_tilde
        return a0t / (1 - at) * math.exp(-(r.beta - bt) * ell)

    def r_t(self, length: int, t: float) -> float:
        """Mean number of branches alive at time t from a root of this length."""
        return length * math.exp((self.r.alpha_upper - 1) * t)
