"""Lazy marked Poisson field of cylinders and the free network.

Each contour instance ``g`` carries a Poisson stream of births at rate
``exp(-beta |g|)`` with independent mean-one exponential lifetimes.  The
superposition of these streams over a square block of anchor translations
and a band of lifetimes is a single Poisson process whose points pick their
class with probability proportional to the class weight.  Realizing the field
block by block (rather than instance by instance) keeps the number of hash
evaluations proportional to the number of births in a region, which is what
the backward clan search needs when it asks for every instance incompatible
with a given cylinder.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from itertools import accumulate
from typing import Iterable, Iterator

from .lattice import ContourCatalog
from . import rng

Instance = tuple  # (class id, tx, ty)


@dataclass(frozen=True, slots=True, eq=False)
class Cylinder:
    """Space-time event: contour ``basis`` alive on ``[birth, birth + lifetime]``."""

    basis: Instance
    birth: float
    lifetime: float
    uid: tuple

    @property
    def death(self) -> float:
        return self.birth + self.lifetime

    def alive_at(self, t: float) -> bool:
        return self.birth <= t < self.birth + self.lifetime

    def order_key(self):
        """Birth order with deterministic tie-breaks."""
        return (self.birth, self.basis, self.uid)

    def __hash__(self) -> int:
        return hash(self.uid)

    def __eq__(self, other) -> bool:
        return isinstance(other, Cylinder) and self.uid == other.uid

    def __repr__(self) -> str:
        return f"Cylinder({self.basis}, birth={self.birth:.6g}, death={self.death:.6g})"


@dataclass(frozen=True)
class Band:
    lo: float
    hi: float
    prob: float          # P(lifetime in (lo, hi]) for the capped exponential
    width: float         # time-cell width


def lifetime_bands(max_lifetime: float = 64.0, cell_width: float = 1.0) -> list[Band]:
    """Partition (0, max_lifetime] into (0,1], (1,2], (2,4], ..."""
    edges = [0.0, 1.0]
    while edges[-1] < max_lifetime:
        edges.append(min(2 * edges[-1], max_lifetime))
    norm = 1.0 - math.exp(-max_lifetime)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        p = (math.exp(-lo) - math.exp(-hi)) / norm
        out.append(Band(lo, hi, p, cell_width * max(hi, 1.0)))
    return out


def auto_block(catalog: ContourCatalog, beta: float, max_class_length: int | None = None) -> int:
    """Power-of-two block side giving roughly two births per unit time per
    block, clamped to [8, 256]."""
    cap = catalog.max_length if max_class_length is None else max_class_length
    total = sum(math.exp(-beta * c.length) for c in catalog.classes if c.length <= cap)
    side = math.sqrt(2.0 / total)
    return int(min(256, max(8, 2 ** round(math.log2(side)))))


# immutable per-(catalog, beta, geometry) tables shared by realizations
_SHARED: dict = {}
_BLOCKS: dict = {}


class FieldRealization:
    """Consistent, lazily realized cylinder field for one seed.

    Single-owner object; the cache only memoizes values that are already
    fixed by the seed.
    """

    def __init__(self, catalog: ContourCatalog, beta: float, seed: int,
                 cell_width: float = 1.0, block: int | None = None, max_lifetime: float = 64.0,
                 max_class_length: int | None = None):
        self.catalog = catalog
        self.beta = float(beta)
        self.seed = int(seed) & rng.MASK
        self.cell_width = float(cell_width)
        self.max_lifetime = float(max_lifetime)
        cap = catalog.max_length if max_class_length is None else max_class_length
        self.block = int(block) if block is not None else auto_block(catalog, self.beta, cap)
        key = (id(catalog), self.beta, cap, self.block, self.cell_width, self.max_lifetime)
        shared = _SHARED.get(key)
        if shared is None:
            class_ids = [c.id for c in catalog.classes if c.length <= cap]
            weights = [math.exp(-self.beta * catalog.classes[c].length) for c in class_ids]
            bands = lifetime_bands(self.max_lifetime, self.cell_width)
            rate = self.block ** 2 * sum(weights)
            shared = (class_ids, sum(weights), list(accumulate(weights)), rate, bands,
                      [rng.PoissonTable(rate * b.prob * b.width) for b in bands],
                      [1.0 - math.exp(-(b.hi - b.lo)) for b in bands], catalog)
            if len(_SHARED) > 256:
                _SHARED.clear()
            _SHARED[key] = shared
        (self.class_ids, self.class_rate_sum, self._cum, self.block_rate, self.bands,
         self._tables, self._trunc, _) = shared
        self._cells: dict = {}
        self.cells_realized = 0

    def rate(self, inst: Instance) -> float:
        return math.exp(-self.beta * self.catalog.classes[inst[0]].length)

    def block_of(self, tx: int, ty: int) -> tuple[int, int]:
        return tx // self.block, ty // self.block

    # -- raw cells -----------------------------------------------------------

    def cell(self, bx: int, by: int, m: int, k: int) -> list[Cylinder]:
        key = (bx, by, m, k)
        got = self._cells.get(key)
        if got is not None:
            return got
        h = rng.hash_key(self.seed, rng.CELL, bx, by, m, k)
        n = self._tables[m].sample(rng.to_uniform(h))
        out = []
        if n:
            band = self.bands[m]
            B = self.block
            total = self._cum[-1]
            for i in range(n):
                u = rng.uniforms(rng.hash_key(self.seed, rng.POINT, bx, by, m, k, i), 5)
                c = self.class_ids[min(bisect_right(self._cum, u[0] * total), len(self._cum) - 1)]
                tx = bx * B + min(int(u[1] * B), B - 1)
                ty = by * B + min(int(u[2] * B), B - 1)
                birth = (k + u[3]) * band.width
                life = band.lo - math.log1p(-u[4] * self._trunc[m])
                out.append(Cylinder((c, tx, ty), birth, life, (bx, by, m, k, i)))
            out.sort(key=Cylinder.order_key)
        self._cells[key] = out
        self.cells_realized += 1
        if len(self._cells) > 2_000_000:
            self._cells.clear()
        return out

    def _cell_range(self, m: int, s: float, t: float) -> range:
        w = self.bands[m].width
        return range(math.floor(s / w), math.floor(t / w) + 1)

    # -- block queries -------------------------------------------------------

    def born_in_block(self, bx: int, by: int, s: float, t: float) -> list[Cylinder]:
        """Cylinders anchored in block (bx, by) with birth in [s, t)."""
        out = []
        for m in range(len(self.bands)):
            for k in self._cell_range(m, s, t):
                for cyl in self.cell(bx, by, m, k):
                    if s <= cyl.birth < t:
                        out.append(cyl)
        return out

    def alive_in_block(self, bx: int, by: int, t: float) -> list[Cylinder]:
        """Cylinders anchored in block (bx, by) born strictly before ``t`` and
        still alive at ``t``."""
        out = []
        for m, band in enumerate(self.bands):
            for k in self._cell_range(m, t - band.hi, t):
                for cyl in self.cell(bx, by, m, k):
                    if cyl.birth < t < cyl.birth + cyl.lifetime:
                        out.append(cyl)
        return out

    def live_during_block(self, bx: int, by: int, s: float, t: float) -> list[Cylinder]:
        """Cylinders anchored in block (bx, by) whose life meets (s, t)."""
        out = []
        for m, band in enumerate(self.bands):
            for k in self._cell_range(m, s - band.hi, t):
                for cyl in self.cell(bx, by, m, k):
                    if cyl.birth < t and cyl.birth + cyl.lifetime > s:
                        out.append(cyl)
        return out

    def blocks_covering(self, xmin: int, xmax: int, ymin: int, ymax: int) -> Iterator[tuple[int, int]]:
        B = self.block
        for bx in range(xmin // B, xmax // B + 1):
            for by in range(ymin // B, ymax // B + 1):
                yield bx, by

    # -- instance queries ----------------------------------------------------

    def cylinders_in(self, g: Instance, s: float, t: float) -> list[Cylinder]:
        """All cylinders with basis ``g`` born in [s, t), in birth order."""
        if not s < t:
            raise ValueError("empty window")
        bx, by = self.block_of(g[1], g[2])
        out = [c for c in self.born_in_block(bx, by, s, t) if c.basis == g]
        out.sort(key=Cylinder.order_key)
        return out

    def _wanted(self, instances) -> tuple[frozenset, list]:
        if isinstance(instances, frozenset):
            key = (instances, self.block)
            got = _BLOCKS.get(key)
            if got is None:
                got = (instances, sorted({self.block_of(g[1], g[2]) for g in instances}))
                if len(_BLOCKS) > 4096:
                    _BLOCKS.clear()
                _BLOCKS[key] = got
            return got
        wanted = frozenset(instances)
        return wanted, sorted({self.block_of(g[1], g[2]) for g in wanted})

    def alive_among(self, instances: Iterable[Instance], t: float) -> list[Cylinder]:
        """Cylinders of the stationary field alive at ``t`` with basis in ``instances``.

        Passing a frozenset lets repeated queries reuse the block list.
        """
        wanted, blocks = self._wanted(instances)
        out = []
        for bx, by in blocks:
            out.extend(c for c in self.alive_in_block(bx, by, t) if c.basis in wanted)
        out.sort(key=Cylinder.order_key)
        return out

    def live_among(self, instances: Iterable[Instance], s: float, t: float) -> list[Cylinder]:
        """Cylinders with basis in ``instances`` whose life meets (s, t)."""
        wanted, blocks = self._wanted(instances)
        out = []
        for bx, by in blocks:
            out.extend(c for c in self.live_during_block(bx, by, s, t) if c.basis in wanted)
        out.sort(key=Cylinder.order_key)
        return out

    def born_among(self, instances: Iterable[Instance], s: float, t: float) -> list[Cylinder]:
        wanted, blocks = self._wanted(instances)
        out = []
        for bx, by in blocks:
            out.extend(c for c in self.born_in_block(bx, by, s, t) if c.basis in wanted)
        out.sort(key=Cylinder.order_key)
        return out

    def initial_cylinders(self, config: Iterable[Instance], t0: float = 0.0) -> list[Cylinder]:
        """Cylinders born at ``t0`` for an initial configuration, with
        independent mean-one lifetimes drawn from a separate stream."""
        out = []
        for g in sorted(config):
            u = rng.to_uniform(rng.hash_key(self.seed, rng.INIT, *g))
            out.append(Cylinder(tuple(g), t0, -math.log(u), ("init",) + tuple(g)))
        return out

    def free_state(self, initial: Iterable[Instance], t: float,
                   region: Iterable[Instance]) -> dict[Instance, int]:
        """Free-network counts at time ``t >= 0`` started from ``initial`` at 0."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        region = sorted(set(region))
        counts = {g: 0 for g in region}
        for c in self.initial_cylinders([g for g in initial if g in counts]):
            if c.death > t:
                counts[c.basis] += 1
        if t > 0:
            for c in self.born_among(region, 0.0, t):
                if c.death > t:
                    counts[c.basis] += 1
        return counts

    def stationary_free_state(self, t: float, region: Iterable[Instance]) -> dict[Instance, int]:
        region = sorted(set(region))
        counts = {g: 0 for g in region}
        for c in self.alive_among(region, t):
            counts[c.basis] += 1
        return counts

    def dump(self) -> str:
        """Realized cylinders as text lines: class tx ty birth death."""
        lines = []
        for key in sorted(self._cells):
            for c in self._cells[key]:
                lines.append(f"{c.basis[0]}\t{c.basis[1]}\t{c.basis[2]}\t{c.birth!r}\t{c.death!r}")
        return "\n".join(lines) + ("\n" if lines else "")
