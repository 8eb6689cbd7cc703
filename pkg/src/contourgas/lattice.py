"""Plaquettes, contours and the contour catalog on the square lattice.

In two dimensions a plaquette is a unit edge and its (d-2)-faces are the two
lattice vertices it joins.  A contour is a finite edge set in which every
vertex has even degree and which is connected through shared vertices.  Two
contours are incompatible when they share a vertex.

A contour *instance* is stored throughout the package as ``(cls, tx, ty)``:
the catalog class id plus the translation that carries the class
representative onto the instance.  Representatives are normalized so that
their lexicographically smallest plaquette sits at the origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

X, Y = 0, 1
AXIS_NAMES = ("X", "Y")

DEFAULT_MAX_LENGTH = 12
DEFAULT_NODE_LIMIT = 20_000_000


class NotClosed(ValueError):
    pass


class NotConnected(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    """Raised when enumeration visits more search nodes than allowed."""


class TailDiverges(ArithmeticError):
    """The contour-count tail model does not converge at this beta."""


class Plaquette(NamedTuple):
    """Unit edge from ``(x, y)`` to ``(x, y) + e_axis``.

    Ordering is lexicographic on ``(x, y, axis)``.
    """

    x: int
    y: int
    axis: int

    @property
    def endpoints(self) -> tuple[tuple[int, int], tuple[int, int]]:
        if self.axis == X:
            return (self.x, self.y), (self.x + 1, self.y)
        return (self.x, self.y), (self.x, self.y + 1)

    @property
    def center(self) -> tuple[float, float]:
        if self.axis == X:
            return (self.x + 0.5, float(self.y))
        return (float(self.x), self.y + 0.5)

    def shifted(self, dx: int, dy: int) -> "Plaquette":
        return Plaquette(self.x + dx, self.y + dy, self.axis)

    def __str__(self) -> str:
        return f"{self.x}:{self.y}:{AXIS_NAMES[self.axis]}"

    @classmethod
    def parse(cls, text: str) -> "Plaquette":
        x, y, a = text.split(":")
        return cls(int(x), int(y), AXIS_NAMES.index(a))


def plaquette_distance(p: Plaquette, q: Plaquette) -> float:
    """Manhattan distance between plaquette centers."""
    (ax, ay), (bx, by) = p.center, q.center
    return abs(ax - bx) + abs(ay - by)


def _vertices_of(plaquettes: Iterable[Plaquette]) -> frozenset:
    out = set()
    for p in plaquettes:
        out.update(p.endpoints)
    return frozenset(out)


class Contour:
    """A validated contour.  Build with :func:`validate_contour`."""

    __slots__ = ("plaquettes", "_vertices", "_hash")

    def __init__(self, plaquettes: Sequence[Plaquette]):
        self.plaquettes = tuple(sorted(plaquettes))
        self._vertices = None
        self._hash = hash(self.plaquettes)

    @property
    def length(self) -> int:
        return len(self.plaquettes)

    def __len__(self) -> int:
        return len(self.plaquettes)

    @property
    def vertices(self) -> frozenset:
        if self._vertices is None:
            self._vertices = _vertices_of(self.plaquettes)
        return self._vertices

    def translate(self, dx: int, dy: int) -> "Contour":
        return Contour([p.shifted(dx, dy) for p in self.plaquettes])

    def __contains__(self, p) -> bool:
        return p in self.plaquettes

    def __eq__(self, other) -> bool:
        return isinstance(other, Contour) and self.plaquettes == other.plaquettes

    def __lt__(self, other: "Contour") -> bool:
        return (self.length, self.plaquettes) < (other.length, other.plaquettes)

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        return f"Contour({' '.join(map(str, self.plaquettes))})"


def validate_contour(plaquettes: Iterable[Plaquette]) -> Contour:
    plaqs = {Plaquette(*p) for p in plaquettes}
    if not plaqs:
        raise ValueError("a contour needs at least one plaquette")
    degree: dict = {}
    incident: dict = {}
    for p in plaqs:
        for v in p.endpoints:
            degree[v] = degree.get(v, 0) + 1
            incident.setdefault(v, []).append(p)
    odd = [v for v, k in degree.items() if k % 2]
    if odd:
        raise NotClosed(f"vertex {min(odd)} has odd incidence")
    # connectivity through shared vertices
    start = min(plaqs)
    seen = {start}
    stack = [start]
    while stack:
        p = stack.pop()
        for v in p.endpoints:
            for q in incident[v]:
                if q not in seen:
                    seen.add(q)
                    stack.append(q)
    if len(seen) != len(plaqs):
        raise NotConnected(f"{len(plaqs) - len(seen)} plaquettes unreachable from {start}")
    return Contour(plaqs)


def incompatible(g: Contour, h: Contour) -> bool:
    return not g.vertices.isdisjoint(h.vertices)


def unit_square(x: int = 0, y: int = 0) -> Contour:
    return Contour([Plaquette(x, y, X), Plaquette(x, y + 1, X),
                    Plaquette(x, y, Y), Plaquette(x + 1, y, Y)])


def enumerate_through(anchor: Plaquette, max_length: int,
                      node_limit: int = DEFAULT_NODE_LIMIT) -> list[Contour]:
    """All contours of length <= ``max_length`` that contain ``anchor``.

    Every contour has an Eulerian circuit, which may be rotated to start on
    ``anchor`` and reversed so the anchor is crossed in its positive
    direction.  The search therefore walks edge-disjoint trails from the
    anchor's far endpoint and records the edge set each time the trail
    closes at the anchor's near endpoint.
    """
    if max_length < 4 or max_length % 2:
        raise ValueError(f"max_length must be an even integer >= 4, got {max_length}")
    anchor = Plaquette(*anchor)
    start, first = anchor.endpoints
    sx, sy = start
    used = [anchor]
    used_set = {anchor}
    found: set = set()
    nodes = 0

    def steps(v):
        x, y = v
        return ((Plaquette(x, y, X), (x + 1, y)), (Plaquette(x - 1, y, X), (x - 1, y)),
                (Plaquette(x, y, Y), (x, y + 1)), (Plaquette(x, y - 1, Y), (x, y - 1)))

    def dfs(v):
        nonlocal nodes
        nodes += 1
        if nodes > node_limit:
            raise BudgetExceeded(f"enumeration exceeded {node_limit} search nodes")
        n = len(used)
        if v == start and n >= 4:
            found.add(frozenset(used))
        remaining = max_length - n
        if remaining <= 0:
            return
        for e, w in steps(v):
            if e in used_set or abs(w[0] - sx) + abs(w[1] - sy) > remaining - 1:
                continue
            used.append(e)
            used_set.add(e)
            dfs(w)
            used.pop()
            used_set.discard(e)

    dfs(first)
    return sorted(Contour(s) for s in found)


def canonical_form(g: Contour) -> tuple[tuple[Plaquette, ...], tuple[int, int]]:
    """Representative plaquettes (min plaquette at origin) and translation."""
    m = g.plaquettes[0]
    rep = tuple(p.shifted(-m.x, -m.y) for p in g.plaquettes)
    return rep, (m.x, m.y)


@dataclass(frozen=True)
class ContourClass:
    """Translation class of contours, identified by its representative."""

    representative: Contour
    id: int = -1

    @property
    def length(self) -> int:
        return self.representative.length

    @property
    def multiplicity(self) -> int:
        """Translates of the class that contain a fixed X plaquette."""
        return sum(1 for p in self.representative.plaquettes if p.axis == X)

    @cached_property
    def vertex_offsets(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted(self.representative.vertices))


def canonicalize(g: Contour, catalog: "ContourCatalog | None" = None
                 ) -> tuple[ContourClass, tuple[int, int]]:
    rep, shift = canonical_form(g)
    if catalog is not None:
        return catalog.classes[catalog.class_id(rep)], shift
    return ContourClass(Contour(rep)), shift


# ---------------------------------------------------------------------------
# counting bounds for contours longer than the catalog cap

@dataclass(frozen=True)
class TailModel:
    """Upper-bound model for kappa(n), contours of length n through a plaquette.

    ``walk``  n * 4**n (closed-walk overcount; the default).
    ``trail`` 3**(n-1) (non-backtracking closed trails from the anchor).
    ``geometric`` extrapolation of the last exact counts; not certified.
    """

    kind: str = "walk"
    ratio: float = 0.0       # per-two-step growth for ``geometric``
    base_length: int = 0
    base_count: float = 0.0

    @property
    def certified(self) -> bool:
        return self.kind in ("walk", "trail")

    @property
    def growth(self) -> float:
        """Asymptotic per-unit-length growth of the bound."""
        if self.kind == "walk":
            return 4.0
        if self.kind == "trail":
            return 3.0
        return math.sqrt(self.ratio)

    def bound(self, n: int) -> float:
        if n % 2:
            return 0.0
        if self.kind == "walk":
            return float(n) * 4.0 ** n
        if self.kind == "trail":
            return 3.0 ** (n - 1)
        if self.kind == "geometric":
            steps = (n - self.base_length) // 2
            return self.base_count * self.ratio ** steps
        raise ValueError(f"unknown tail model {self.kind!r}")

    def log_bound(self, n: int) -> float:
        """Natural log of :meth:`bound`, without overflow; -inf for odd n."""
        if n % 2:
            return -math.inf
        if self.kind == "walk":
            return math.log(n) + n * math.log(4.0)
        if self.kind == "trail":
            return (n - 1) * math.log(3.0)
        if self.kind == "geometric":
            if self.base_count <= 0:
                return -math.inf
            steps = (n - self.base_length) // 2
            return math.log(self.base_count) + steps * math.log(self.ratio)
        raise ValueError(f"unknown tail model {self.kind!r}")


def contour_count_tail(n: int, model: TailModel | None = None) -> float:
    return (model or TailModel()).bound(n)


def tail_sum(beta: float, max_length: int, model: TailModel, power: int = 1,
             scale: float = 1.0) -> float:
    """Bound on sum over even n > max_length of n**power * kappa(n) * exp(-beta n)."""
    limit_ratio = model.growth ** 2 * math.exp(-2.0 * beta)
    if limit_ratio >= 1.0:
        raise TailDiverges(
            f"{model.kind} tail diverges at beta={beta:.4g} (needs beta > {math.log(model.growth):.4g})")

    def term(n):
        # log-space to avoid overflow of 4**n
        lb = model.log_bound(n)
        if lb == -math.inf:
            return 0.0
        return math.exp(power * math.log(n) + lb - beta * n) * scale

    total = 0.0
    n = max_length + 2
    while True:
        t = term(n)
        total += t
        t_next = term(n + 2)
        q = t_next / t if t > 0 else 0.0
        # successive ratios decrease toward limit_ratio; once q < 1 the rest
        # is dominated by a geometric series with ratio q
        if q < 1.0 and t_next <= 1e-18 * max(total, 1e-300):
            return total + t_next / (1.0 - q)
        n += 2
        if n > 100_000:
            raise TailDiverges("tail sum did not settle")


# ---------------------------------------------------------------------------

@dataclass
class ContourCatalog:
    """Every contour class with length <= ``max_length``.

    Immutable after construction apart from memoized lookup tables.
    """

    max_length: int
    classes: list[ContourClass]
    tail_model: TailModel = field(default_factory=TailModel)
    origin_mode: str = "plaquette"

    def __post_init__(self):
        self._by_rep = {c.representative.plaquettes: c.id for c in self.classes}
        self.lengths = np.array([c.length for c in self.classes], dtype=np.int64)
        self._vertex_sets = [frozenset(c.vertex_offsets) for c in self.classes]
        self._pair_offsets: dict = {}
        self._tables: dict = {}
        self._instance_cache: dict = {}
        if self.tail_model.kind == "geometric" and self.tail_model.ratio <= 0:
            self.tail_model = self.geometric_tail()

    @classmethod
    def build(cls, max_length: int = DEFAULT_MAX_LENGTH, tail_model: TailModel | None = None,
              origin_mode: str = "plaquette", node_limit: int = DEFAULT_NODE_LIMIT
              ) -> "ContourCatalog":
        contours = enumerate_through(Plaquette(0, 0, X), max_length, node_limit)
        reps = {canonical_form(g)[0] for g in contours}
        ordered = sorted(reps, key=lambda r: (len(r), r))
        classes = [ContourClass(Contour(r), i) for i, r in enumerate(ordered)]
        return cls(max_length, classes, tail_model or TailModel(), origin_mode)

    def __len__(self) -> int:
        return len(self.classes)

    def class_id(self, rep_plaquettes) -> int:
        return self._by_rep[tuple(rep_plaquettes)]

    def counts_by_length(self) -> dict[int, int]:
        """Number of translation classes per length."""
        out: dict[int, int] = {}
        for c in self.classes:
            out[c.length] = out.get(c.length, 0) + 1
        return dict(sorted(out.items()))

    def through_plaquette_counts(self) -> dict[int, int]:
        """kappa(n): contours of each length containing a fixed X plaquette."""
        out: dict[int, int] = {}
        for c in self.classes:
            out[c.length] = out.get(c.length, 0) + c.multiplicity
        return dict(sorted(out.items()))

    def geometric_tail(self) -> TailModel:
        """Extrapolate kappa(n) from the ratio of the two longest exact counts."""
        kappa = self.through_plaquette_counts()
        top = max(kappa)
        if top - 2 not in kappa:
            raise ValueError("geometric tail needs exact counts at two lengths")
        return TailModel("geometric", kappa[top] / kappa[top - 2], top, float(kappa[top]))

    # -- instances -----------------------------------------------------------

    def instance(self, g: Contour) -> tuple[int, int, int]:
        rep, (tx, ty) = canonical_form(g)
        return (self.class_id(rep), tx, ty)

    def contour(self, inst) -> Contour:
        c, tx, ty = inst
        return self.classes[c].representative.translate(tx, ty)

    def vertices(self, inst) -> frozenset:
        got = self._instance_cache.get(inst)
        if got is None:
            c, tx, ty = inst
            got = frozenset((x + tx, y + ty) for x, y in self.classes[c].vertex_offsets)
            if len(self._instance_cache) > 500_000:
                self._instance_cache.clear()
            self._instance_cache[inst] = got
        return got

    def plaquettes(self, inst) -> tuple[Plaquette, ...]:
        c, tx, ty = inst
        return tuple(p.shifted(tx, ty) for p in self.classes[c].representative.plaquettes)

    def length(self, inst) -> int:
        return self.classes[inst[0]].length

    def pair_offsets(self, c1: int, c2: int) -> frozenset:
        """Translations d such that class c2 shifted by d meets class c1."""
        key = (c1, c2)
        got = self._pair_offsets.get(key)
        if got is None:
            v1 = self.classes[c1].vertex_offsets
            v2 = self.classes[c2].vertex_offsets
            got = frozenset((a - c, b - d) for a, b in v1 for c, d in v2)
            self._pair_offsets[key] = got
        return got

    def instances_incompatible(self, g, h) -> bool:
        return (h[1] - g[1], h[2] - g[2]) in self.pair_offsets(g[0], h[0])

    def incompat_table(self, c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All instances incompatible with the representative of class ``c``.

        Returns arrays ``(cls, dx, dy)`` sorted lexicographically.
        """
        got = self._tables.get(c)
        if got is not None:
            return got
        cls_ids, wx, wy = self._all_vertices()
        span = 2 * self.max_length + 3
        off = self.max_length + 1
        keys = []
        for ux, uy in self.classes[c].vertex_offsets:
            keys.append((cls_ids * span + (ux - wx + off)) * span + (uy - wy + off))
        k = np.unique(np.concatenate(keys))
        dy = k % span - off
        k //= span
        dx = k % span - off
        got = (k // span, dx, dy)
        self._tables[c] = got
        return got

    def incompat_counts(self) -> np.ndarray:
        """Matrix N[c, c']: number of translates of class c' meeting the
        representative of class c."""
        if not hasattr(self, "_counts"):
            n = len(self.classes)
            mat = np.zeros((n, n), dtype=np.int64)
            for c in range(n):
                mat[c] = np.bincount(self.incompat_table(c)[0], minlength=n)
            self._counts = mat
        return self._counts

    def _all_vertices(self):
        if not hasattr(self, "_va"):
            ids, xs, ys = [], [], []
            for cl in self.classes:
                for x, y in cl.vertex_offsets:
                    ids.append(cl.id)
                    xs.append(x)
                    ys.append(y)
            self._va = (np.array(ids), np.array(xs), np.array(ys))
        return self._va

    @cached_property
    def vertex_reach(self) -> tuple[int, int, int, int]:
        """Bounding box of representative vertex offsets (xmin, xmax, ymin, ymax)."""
        _, xs, ys = self._all_vertices()
        return int(xs.min()), int(xs.max()), int(ys.min()), int(ys.max())

    @cached_property
    def plaquette_reach(self) -> tuple[int, int, int, int]:
        xs = [p.x for c in self.classes for p in c.representative.plaquettes]
        ys = [p.y for c in self.classes for p in c.representative.plaquettes]
        return min(xs), max(xs), min(ys), max(ys)

    def through_plaquette(self, p: Plaquette) -> list[tuple[int, int, int]]:
        """Instances that contain plaquette ``p``."""
        out = []
        for c in self.classes:
            for q in c.representative.plaquettes:
                if q.axis == p.axis:
                    out.append((c.id, p.x - q.x, p.y - q.y))
        return out

    def through_vertex(self, v: tuple[int, int]) -> list[tuple[int, int, int]]:
        out = []
        for c in self.classes:
            for x, y in c.vertex_offsets:
                out.append((c.id, v[0] - x, v[1] - y))
        return out

    @cached_property
    def face_index(self) -> dict[tuple[int, int], list[tuple[int, int, int]]]:
        """Vertex offset -> instances through the origin vertex, keyed by the
        representative vertex that lands on the origin."""
        index: dict = {}
        for c in self.classes:
            for x, y in c.vertex_offsets:
                index.setdefault((x, y), []).append((c.id, -x, -y))
        return index

    def origin_contours(self) -> list[tuple[int, int, int]]:
        """Instances counted by the alpha_0 sum (see ``origin_mode``)."""
        if self.origin_mode == "plaquette":
            return self.through_plaquette(Plaquette(0, 0, X))
        if self.origin_mode == "site":
            return self.through_vertex((0, 0))
        raise ValueError(f"unknown origin_mode {self.origin_mode!r}")

    def instances_inside(self, plaquettes: Iterable[Plaquette]) -> list[tuple[int, int, int]]:
        """Instances whose plaquettes all lie in the given set."""
        region = frozenset(Plaquette(*p) for p in plaquettes)
        out = []
        for c in self.classes:
            rep = c.representative.plaquettes
            m = rep[0]  # at the origin by construction
            for q in region:
                if q.axis != m.axis:
                    continue
                if all(p.shifted(q.x, q.y) in region for p in rep):
                    out.append((c.id, q.x, q.y))
        return sorted(out)

    # -- text export ---------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"# contourgas catalog max_length={self.max_length} classes={len(self.classes)}"]
        for c in self.classes:
            lines.append(f"{c.length}\t" + " ".join(map(str, c.representative.plaquettes)))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, tail_model: TailModel | None = None) -> "ContourCatalog":
        max_length = None
        classes = []
        for line in text.splitlines():
            if line.startswith("#"):
                for tok in line.split():
                    if tok.startswith("max_length="):
                        max_length = int(tok.split("=")[1])
                continue
            if not line.strip():
                continue
            length, plaqs = line.split("\t")
            g = validate_contour(Plaquette.parse(s) for s in plaqs.split())
            if g.length != int(length):
                raise ValueError(f"record length {length} disagrees with {g.length} plaquettes")
            classes.append(ContourClass(g, len(classes)))
        if max_length is None:
            max_length = max(c.length for c in classes)
        return cls(max_length, classes, tail_model or TailModel())

    @classmethod
    def load(cls, path, tail_model: TailModel | None = None) -> "ContourCatalog":
        return cls.loads(Path(path).read_text(), tail_model)


_CATALOGS: dict = {}


def get_catalog(max_length: int = DEFAULT_MAX_LENGTH, tail: str = "walk",
                origin_mode: str = "plaquette") -> ContourCatalog:
    """Process-wide memoized catalog."""
    key = (max_length, tail, origin_mode)
    if key not in _CATALOGS:
        _CATALOGS[key] = ContourCatalog.build(max_length, TailModel(tail), origin_mode)
    return _CATALOGS[key]
