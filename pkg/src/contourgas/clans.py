"""Backward clans of ancestors and exact sampling of the infinite-volume law.

The ancestors of a cylinder are the earlier-born cylinders that are still
alive at its birth and whose basis shares a vertex with its basis.  Starting
from the cylinders alive at time 0 on a window, repeated ancestor queries
give the clan.  Classifying clan members in birth order (kept iff no earlier
kept member meets it in space-time) and reading off the kept roots yields an
exact draw of the equilibrium configuration on the window.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .field import Cylinder, FieldRealization
from .lattice import ContourCatalog, Plaquette, TailDiverges, tail_sum


class TruncationWarning(UserWarning):
    """Contours longer than the catalog cap were not realized.

    ``neglected`` is a certified upper bound on the omitted birth intensity
    of contours through a single vertex (``inf`` if the tail model diverges).
    """

    def __init__(self, message: str, neglected: float):
        super().__init__(message)
        self.neglected = neglected


class HorizonExploded(RuntimeError):
    """The backward exploration went deeper or grew larger than allowed."""


@dataclass
class HorizonPolicy:
    initial: float = 16.0
    maximum: float = 4096.0
    max_members: int = 200_000


@dataclass
class ClanStats:
    TL: float
    SW: int
    size: int
    depth: int


@dataclass
class Clan:
    window: frozenset
    roots: list[Cylinder]
    members: list[Cylinder]            # breadth-first discovery order
    generation: dict                   # uid -> first generation (roots are 1)
    horizon: float
    neglected_intensity: float = 0.0
    kept: set | None = None            # uids of kept members
    t_obs: float = 0.0

    def __len__(self) -> int:
        return len(self.members)

    def is_kept(self, c: Cylinder) -> bool:
        if self.kept is None:
            raise ValueError("clan has not been classified")
        return c.uid in self.kept

    def dump(self) -> str:
        lines = []
        for c in sorted(self.members, key=Cylinder.order_key):
            k = "" if self.kept is None else str(int(c.uid in self.kept))
            lines.append(f"{c.basis[0]}\t{c.basis[1]}\t{c.basis[2]}\t{c.birth!r}\t{c.death!r}\t"
                         f"{self.generation[c.uid]}\t{k}")
        return "".join(line + "\n" for line in lines)


def neglected_intensity(catalog: ContourCatalog, beta: float) -> float:
    """Bound on the total rate of contours longer than the cap through one vertex.

    A contour through a vertex uses at least two of its four edges, so the
    count is at most twice the count through a fixed edge.
    """
    memo = catalog.__dict__.setdefault("_neglected", {})
    if beta not in memo:
        try:
            memo[beta] = 2.0 * tail_sum(beta, catalog.max_length, catalog.tail_model, power=0)
        except TailDiverges:
            memo[beta] = math.inf
    return memo[beta]


def window_instances(catalog: ContourCatalog, window: Iterable[Plaquette]) -> frozenset:
    """Catalog instances containing at least one window plaquette."""
    window = frozenset(Plaquette(*p) for p in window)
    memo = catalog.__dict__.setdefault("_window_instances", {})
    got = memo.get(window)
    if got is None:
        out = set()
        for p in window:
            out.update(catalog.through_plaquette(p))
        got = frozenset(out)
        if len(memo) > 4096:
            memo.clear()
        memo[window] = got
    return got


def cylinders_incompatible(catalog: ContourCatalog, a: Cylinder, b: Cylinder) -> bool:
    """Bases share a vertex and lives overlap."""
    if a.birth >= b.death or b.birth >= a.death:
        return False
    return not catalog.vertices(a.basis).isdisjoint(catalog.vertices(b.basis))


class ClanExplorer:
    """Ancestor queries on one field realization, optionally restricted to
    bases accepted by ``basis_ok`` (finite-volume clans)."""

    def __init__(self, field: FieldRealization, basis_ok: Callable[[tuple], bool] | None = None,
                 policy: HorizonPolicy | None = None, warn: bool = True):
        self.field = field
        self.catalog = field.catalog
        self.basis_ok = basis_ok
        self.policy = policy or HorizonPolicy()
        self.warn = warn
        self._reach: dict = {}
        wx0, wx1, wy0, wy1 = self.catalog.vertex_reach
        self._wreach = (wx0, wx1, wy0, wy1)

    def _anchor_range(self, c: int) -> tuple[int, int, int, int]:
        got = self._reach.get(c)
        if got is None:
            vs = self.catalog.classes[c].vertex_offsets
            ux = [v[0] for v in vs]
            uy = [v[1] for v in vs]
            wx0, wx1, wy0, wy1 = self._wreach
            got = (min(ux) - wx1, max(ux) - wx0, min(uy) - wy1, max(uy) - wy0)
            self._reach[c] = got
        return got

    def ancestors(self, c: Cylinder) -> list[Cylinder]:
        g = c.basis
        dx0, dx1, dy0, dy1 = self._anchor_range(g[0])
        f = self.field
        verts = self.catalog.vertices(g)
        vertices = self.catalog.vertices
        ok = self.basis_ok
        out = []
        for bx, by in f.blocks_covering(g[1] + dx0, g[1] + dx1, g[2] + dy0, g[2] + dy1):
            for a in f.alive_in_block(bx, by, c.birth):
                if not verts.isdisjoint(vertices(a.basis)) and (ok is None or ok(a.basis)):
                    out.append(a)
        out.sort(key=Cylinder.order_key)
        return out

    def roots_for(self, instances: Iterable[tuple], t_obs: float = 0.0) -> list[Cylinder]:
        if self.basis_ok is not None:
            instances = frozenset(g for g in instances if self.basis_ok(g))
        return self.field.alive_among(instances, t_obs)

    def explore(self, roots: Sequence[Cylinder], window: Iterable = (), t_obs: float = 0.0) -> Clan:
        policy = self.policy
        horizon = policy.initial
        members: dict = {}
        order: list[Cylinder] = []
        generation: dict = {}
        frontier = sorted(roots, key=Cylinder.order_key)
        for r in frontier:
            members[r.uid] = r
            order.append(r)
            generation[r.uid] = 1
        level = 1
        while frontier:
            nxt = []
            for c in frontier:
                for a in self.ancestors(c):
                    if a.uid in members:
                        continue
                    members[a.uid] = a
                    order.append(a)
                    generation[a.uid] = level + 1
                    nxt.append(a)
                    while a.birth < t_obs - horizon:
                        horizon *= 2
                        if horizon > policy.maximum:
                            raise HorizonExploded(
                                f"ancestor born at {a.birth:.4g}, beyond horizon {policy.maximum}")
                if len(order) > policy.max_members:
                    raise HorizonExploded(f"clan exceeded {policy.max_members} members")
            frontier = nxt
            level += 1
        neglected = neglected_intensity(self.catalog, self.field.beta) if self.catalog.max_length else 0.0
        if self.warn and neglected > 0:
            warnings.warn(TruncationWarning(
                f"contours longer than {self.catalog.max_length} omitted; "
                f"neglected intensity per vertex <= {neglected:.3g}", neglected), stacklevel=3)
        return Clan(frozenset(window), sorted(roots, key=Cylinder.order_key), order, generation, horizon,
                    neglected, None, t_obs)


def explore_clan(window: Iterable[Plaquette], field: FieldRealization,
                 policy: HorizonPolicy | None = None, warn: bool = True) -> Clan:
    """Clan of the cylinders alive at time 0 whose basis contains a window plaquette."""
    window = frozenset(Plaquette(*p) for p in window)
    ex = ClanExplorer(field, None, policy, warn)
    roots = ex.roots_for(window_instances(field.catalog, window))
    return ex.explore(roots, window)


def classify_kept(clan: Clan, catalog: ContourCatalog) -> Clan:
    """Birth-ordered pass: keep a member iff it meets no earlier kept member
    in space-time."""
    kept: list[Cylinder] = []
    uids = set()
    for c in sorted(clan.members, key=Cylinder.order_key):
        vc = catalog.vertices(c.basis)
        if all(k.death <= c.birth or vc.isdisjoint(catalog.vertices(k.basis)) for k in kept):
            kept.append(c)
            uids.add(c.uid)
    clan.kept = uids
    return clan


def perfect_sample(window: Iterable[Plaquette], field: FieldRealization,
                   policy: HorizonPolicy | None = None, warn: bool = True) -> frozenset:
    """Equilibrium configuration restricted to contours meeting the window."""
    clan = classify_kept(explore_clan(window, field, policy, warn), field.catalog)
    return kept_section(clan)


def kept_section(clan: Clan, t: float | None = None) -> frozenset:
    t = clan.t_obs if t is None else t
    return frozenset(c.basis for c in clan.members
                     if c.uid in clan.kept and c.birth < t < c.death)


def occupation(instances: Iterable[tuple], field: FieldRealization,
               policy: HorizonPolicy | None = None, warn: bool = True,
               basis_ok: Callable | None = None) -> frozenset:
    """Equilibrium occupation of the given contour instances (those occupied)."""
    ex = ClanExplorer(field, basis_ok, policy, warn)
    clan = classify_kept(ex.explore(ex.roots_for(instances)), field.catalog)
    return kept_section(clan)


def clan_statistics(clan: Clan, catalog: ContourCatalog, mode: str = "plaquettes") -> ClanStats:
    if not clan.members:
        return ClanStats(0.0, 0, 0, 0)
    tl = clan.t_obs - min(c.birth for c in clan.members)
    cover = set()
    if mode == "plaquettes":
        for c in clan.members:
            cover.update(catalog.plaquettes(c.basis))
    elif mode == "sites":
        for c in clan.members:
            cover.update(catalog.vertices(c.basis))
    else:
        raise ValueError(f"unknown space-width mode {mode!r}")
    return ClanStats(tl, len(cover), len(clan.members), max(clan.generation.values()))


def finite_volume_clan(window: Iterable[Plaquette], volume, field: FieldRealization,
                       policy: HorizonPolicy | None = None, warn: bool = True) -> Clan:
    """Clan built only from cylinders whose basis lies inside ``volume``."""
    window = frozenset(Plaquette(*p) for p in window)
    if not window <= volume.plaquettes:
        raise ValueError("window must lie inside the volume")
    ex = ClanExplorer(field, volume.__contains__, policy, warn)
    roots = ex.roots_for(window_instances(field.catalog, window))
    return ex.explore(roots, window)


def clans_incompatible(catalog: ContourCatalog, a: Clan, b: Clan) -> bool:
    """Whether some member of ``a`` meets some member of ``b`` in space-time."""
    if not a.members or not b.members:
        return False
    by_vertex: dict = {}
    for c in b.members:
        for v in catalog.vertices(c.basis):
            by_vertex.setdefault(v, []).append(c)
    for c in a.members:
        for v in catalog.vertices(c.basis):
            for d in by_vertex.get(v, ()):
                if c.birth < d.death and d.birth < c.death:
                    return True
    return False


def mixing_probe(window1: Iterable[Plaquette], window2: Iterable[Plaquette],
                 field1: FieldRealization, field2: FieldRealization,
                 policy: HorizonPolicy | None = None, warn: bool = True) -> bool:
    if field1.seed == field2.seed:
        raise ValueError("mixing probe needs independent realizations")
    a = explore_clan(window1, field1, policy, warn)
    b = explore_clan(window2, field2, policy, warn)
    return clans_incompatible(field1.catalog, a, b)
