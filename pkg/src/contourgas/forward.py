"""Finite-volume loss network built mark by mark from the cylinder field.

Births are processed in time order; a newborn contour is kept iff it meets
no kept contour that is still alive, and kept contours leave at their death
time.  The free network (all births kept) dominates the loss network on the
same realization, so whenever the free network on the volume is empty the
loss network is empty too.  Those instants are used as regeneration points
for exact stationary sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Iterable, Sequence

from .field import Cylinder, FieldRealization
from .lattice import ContourCatalog, Plaquette


class HorizonTooShort(RuntimeError):
    """No regeneration time was found on the requested horizon."""


class IncompatibleConfiguration(ValueError):
    pass


class Volume:
    """Finite plaquette set together with the catalog contours inside it."""

    def __init__(self, catalog: ContourCatalog, plaquettes: Iterable[Plaquette],
                 max_length: int | None = None):
        self.catalog = catalog
        self.plaquettes = frozenset(Plaquette(*p) for p in plaquettes)
        cap = catalog.max_length if max_length is None else max_length
        self.admissible = [g for g in catalog.instances_inside(self.plaquettes)
                           if catalog.length(g) <= cap]
        self.index = {g: i for i, g in enumerate(self.admissible)}
        self.max_length = cap
        n = len(self.admissible)
        self.conflicts: list[set[int]] = [set() for _ in range(n)]
        for i, j in combinations(range(n), 2):
            if catalog.instances_incompatible(self.admissible[i], self.admissible[j]):
                self.conflicts[i].add(j)
                self.conflicts[j].add(i)

    @classmethod
    def box(cls, catalog: ContourCatalog, width: int, height: int, x0: int = 0, y0: int = 0,
            max_length: int | None = None) -> "Volume":
        """All lattice edges of the vertex rectangle [x0, x0+width] x [y0, y0+height]."""
        plaqs = [Plaquette(x, y, 0) for x in range(x0, x0 + width) for y in range(y0, y0 + height + 1)]
        plaqs += [Plaquette(x, y, 1) for x in range(x0, x0 + width + 1) for y in range(y0, y0 + height)]
        return cls(catalog, plaqs, max_length)

    def __len__(self) -> int:
        return len(self.admissible)

    def __contains__(self, g) -> bool:
        return g in self.index

    def is_compatible(self, config: Iterable) -> bool:
        idx = [self.index[g] for g in config]
        return all(j not in self.conflicts[i] for i, j in combinations(idx, 2))

    def compatible_configurations(self, limit: int = 1 << 22) -> list[frozenset]:
        """Every pairwise-compatible subset of the admissible contours."""
        out: list[frozenset] = []
        n = len(self.admissible)

        def rec(i, chosen, blocked):
            if len(out) > limit:
                raise OverflowError(f"more than {limit} compatible configurations")
            if i == n:
                out.append(frozenset(self.admissible[k] for k in chosen))
                return
            rec(i + 1, chosen, blocked)
            if i not in blocked:
                rec(i + 1, chosen + [i], blocked | self.conflicts[i])

        rec(0, [], frozenset())
        return out

    def anchor_bbox(self) -> tuple[int, int, int, int]:
        xs = [g[1] for g in self.admissible]
        ys = [g[2] for g in self.admissible]
        return min(xs), max(xs), min(ys), max(ys)


@dataclass
class Event:
    time: float
    kind: str            # "birth" or "death"
    basis: tuple
    kept: bool

    def line(self) -> str:
        return f"{self.time!r}\t{self.kind}\t{self.basis[0]}\t{self.basis[1]}\t{self.basis[2]}\t{int(self.kept)}"


@dataclass
class Trajectory:
    start: float
    end: float
    events: list[Event]
    final: frozenset
    kept: list[Cylinder] = field(default_factory=list)

    def export(self) -> str:
        return "".join(e.line() + "\n" for e in self.events)

    def configuration_at(self, t: float) -> frozenset:
        return frozenset(c.basis for c in self.kept if c.birth <= t < c.death)


def _run(volume: Volume, initial: Sequence[Cylinder], births: Sequence[Cylinder],
         end: float, log: bool) -> tuple[list[Cylinder], list[Event]]:
    """Core loss-network pass.  ``births`` must be sorted in birth order."""
    conflicts = volume.conflicts
    index = volume.index
    alive: dict[int, Cylinder] = {}
    kept = list(initial)
    events: list[Event] = []
    for c in initial:
        alive[index[c.basis]] = c
        if log:
            events.append(Event(c.birth, "birth", c.basis, True))
    for c in births:
        t = c.birth
        if alive:
            for i in [i for i, a in alive.items() if a.death <= t]:
                if log:
                    a = alive[i]
                    events.append(Event(a.death, "death", a.basis, True))
                del alive[i]
        i = index[c.basis]
        ok = i not in alive and not any(j in alive for j in conflicts[i])
        if ok:
            alive[i] = c
            kept.append(c)
        if log:
            events.append(Event(t, "birth", c.basis, ok))
    if log:
        for a in sorted(alive.values(), key=lambda a: a.death):
            if a.death <= end:
                events.append(Event(a.death, "death", a.basis, True))
        events.sort(key=lambda e: (e.time, e.kind != "death", e.basis))
    return kept, events


def run_forward(volume: Volume, initial: Iterable, horizon: float, field: FieldRealization,
                start: float = 0.0, log: bool = True) -> Trajectory:
    """Loss network on ``volume`` from ``initial`` at ``start`` up to ``start + horizon``."""
    initial = sorted(set(initial))
    for g in initial:
        if g not in volume:
            raise IncompatibleConfiguration(f"{g} is not admissible in the volume")
    if not volume.is_compatible(initial):
        raise IncompatibleConfiguration("initial configuration is not pairwise compatible")
    end = start + horizon
    init = field.initial_cylinders(initial, start)
    births = [c for c in field.born_among(volume.admissible, start, end) if c.birth > start]
    kept, events = _run(volume, init, births, end, log)
    final = frozenset(c.basis for c in kept if c.death > end)
    return Trajectory(start, end, events, final, kept)


def _busy_periods(cylinders: Sequence[Cylinder]) -> list[tuple[float, float]]:
    """Merge lives into maximal busy intervals (sorted input by birth)."""
    out: list[list[float]] = []
    for c in cylinders:
        if out and c.birth < out[-1][1]:
            out[-1][1] = max(out[-1][1], c.death)
        else:
            out.append([c.birth, c.death])
    return [(a, b) for a, b in out]


def regeneration_times(volume: Volume, field: FieldRealization, horizon: float,
                       start: float = 0.0) -> list[float]:
    """Instants in [start, start + horizon] at which the stationary free network
    on the volume becomes empty (ends of busy periods, and ``start`` itself if
    the volume is empty there)."""
    end = start + horizon
    live = field.live_among(volume.admissible, start, end)
    periods = _busy_periods(live)
    out = []
    if not periods or periods[0][0] > start:
        out.append(start)
    out.extend(b for a, b in periods if start <= b <= end)
    if not out:
        raise HorizonTooShort(f"free network never empties on [{start}, {end}]")
    return out


def last_empty_time(volume: Volume, field: FieldRealization, t_obs: float = 0.0,
                    lookback: float = 4.0, max_lookback: float = 1e5) -> float:
    """Latest time <= t_obs at which the stationary free network on the volume
    is empty."""
    if not volume.admissible:
        return t_obs
    while True:
        live = field.live_among(volume.admissible, t_obs - lookback, t_obs)
        alive_now = [c for c in live if c.birth < t_obs < c.death]
        if not alive_now:
            return t_obs
        periods = _busy_periods([c for c in live if c.birth < t_obs])
        a, b = periods[-1]
        if a > t_obs - lookback:
            return a
        if lookback >= max_lookback:
            raise HorizonTooShort(f"no empty instant within {max_lookback} before {t_obs}")
        lookback *= 2


def stationary_forward_sample(volume: Volume, field: FieldRealization, policy: str = "regeneration",
                              t_obs: float = 0.0, burn_in: float | None = None,
                              rho: float | None = None) -> frozenset:
    """Loss-network configuration at ``t_obs`` for the stationary dynamics.

    ``regeneration`` starts the construction at the last instant before
    ``t_obs`` where the free network on the volume was empty; since the loss
    network is dominated by the free network it is empty there too, and the
    result is an exact draw from the finite-volume Gibbs law.  ``burn_in``
    starts from the empty configuration ``burn_in`` time units earlier
    (default ``10 / rho``).
    """
    if policy == "regeneration":
        tau = last_empty_time(volume, field, t_obs)
        if tau >= t_obs:
            return frozenset()
        births = [c for c in field.born_among(volume.admissible, tau, t_obs)]
        kept, _ = _run(volume, [], births, t_obs, False)
        return frozenset(c.basis for c in kept if c.death > t_obs)
    if policy == "burn_in":
        if burn_in is None:
            if rho is None or rho <= 0:
                raise ValueError("burn_in policy needs burn_in or a positive rho")
            burn_in = 10.0 / rho
        return run_forward(volume, [], burn_in, field, start=t_obs - burn_in, log=False).final
    raise ValueError(f"unknown policy {policy!r}")


# ---------------------------------------------------------------------------
# exact chain on tiny volumes

def gibbs_weights(volume: Volume, z) -> dict[frozenset, object]:
    """Unnormalized Gibbs weights z**(total length) over compatible configurations.

    ``z`` may be a float (``exp(-beta)``) or an exact ``Fraction``.
    """
    out = {}
    for eta in volume.compatible_configurations():
        n = sum(volume.catalog.length(g) for g in eta)
        out[eta] = z ** n
    return out


def generator_rates(volume: Volume, z) -> dict[tuple[frozenset, frozenset], object]:
    """Transition rates of the loss network: add g at rate z**|g| when compatible,
    remove at rate 1."""
    rates = {}
    for eta in volume.compatible_configurations():
        for g in volume.admissible:
            if g in eta:
                rates[(eta, eta - {g})] = 1 if isinstance(z, Fraction) else 1.0
            elif volume.is_compatible(list(eta) + [g]):
                rates[(eta, eta | {g})] = z ** volume.catalog.length(g)
    return rates


def detailed_balance_defects(volume: Volume, z) -> list[tuple[frozenset, frozenset]]:
    """Transitions violating mu(a) r(a,b) = mu(b) r(b,a); empty when balanced."""
    mu = gibbs_weights(volume, z)
    rates = generator_rates(volume, z)
    bad = []
    for (a, b), r in rates.items():
        back = rates.get((b, a), 0)
        if mu[a] * r != mu[b] * back:
            bad.append((a, b))
    return bad
