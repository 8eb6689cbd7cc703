"""Exact small-volume oracle, distances between laws, and the experiments
that compare the samplers against the analytic bounds.

Every experiment returns an :class:`ExperimentRecord`.  Verdicts name the
bound they check and the confidence level (``3sigma``: normal
approximation, three standard errors).
"""
from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import rng
from .branching import Bounds, bound_report, coupled_domination_check, simulate_branching
from .clans import ClanExplorer, TruncationWarning, classify_kept, clan_statistics, explore_clan, occupation
from .field import FieldRealization
from .forward import Volume, run_forward, stationary_forward_sample
from .lattice import ContourCatalog, Plaquette, X, unit_square


class SupportTooLarge(RuntimeError):
    pass


class ScaleTooLarge(RuntimeError):
    pass


class DegenerateVariance(ArithmeticError):
    pass


Z3 = 3.0  # every verdict uses three standard errors


# ---------------------------------------------------------------------------
# exact Gibbs law on a finite volume

@dataclass
class ExactDistribution:
    volume: Volume
    beta: float
    support: list[frozenset]
    weights: np.ndarray        # normalized
    Z: float

    def __post_init__(self):
        self._index = {eta: i for i, eta in enumerate(self.support)}

    def prob(self, eta) -> float:
        i = self._index.get(frozenset(eta))
        return 0.0 if i is None else float(self.weights[i])

    def marginal(self, g) -> float:
        """Probability that contour ``g`` is present."""
        return float(sum(w for eta, w in zip(self.support, self.weights) if g in eta))

    def as_dict(self) -> dict:
        return {eta: float(w) for eta, w in zip(self.support, self.weights)}


def exact_gibbs(volume: Volume, beta: float, cap: int = 1 << 20) -> ExactDistribution:
    try:
        support = volume.compatible_configurations(limit=cap)
    except OverflowError as e:
        raise SupportTooLarge(str(e)) from None
    lengths = np.array([sum(volume.catalog.length(g) for g in eta) for eta in support], dtype=float)
    w = np.exp(-beta * lengths)
    Z = float(w.sum())
    return ExactDistribution(volume, beta, support, w / Z, Z)


# ---------------------------------------------------------------------------
# total variation

@dataclass
class TVResult:
    tv: float
    halfwidth: float          # 3-sigma sampling half-width of the plug-in estimate
    n: int


def tv_distance(hist: dict, exact: ExactDistribution | dict) -> TVResult:
    """Half L1 distance between an empirical histogram (counts) and a law."""
    law = exact.as_dict() if isinstance(exact, ExactDistribution) else dict(exact)
    n = sum(hist.values())
    if n == 0:
        raise ValueError("empty histogram")
    keys = set(law) | set(hist)
    tv = 0.5 * sum(abs(hist.get(k, 0) / n - law.get(k, 0.0)) for k in keys)
    hw = 0.5 * Z3 * sum(math.sqrt(p * (1 - p) / n) for p in law.values())
    return TVResult(tv, hw, n)


def tv_between(h1: dict, h2: dict) -> TVResult:
    """Half L1 distance between two empirical histograms."""
    n1, n2 = sum(h1.values()), sum(h2.values())
    keys = set(h1) | set(h2)
    tv = 0.5 * sum(abs(h1.get(k, 0) / n1 - h2.get(k, 0) / n2) for k in keys)
    hw = 0.0
    for k in keys:
        p = (h1.get(k, 0) + h2.get(k, 0)) / (n1 + n2)
        hw += math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    return TVResult(tv, 0.5 * Z3 * hw, min(n1, n2))


# ---------------------------------------------------------------------------
# records

@dataclass
class ExperimentRecord:
    name: str
    parameters: dict
    statistics: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)     # tabular detail, one dict per row
    metadata: dict = field(default_factory=dict)

    def verdict(self, key: str, passed: bool, formula: str, detail: str = "",
                ci: str = "3sigma") -> None:
        self.verdicts[key] = {"pass": bool(passed), "formula": formula, "ci": ci, "detail": detail}

    @property
    def passed(self) -> bool:
        return all(v["pass"] for v in self.verdicts.values())

    def as_dict(self) -> dict:
        return {"name": self.name, "parameters": self.parameters, "statistics": self.statistics,
                "bounds": self.bounds, "verdicts": self.verdicts, "rows": self.rows,
                "metadata": self.metadata, "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.as_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.rows:
            cols = sorted({k for r in self.rows for k in r})
            w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r.get(k, "")) for k in cols})
        else:
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["section", "key", "value"])
            for sec in ("statistics", "bounds"):
                for k, v in sorted(getattr(self, sec).items()):
                    w.writerow([sec, k, _fmt(v)])
        return buf.getvalue()

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        jp, cp = d / f"{self.name}.json", d / f"{self.name}.csv"
        jp.write_text(self.to_json())
        cp.write_text(self.to_csv())
        return jp, cp


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return _jsonable(float(x))
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, (frozenset, set)):
        return sorted(_jsonable(v) for v in x)
    return x


# ---------------------------------------------------------------------------
# replica fan-out

_TASK: Callable | None = None


def _call_task(i: int):
    return _TASK(i)


def map_replicas(fn: Callable[[int], object], n: int, workers: int = 1, chunksize: int = 64) -> list:
    """``[fn(i) for i in range(n)]``, optionally across forked processes.

    Results come back in replica order, so the fold is deterministic.  The
    task is handed to workers through fork inheritance, which lets closures
    be used as tasks.
    """
    global _TASK
    if workers <= 1 or n < 2 * chunksize:
        return [fn(i) for i in range(n)]
    _TASK = fn
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            return list(ex.map(_call_task, range(n), chunksize=chunksize))
    finally:
        _TASK = None


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        return float(x.mean()) if n else 0.0, 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(n))


def _field(catalog, beta, master, i, **kw) -> FieldRealization:
    return FieldRealization(catalog, beta, rng.replica_seed(master, i), **kw)


def _truncation_note(catalog: ContourCatalog, beta: float) -> dict:
    from .clans import neglected_intensity
    v = neglected_intensity(catalog, beta)
    return {"max_length": catalog.max_length, "tail_model": catalog.tail_model.kind,
            "neglected_intensity_per_vertex": v}


# ---------------------------------------------------------------------------
# geometry helpers

def greedy_packing(volume: Volume) -> frozenset:
    """Maximal compatible configuration built greedily in canonical order."""
    chosen: list = []
    for g in volume.admissible:
        if volume.is_compatible(chosen + [g]):
            chosen.append(g)
    return frozenset(chosen)


def distance_to_complement(volume: Volume, site: tuple[int, int]) -> float:
    """Manhattan distance from a lattice site to the nearest plaquette center
    outside the volume."""
    xs = [p.x for p in volume.plaquettes]
    ys = [p.y for p in volume.plaquettes]
    best = math.inf
    for x in range(min(xs) - 1, max(xs) + 2):
        for y in range(min(ys) - 1, max(ys) + 2):
            for axis in (0, 1):
                p = Plaquette(x, y, axis)
                if p in volume.plaquettes:
                    continue
                cx, cy = p.center
                best = min(best, abs(cx - site[0]) + abs(cy - site[1]))
    return best


# ---------------------------------------------------------------------------
# experiments

def gibbs_experiment(catalog: ContourCatalog, volume: Volume, beta: float, replicas: int,
                     seed: int, tol: float = 0.02, workers: int = 1,
                     cap: int = 1 << 20) -> ExperimentRecord:
    """Forward stationary sampler against the exact finite-volume law."""
    exact = exact_gibbs(volume, beta, cap)
    cap = volume.max_length

    def one(i):
        f = _field(catalog, beta, seed, i, max_class_length=cap)
        return stationary_forward_sample(volume, f)

    samples = map_replicas(one, replicas, workers)
    hist = Counter(samples)
    res = tv_distance(hist, exact)
    rec = ExperimentRecord("gibbs", {"beta": beta, "max_length": cap, "replicas": replicas,
                                     "seed": seed, "contours": len(volume),
                                     "configurations": len(exact.support)})
    rec.statistics.update(tv=res.tv, tv_halfwidth=res.halfwidth,
                          p_empty_exact=exact.prob(frozenset()),
                          p_empty_empirical=hist.get(frozenset(), 0) / replicas)
    rec.bounds["tv_tolerance"] = tol
    rec.verdict("tv", res.tv < tol, "TV(empirical forward, exact Gibbs) < tolerance",
                f"tv={res.tv:.5f}")
    for eta, p in sorted(exact.as_dict().items(), key=lambda kv: -kv[1])[:50]:
        rec.rows.append({"configuration": " ".join(map(str, sorted(eta))) or "empty",
                         "exact": p, "empirical": hist.get(eta, 0) / replicas})
    return rec


def window_targets(volume: Volume, window: Iterable[Plaquette]) -> frozenset:
    """Admissible contours of the volume that contain a window plaquette."""
    win = frozenset(Plaquette(*p) for p in window)
    return frozenset(g for g in volume.admissible if not win.isdisjoint(volume.catalog.plaquettes(g)))


def consistency_experiment(catalog: ContourCatalog, volume: Volume, window: Sequence[Plaquette],
                           beta: float, replicas: int, seed: int, tol: float = 0.02,
                           workers: int = 1) -> ExperimentRecord:
    """Infinite-volume perfect samples against finite-volume forward samples,
    both read on the contours of the volume that meet the window."""
    targets = window_targets(volume, window)
    cap = volume.max_length
    report = bound_report(beta, catalog)
    bounds = Bounds(report, catalog)
    supp = sorted({v for g in targets for v in catalog.vertices(g)})
    dists = [distance_to_complement(volume, v) for v in supp]
    space = bounds.space_conv(dists) if report.M2 is not None else math.inf

    def one(i):
        f1 = _field(catalog, beta, seed, 2 * i, max_class_length=cap)
        f2 = _field(catalog, beta, seed, 2 * i + 1, max_class_length=cap)
        fwd = stationary_forward_sample(volume, f1) & targets
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            per = occupation(targets, f2)
        return fwd, per

    out = map_replicas(one, replicas, workers)
    h_fwd = Counter(a for a, _ in out)
    h_per = Counter(b for _, b in out)
    res = tv_between(h_per, h_fwd)
    rec = ExperimentRecord("consistency", {"beta": beta, "max_length": cap, "replicas": replicas,
                                           "seed": seed, "window": [list(p) for p in window],
                                           "targets": len(targets)})
    rec.statistics.update(tv=res.tv, tv_halfwidth=res.halfwidth)
    rec.bounds.update(space_convergence=space, tolerance=tol,
                      min_distance=min(dists) if dists else math.inf)
    rec.verdict("tv", res.tv < tol + space, "TV < tolerance + space-convergence bound",
                f"tv={res.tv:.5f} bound={tol + space:.5g}")
    return rec


def density_check(catalog: ContourCatalog, betas: Sequence[float], replicas: int, seed: int,
                  max_class_length: int = 8, workers: int = 1) -> ExperimentRecord:
    """Occupation probability of each short class against exp(-beta |g|)."""
    p0 = Plaquette(0, 0, X)
    classes = [c for c in catalog.classes if c.length <= max_class_length]
    through = [g for g in catalog.through_plaquette(p0) if catalog.length(g) <= max_class_length]
    targets = frozenset(through)
    rec = ExperimentRecord("density", {"betas": list(betas), "replicas": replicas, "seed": seed,
                                       "max_class_length": max_class_length,
                                       "max_length": catalog.max_length})
    for bi, beta in enumerate(betas):
        master = rng.hash_key(seed, rng.AUX, bi)

        def one(i):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", TruncationWarning)
                return occupation(targets, _field(catalog, beta, master, i))

        samples = map_replicas(one, replicas, workers)
        counts = np.zeros((replicas, len(catalog.classes)))
        for r, eta in enumerate(samples):
            for g in eta:
                counts[r, g[0]] += 1
        for c in classes:
            mean, se = _mean_se(counts[:, c.id])
            p_hat, p_se = mean / c.multiplicity, se / c.multiplicity
            bound = math.exp(-beta * c.length)
            ok = p_hat <= bound + Z3 * p_se
            rec.rows.append({"beta": beta, "class": c.id, "length": c.length, "p_hat": p_hat,
                             "se": p_se, "bound": bound, "ratio": p_hat / bound, "pass": ok})
            rec.verdict(f"beta={beta}/class={c.id}", ok, "P(g occupied) <= exp(-beta|g|)",
                        f"p={p_hat:.3g}+-{p_se:.2g} bound={bound:.3g}")
        rec.metadata[f"truncation@{beta}"] = _truncation_note(catalog, beta)
    return rec


def clan_tail_experiment(catalog: ContourCatalog, betas: Sequence[float], replicas: int, seed: int,
                         times: Sequence[float] = (1.0, 2.0, 4.0), mode: str = "plaquettes",
                         workers: int = 1) -> ExperimentRecord:
    """Space-width mean and time-length tail of the clan of one plaquette."""
    window = [Plaquette(0, 0, X)]
    rec = ExperimentRecord("clan_tails", {"betas": list(betas), "replicas": replicas, "seed": seed,
                                          "times": list(times), "sw_mode": mode,
                                          "max_length": catalog.max_length})
    for bi, beta in enumerate(betas):
        report = bound_report(beta, catalog)
        bounds = Bounds(report, catalog)
        master = rng.hash_key(seed, rng.AUX, 100 + bi)

        def one(i):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", TruncationWarning)
                clan = explore_clan(window, _field(catalog, beta, master, i))
            s = clan_statistics(clan, catalog, mode)
            return s.TL, s.SW, s.size

        stats = np.array(map_replicas(one, replicas, workers), dtype=float)
        sw, se = _mean_se(stats[:, 1])
        rec.rows.append({"beta": beta, "quantity": "mean_SW", "estimate": sw, "se": se,
                         "bound": bounds.sw_mean})
        rec.verdict(f"beta={beta}/SW", sw <= bounds.sw_mean + Z3 * se,
                    "E SW <= alpha0 / (1 - alpha)", f"{sw:.4g}+-{se:.2g} vs {bounds.sw_mean:.4g}")
        for t in times:
            p, pse = _mean_se(stats[:, 0] > t)
            b = bounds.tl_tail(t)
            rec.rows.append({"beta": beta, "quantity": f"P(TL>{t})", "estimate": p, "se": pse,
                             "bound": b})
            rec.verdict(f"beta={beta}/TL>{t}", p <= b + Z3 * pse,
                        "P(TL > t) <= alpha0 exp(-(1 - alpha) t)", f"{p:.4g}+-{pse:.2g} vs {b:.4g}")
        rec.statistics[f"mean_size@{beta}"] = float(stats[:, 2].mean())
        rec.metadata[f"truncation@{beta}"] = _truncation_note(catalog, beta)
    return rec


def domination_experiment(catalog: ContourCatalog, betas: Sequence[float], clans: int,
                          branching_runs: int, seed: int, max_gen: int = 3,
                          workers: int = 1) -> ExperimentRecord:
    """Coupled containment of clans in branching processes, and generation
    masses of the branching process against |g| alpha^n."""
    window = [Plaquette(0, 0, X)]
    root = catalog.instance(unit_square())
    rec = ExperimentRecord("domination", {"betas": list(betas), "clans": clans,
                                          "branching_runs": branching_runs, "seed": seed,
                                          "max_gen": max_gen, "max_length": catalog.max_length})
    for bi, beta in enumerate(betas):
        report = bound_report(beta, catalog)
        master = rng.hash_key(seed, rng.AUX, 200 + bi)

        def one(i):
            f = _field(catalog, beta, master, i)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", TruncationWarning)
                clan = explore_clan(window, f)
            r = coupled_domination_check(clan, f, rng.hash_key(master, rng.BRANCH, i))
            return r.contained, r.clan_total, r.branching_total

        res = map_replicas(one, clans, workers)
        failures = sum(1 for ok, _, _ in res if not ok)
        rec.rows.append({"beta": beta, "quantity": "containment_failures", "estimate": failures,
                         "se": 0.0, "bound": 0})
        rec.statistics[f"mean_clan_size@{beta}"] = float(np.mean([a for _, a, _ in res]))
        rec.statistics[f"mean_branching_size@{beta}"] = float(np.mean([b for _, _, b in res]))
        rec.verdict(f"beta={beta}/containment", failures == 0, "clan generations inside branching generations",
                    f"{failures} failures in {clans}")

        bmaster = rng.hash_key(seed, rng.AUX, 300 + bi)
        runs = [simulate_branching(root, max_gen, beta, catalog, rng.replica_seed(bmaster, i))
                for i in range(branching_runs)]
        masses = np.array([r.masses for r in runs], dtype=float)
        L = catalog.length(root)
        for n in range(1, max_gen + 1):
            m, se = _mean_se(masses[:, n])
            b = L * report.alpha_upper ** n
            rec.rows.append({"beta": beta, "quantity": f"mass_gen{n}", "estimate": m, "se": se,
                             "bound": b})
            rec.verdict(f"beta={beta}/mass{n}", m <= b + Z3 * se,
                        "E sum |h| b_n(h) <= |g| alpha^n", f"{m:.4g}+-{se:.2g} vs {b:.4g}")
    return rec


def _fit_loglinear_binomial(d: np.ndarray, k: np.ndarray, n: np.ndarray,
                            iters: int = 100) -> tuple[float, float, float]:
    """Maximum-likelihood fit of p(d) = exp(a - lam d) to binomial counts.

    Returns (lam, se(lam), a).  Zero counts are used, not dropped.
    """
    p0 = max(k.sum() / n.sum(), 1e-12)
    theta = np.array([math.log(p0), 0.0])
    X = np.stack([np.ones_like(d), -d], axis=1)
    for _ in range(iters):
        eta = X @ theta
        p = np.clip(np.exp(eta), 1e-300, 1 - 1e-12)
        # score and Fisher information for the log link
        w = n * p / (1 - p)
        score = X.T @ ((k - n * p) / (1 - p))
        info = (X * w[:, None]).T @ X
        step = np.linalg.solve(info, score)
        theta = theta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    eta = X @ theta
    p = np.clip(np.exp(eta), 1e-300, 1 - 1e-12)
    info = (X * (n * p / (1 - p))[:, None]).T @ X
    cov = np.linalg.inv(info)
    return float(theta[1]), float(math.sqrt(cov[1, 1])), float(theta[0])


def _translate_clan_vertices(catalog, clan, dx: int):
    out = []
    for c in clan.members:
        out.append((frozenset((x + dx, y) for x, y in catalog.vertices(c.basis)), c.birth, c.death))
    return out


def mixing_experiment(catalog: ContourCatalog, beta: float, distances: Sequence[int],
                      replicas: int, seed: int, workers: int = 1) -> ExperimentRecord:
    """Probability that the clans of two windows, built on independent
    realizations, meet in space-time, as a function of window separation.

    Each replica explores one clan at the origin per realization; clans of
    translated windows are translates of clans at the origin, so the
    estimator is the two-sample U-statistic over all (i, j) pairs.
    """
    window = [Plaquette(0, 0, X)]
    report = bound_report(beta, catalog)

    def one(i):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            a = explore_clan(window, _field(catalog, beta, seed, 2 * i))
            b = explore_clan(window, _field(catalog, beta, seed, 2 * i + 1))
        return ([(catalog.vertices(c.basis), c.birth, c.death) for c in a.members],
                [(catalog.vertices(c.basis), c.birth, c.death) for c in b.members])

    res = map_replicas(one, replicas, workers)
    A = [(i, m) for i, (m, _) in enumerate(res) if m]
    B = [(j, m) for j, (_, m) in enumerate(res) if m]

    def box(m):
        xs = [v[0] for s, _, _ in m for v in s]
        ys = [v[1] for s, _, _ in m for v in s]
        return min(xs), max(xs), min(ys), max(ys)

    boxA = [box(m) for _, m in A]
    boxB = [box(m) for _, m in B]

    def meets(ma, mb, dx):
        index = {}
        for s, b0, d0 in mb:
            for x, y in s:
                index.setdefault((x + dx, y), []).append((b0, d0))
        for s, b0, d0 in ma:
            for v in s:
                for b1, d1 in index.get(v, ()):
                    if b0 < d1 and b1 < d0:
                        return True
        return False

    n = replicas
    rec = ExperimentRecord("mixing", {"beta": beta, "distances": list(distances), "replicas": n,
                                      "seed": seed, "max_length": catalog.max_length})
    ks, ns = [], []
    for dist in distances:
        row = np.zeros(n)
        col = np.zeros(n)
        hits = 0
        for (i, ma), ba in zip(A, boxA):
            for (j, mb), bb in zip(B, boxB):
                if ba[1] < bb[0] + dist or bb[1] + dist < ba[0] or ba[3] < bb[2] or bb[3] < ba[2]:
                    continue
                if meets(ma, mb, dist):
                    hits += 1
                    row[i] += 1
                    col[j] += 1
        p = hits / (n * n)
        # two-sample U-statistic variance from row and column means
        var = (np.var(row / n, ddof=1) + np.var(col / n, ddof=1)) / n
        se = math.sqrt(var)
        ks.append(hits)
        ns.append(n * n)
        rec.rows.append({"distance": dist, "probe_mean": p, "se": se, "pairs": n * n, "hits": hits})
    d = np.array(distances, dtype=float)
    k = np.array(ks, dtype=float)
    if (k > 0).sum() >= 2:
        # the U-statistic pairs are dependent; inflate the fit's standard error
        # by the ratio of the U-statistic se to the binomial se where available
        lam, lam_se, a = _fit_loglinear_binomial(d, k, np.array(ns, dtype=float))
        infl = []
        for r in rec.rows:
            if r["hits"] > 0:
                binom = math.sqrt(r["probe_mean"] * (1 - r["probe_mean"]) / r["pairs"])
                infl.append(r["se"] / binom)
        lam_se *= max(1.0, max(infl))
    else:
        lam, lam_se, a = float("nan"), float("nan"), float("nan")
    M3 = report.M3
    rec.statistics.update(decay_rate=lam, decay_rate_se=lam_se, intercept=a)
    rec.bounds.update(M3=M3, beta_tilde=report.beta_tilde, M2=report.M2)
    ok = lam > 0 and M3 is not None and lam >= M3 - Z3 * lam_se
    rec.verdict("decay", bool(ok), "fitted decay rate >= M3 - CI (negative log-linear slope)",
                f"rate={lam:.4g}+-{lam_se:.2g} M3={M3}")
    return rec


def time_convergence_experiment(catalog: ContourCatalog, volume: Volume, beta: float,
                                replicas: int, seed: int, n_times: int = 41,
                                workers: int = 1, cap: int = 1 << 20) -> ExperimentRecord:
    """Relaxation of P(g0 occupied) from the greedy packing and from empty.

    ``g0`` is the first contour of the packing; the reference is the exact
    finite-volume marginal.  The decay exponent is fitted on times where the
    discrepancy exceeds three standard errors.
    """
    exact = exact_gibbs(volume, beta, cap)
    report = bound_report(beta, catalog)
    bounds = Bounds(report, catalog)
    rho = report.rho
    packed = greedy_packing(volume)
    g0 = min(packed)
    mu = exact.marginal(g0)
    T = 10.0 / rho
    ts = np.linspace(0.0, T, n_times)
    cap = volume.max_length
    supp = len(catalog.vertices(g0))

    def one(i):
        out = []
        for s, start in enumerate((packed, frozenset())):
            f = _field(catalog, beta, seed, 2 * i + s, max_class_length=cap)
            traj = run_forward(volume, start, T, f, log=False)
            cyl = [c for c in traj.kept if c.basis == g0]
            out.append([any(c.birth <= t < c.death for c in cyl) for t in ts])
        return out

    res = np.array(map_replicas(one, replicas, workers), dtype=float)   # (n, 2, times)
    means = res.mean(axis=0)
    ses = res.std(axis=0, ddof=1) / math.sqrt(replicas)
    disc = np.abs(means - mu)
    which = disc.argmax(axis=0)
    D = disc[which, np.arange(len(ts))]
    S = ses[which, np.arange(len(ts))]
    rec = ExperimentRecord("time_convergence", {"beta": beta, "replicas": replicas, "seed": seed,
                                                "contour": list(g0), "horizon": T,
                                                "max_length": cap})
    for t, d, s, dp, de in zip(ts, D, S, disc[0], disc[1]):
        rec.rows.append({"t": float(t), "discrepancy": float(d), "se": float(s),
                         "from_packed": float(dp), "from_empty": float(de),
                         "bound": bounds.time_conv(float(t), supp)})
    # weighted least squares of log D on t, points clearly above noise
    mask = (D > Z3 * np.maximum(S, 1e-300)) & (S > 0)
    if mask.sum() >= 3:
        y = np.log(D[mask])
        w = (D[mask] / S[mask]) ** 2          # 1 / var(log D)
        Xm = np.stack([np.ones(mask.sum()), ts[mask]], axis=1)
        cov = np.linalg.inv((Xm * w[:, None]).T @ Xm)
        beta_hat = cov @ (Xm * w[:, None]).T @ y
        slope, slope_se = float(beta_hat[1]), float(math.sqrt(cov[1, 1]))
        resid = y - Xm @ beta_hat
        dof = max(mask.sum() - 2, 1)
        chi2 = float((w * resid ** 2).sum() / dof)
        slope_se *= math.sqrt(max(chi2, 1.0))
    else:
        slope, slope_se = float("nan"), float("nan")
    rec.statistics.update(slope=slope, slope_se=slope_se, fitted_points=int(mask.sum()),
                          reference=mu)
    rec.bounds.update(rho=rho, alpha_upper=report.alpha_upper)
    rec.verdict("slope", bool(slope <= -rho + Z3 * slope_se), "log-discrepancy slope <= -rho + CI",
                f"slope={slope:.4g}+-{slope_se:.2g} rho={rho:.4g}")
    viol = [r["t"] for r in rec.rows if r["discrepancy"] > r["bound"] + Z3 * r["se"]]
    rec.verdict("bound", not viol, "discrepancy <= 2|Supp|(alpha0/rho) exp(-rho t)",
                f"violations at t={viol}")
    return rec


def scaled_sites(V: tuple[float, float], a: float) -> tuple[range, range]:
    """Integer points x with the cube [(x - 1/2)/a, (x + 1/2)/a]^2 inside V = [0, v1] x [0, v2]."""
    out = []
    for v in V:
        hi = math.floor(v * a - 0.5)
        out.append(range(1, hi + 1))
    return out[0], out[1]


def _poisson_pmf(mean: float, kmax: int) -> np.ndarray:
    k = np.arange(kmax + 1)
    from scipy.stats import poisson
    return poisson.pmf(k, mean)


def poisson_experiment(catalog: ContourCatalog, j: int, betas: Sequence[float], V: tuple[float, float],
                       replicas: int, seed: int, max_sites: int = 2_000_000,
                       workers: int = 1) -> ExperimentRecord:
    """Counts of length-j contours on the rescaled window V e^{beta j / 2}.

    The free network on the same realization gives counts M0 with exactly the
    reference Poisson law, and M <= M0.  The distance to the Poisson law is
    estimated through the coupled difference of indicators, which has far
    smaller variance than comparing M's histogram with the pmf directly.
    """
    classes = [c for c in catalog.classes if c.length == j]
    if not classes:
        raise ValueError(f"no contours of length {j} in the catalog")
    rec = ExperimentRecord("poisson", {"j": j, "betas": list(betas), "V": list(V),
                                       "replicas": replicas, "seed": seed,
                                       "max_length": catalog.max_length})
    tvs = []
    for bi, beta in enumerate(betas):
        a = math.exp(beta * j / 2)
        xr, yr = scaled_sites(V, a)
        nsites = len(xr) * len(yr)
        if nsites * len(classes) > max_sites:
            raise ScaleTooLarge(f"{nsites} sites per class at beta={beta}")
        instances = frozenset((c.id, x, y) for c in classes for x in xr for y in yr)
        expected = nsites * math.exp(-beta * j)
        xmid = xr[0] + len(xr) // 2
        master = rng.hash_key(seed, rng.AUX, 400 + bi)

        def one(i):
            f = _field(catalog, beta, master, i)
            ex = ClanExplorer(f, warn=False)
            roots = ex.roots_for(instances)
            clan = classify_kept(ex.explore(roots), catalog)
            kept = {c.uid for c in roots if c.uid in clan.kept}
            m0 = [0] * len(classes)
            m = [0] * len(classes)
            half0 = [0, 0]
            half = [0, 0]
            pos = {c.id: k for k, c in enumerate(classes)}
            for c in roots:
                k = pos[c.basis[0]]
                side = 0 if c.basis[1] < xmid else 1
                m0[k] += 1
                half0[side] += k == 0
                if c.uid in kept:
                    m[k] += 1
                    half[side] += k == 0
            return m0, m, half

        res = map_replicas(one, replicas, workers)
        M0 = np.array([r[0] for r in res])
        M = np.array([r[1] for r in res])
        H = np.array([r[2] for r in res], dtype=float)
        kmax = int(max(M0.max(), expected + 10 * math.sqrt(expected) + 1))
        pois = _poisson_pmf(expected, kmax)
        # per class: plug-in TV vs pmf, and the coupled estimator
        row = {"beta": beta, "scale": a, "sites": nsites, "expected_mean": expected}
        coupled = []
        for k, c in enumerate(classes):
            ind = (M[:, k][:, None] == np.arange(kmax + 1)).astype(float)
            ind0 = (M0[:, k][:, None] == np.arange(kmax + 1)).astype(float)
            diff = ind - ind0
            dbar = diff.mean(axis=0)
            # P(M0 = k) is known exactly, so P(M = k) ~ pmf + mean difference
            est = pois + dbar
            tv = 0.5 * (np.abs(est - pois).sum())
            sgn = np.sign(dbar)
            z = 0.5 * (diff @ sgn)
            tv_se = float(z.std(ddof=1) / math.sqrt(replicas))
            plain = 0.5 * np.abs(ind.mean(axis=0) - pois).sum() + 0.5 * max(0.0, 1 - pois.sum())
            coupled.append((tv, tv_se))
            row.update({f"mean_M[{c.id}]": float(M[:, k].mean()), f"mean_M0[{c.id}]": float(M0[:, k].mean()),
                        f"tv[{c.id}]": float(tv), f"tv_se[{c.id}]": tv_se,
                        f"tv_plain[{c.id}]": float(plain),
                        f"p_differ[{c.id}]": float((M[:, k] != M0[:, k]).mean())})
        tv0, se0 = coupled[0]
        tvs.append((beta, tv0, se0))
        # independence checks
        if len(classes) >= 2:
            x, y = M[:, 0].astype(float), M[:, 1].astype(float)
            prod = (x - x.mean()) * (y - y.mean())
            cov, cse = float(prod.mean()), float(prod.std(ddof=1) / math.sqrt(replicas))
            row.update(cross_class_cov=cov, cross_class_cov_se=cse)
            rec.verdict(f"beta={beta}/cross_class_cov", abs(cov) <= Z3 * cse,
                        "class counts independent", f"cov={cov:.3g}+-{cse:.2g}")
        prod = (H[:, 0] - H[:, 0].mean()) * (H[:, 1] - H[:, 1].mean())
        cov, cse = float(prod.mean()), float(prod.std(ddof=1) / math.sqrt(replicas))
        row.update(split_cov=cov, split_cov_se=cse)
        rec.verdict(f"beta={beta}/split_cov", abs(cov) <= Z3 * cse,
                    "counts on disjoint halves independent", f"cov={cov:.3g}+-{cse:.2g}")
        report = bound_report(beta, catalog)
        row.update(rate=report.alpha_upper + math.exp(-beta * j / 2))
        rec.rows.append(row)
    for (b1, t1, s1), (b2, t2, s2) in zip(tvs, tvs[1:]):
        rec.verdict(f"tv[{b1}]>tv[{b2}]", t1 - Z3 * s1 > t2 + Z3 * s2,
                    "distance to Poisson decreases in beta (CI-separated)",
                    f"{t1:.4g}+-{s1:.2g} vs {t2:.4g}+-{s2:.2g}")
    rec.statistics["tv_trend"] = [[b, t, s] for b, t, s in tvs]
    return rec


def clt_experiment(catalog: ContourCatalog, beta: float, sides: Sequence[int], replicas: int,
                   seed: int, contour=None, cutoff: int | None = None,
                   workers: int = 1) -> ExperimentRecord:
    """Normalized sums of centered occupations of translates of one contour
    over growing square windows of translates."""
    g0 = tuple(contour) if contour is not None else catalog.instance(unit_square())
    report = bound_report(beta, catalog)
    big = max(sides)
    if cutoff is None:
        if report.M3:
            cutoff = int(math.ceil(math.log(1e3 * (report.M2 or 1) ** 2) / report.M3))
        else:
            cutoff = 4
    cutoff = max(1, min(cutoff, big // 2))
    instances = frozenset((g0[0], g0[1] + x, g0[2] + y) for x in range(big) for y in range(big))

    def one(i):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            eta = occupation(instances, _field(catalog, beta, seed, i))
        grid = np.zeros((big, big), dtype=np.int8)
        for g in eta:
            grid[g[1] - g0[1], g[2] - g0[2]] = 1
        return grid

    grids = np.array(map_replicas(one, replicas, workers), dtype=float)
    p = float(grids.mean())
    var0 = p * (1 - p)
    if var0 <= 0:
        raise DegenerateVariance("observable is constant in every sample")
    # D = sum over offsets of covariances, estimated inside the largest window
    D = 0.0
    cen = grids - p
    for dx in range(-cutoff, cutoff + 1):
        for dy in range(-cutoff, cutoff + 1):
            a = cen[:, max(0, dx):big + min(0, dx), max(0, dy):big + min(0, dy)]
            b = cen[:, max(0, -dx):big + min(0, -dx), max(0, -dy):big + min(0, -dy)]
            D += float((a * b).mean())
    if D <= 0:
        raise DegenerateVariance(f"estimated D = {D:.3g} <= 0")
    rec = ExperimentRecord("clt", {"beta": beta, "sides": list(sides), "replicas": replicas,
                                   "seed": seed, "contour": list(g0), "cutoff": cutoff})
    n = replicas
    for side in sides:
        S = cen[:, :side, :side].sum(axis=(1, 2)) / side
        v = float(S.var(ddof=1))
        m2 = float(((S - S.mean()) ** 2).mean())
        skew = float(((S - S.mean()) ** 3).mean() / m2 ** 1.5) if m2 > 0 else float("nan")
        kurt = float(((S - S.mean()) ** 4).mean() / m2 ** 2) if m2 > 0 else float("nan")
        rec.rows.append({"side": side, "var_S": v, "var_S_se": v * math.sqrt(2 / (n - 1)), "D": D,
                         "skew": skew, "skew_se": math.sqrt(6 / n), "kurtosis": kurt,
                         "kurtosis_se": math.sqrt(24 / n)})
    rec.statistics.update(D=D, single_site_variance=var0, occupation=p)
    last = rec.rows[-1]
    rec.verdict("variance", abs(last["var_S"] - D) <= Z3 * last["var_S_se"] + 0.1 * D,
                "Var(S) close to D on the largest window")
    rec.verdict("skew", abs(last["skew"]) <= Z3 * last["skew_se"] + 1 / math.sqrt(D * big * big),
                "skewness near 0 (with finite-window allowance)")
    return rec
