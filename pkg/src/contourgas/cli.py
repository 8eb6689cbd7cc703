"""Command-line entry point: ``contourgas {enumerate,bounds,sample,experiment}``.

Configuration comes from an optional JSON file, overridden by flags.  Every
output directory receives ``config.json`` with the fully resolved
configuration and package version, so any run can be repeated exactly.

Exit codes: 0 success, 2 usage or input error, 3 regime guard (beta not
above the computed beta* bracket), 4 resource cap hit.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

from . import __version__, rng
from .branching import DomainError, PopulationExplosion, bound_report, beta_star
from .clans import (HorizonExploded, TruncationWarning, classify_kept, clan_statistics, explore_clan,
                    kept_section, neglected_intensity)
from .field import FieldRealization
from .forward import Volume
from .lattice import BudgetExceeded, ContourCatalog, Plaquette, TailModel, get_catalog
from . import validation as V

OUT_ENV = "CONTOURGAS_OUT"

DEFAULTS = {
    "beta": 1.5,
    "max_length": 12,
    "tail_model": "walk",
    "origin_mode": "plaquette",
    "seed": 20240601,
    "replicas": 1000,
    "workers": 1,
    "node_limit": 20_000_000,
    "window": [[0, 0, 0]],
    "volume": {"width": 4, "height": 3, "max_length": 6},
    "betas": [1.0, 1.5, 2.0],
    "j": 4,
    "V": [2.0, 2.0],
    "sides": [4, 8],
    "distances": [2, 4, 6, 8, 10, 12],
    "clans": 1000,
    "branching_runs": 10000,
    "max_gen": 3,
    "tolerance": 0.02,
    "max_configurations": 1 << 20,
    "output": None,
}

EXPERIMENTS = ("gibbs", "consistency", "density", "clan_tails", "domination", "poisson", "clt",
               "mixing", "convergence")


class UsageError(ValueError):
    pass


class RegimeError(RuntimeError):
    pass


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
    for key in ("beta", "max_length", "seed", "replicas", "workers", "tail_model"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg.update(_parse_set(getattr(args, "set", None)))
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if args.out:
        cfg["output"] = args.out
    return cfg


def output_dir(cfg: dict, command: str) -> Path:
    root = cfg.get("output") or os.environ.get(OUT_ENV) or "contourgas-out"
    return Path(root) / command


def _catalog(cfg: dict) -> ContourCatalog:
    L = int(cfg["max_length"])
    if L < 4 or L % 2:
        raise UsageError(f"max_length must be an even integer >= 4, got {L}")
    return get_catalog(L, cfg["tail_model"], cfg["origin_mode"])


def _write_config(d: Path, cfg: dict, command: str) -> None:
    d.mkdir(parents=True, exist_ok=True)
    # the output location is not part of the computation; leaving it out keeps
    # reruns into different directories byte-identical
    echo = {"command": command, "version": __version__,
            "config": {k: v for k, v in cfg.items() if k != "output"}}
    (d / "config.json").write_text(json.dumps(V._jsonable(echo), indent=2, sort_keys=True) + "\n")


def _guard(catalog: ContourCatalog, betas) -> None:
    lo, hi = beta_star(catalog, 1e-9)
    for b in betas:
        if not b > hi:
            raise RegimeError(f"beta={b} is not above the beta* bracket [{lo:.6f}, {hi:.6f}]")


def _volume(catalog: ContourCatalog, cfg: dict) -> Volume:
    v = cfg["volume"]
    return Volume.box(catalog, int(v["width"]), int(v["height"]), int(v.get("x0", 0)),
                      int(v.get("y0", 0)), max_length=v.get("max_length"))


def _window(cfg: dict) -> list[Plaquette]:
    try:
        return [Plaquette(int(x), int(y), int(a)) for x, y, a in cfg["window"]]
    except (TypeError, ValueError):
        raise UsageError("window must be a list of [x, y, axis] triples") from None


# ---------------------------------------------------------------------------

def cmd_enumerate(cfg: dict) -> Path:
    L = int(cfg["max_length"])
    if L < 4 or L % 2:
        raise UsageError(f"max_length must be an even integer >= 4, got {L}")
    catalog = ContourCatalog.build(L, TailModel(cfg["tail_model"]), cfg["origin_mode"],
                                   node_limit=int(cfg["node_limit"]))
    d = output_dir(cfg, "enumerate")
    _write_config(d, cfg, "enumerate")
    catalog.save(d / "catalog.txt")
    classes = catalog.counts_by_length()
    kappa = catalog.through_plaquette_counts()
    lines = ["length,classes,through_plaquette,tail_bound"]
    for n in sorted(classes):
        lines.append(f"{n},{classes[n]},{kappa[n]},{catalog.tail_model.bound(n)!r}")
    (d / "counts.csv").write_text("\n".join(lines) + "\n")
    return d


def cmd_bounds(cfg: dict) -> Path:
    catalog = _catalog(cfg)
    betas = sorted({float(b) for b in cfg["betas"]} | {float(cfg["beta"])})
    d = output_dir(cfg, "bounds")
    _write_config(d, cfg, "bounds")
    reports = [bound_report(float(b), catalog) for b in betas]
    text = "".join(f"[beta={r.beta}]\n{r.as_text()}\n" for r in reports)
    (d / "bounds.txt").write_text(text)
    (d / "bounds.json").write_text(
        json.dumps(V._jsonable([r.as_dict() for r in reports]), indent=2, sort_keys=True) + "\n")
    return d


def cmd_sample(cfg: dict) -> Path:
    catalog = _catalog(cfg)
    beta = float(cfg["beta"])
    _guard(catalog, [beta])
    window = _window(cfg)
    d = output_dir(cfg, "sample")
    _write_config(d, cfg, "sample")
    rows = ["replica,seed,TL,SW,SW_sites,size,depth,configuration"]
    warned = []
    for i in range(int(cfg["replicas"])):
        seed = rng.replica_seed(int(cfg["seed"]), i)
        field = FieldRealization(catalog, beta, seed)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", TruncationWarning)
            clan = classify_kept(explore_clan(window, field), catalog)
        warned.extend(w for w in caught if issubclass(w.category, TruncationWarning))
        s = clan_statistics(clan, catalog)
        s2 = clan_statistics(clan, catalog, "sites")
        conf = " ".join(f"{c}:{x}:{y}" for c, x, y in sorted(kept_section(clan)))
        rows.append(f"{i},{seed},{s.TL!r},{s.SW},{s2.SW},{s.size},{s.depth},{conf}")
    (d / "samples.csv").write_text("\n".join(rows) + "\n")
    meta = {"truncation_warning": bool(warned),
            "neglected_intensity_per_vertex": neglected_intensity(catalog, beta),
            "max_length": catalog.max_length, "tail_model": catalog.tail_model.kind}
    (d / "metadata.json").write_text(json.dumps(V._jsonable(meta), indent=2, sort_keys=True) + "\n")
    return d


def cmd_experiment(cfg: dict, which: str) -> Path:
    if which not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {which!r}; choose from {', '.join(EXPERIMENTS)}")
    seed, n, w = int(cfg["seed"]), int(cfg["replicas"]), int(cfg["workers"])
    beta = float(cfg["beta"])
    betas = [float(b) for b in cfg["betas"]]
    if which in ("gibbs", "consistency", "convergence"):
        vol_cap = cfg["volume"].get("max_length") or cfg["max_length"]
        catalog = get_catalog(int(vol_cap), cfg["tail_model"], cfg["origin_mode"])
    else:
        catalog = _catalog(cfg)
    if which in ("consistency", "convergence", "mixing", "clt"):
        _guard(catalog, [beta])
    if which in ("density", "clan_tails", "domination", "poisson"):
        _guard(catalog, betas)
    if which == "gibbs":
        rec = V.gibbs_experiment(catalog, _volume(catalog, cfg), beta, n, seed, cfg["tolerance"], w,
                                 cap=int(cfg["max_configurations"]))
    elif which == "consistency":
        rec = V.consistency_experiment(catalog, _volume(catalog, cfg), _window(cfg), beta, n, seed,
                                       cfg["tolerance"], w)
    elif which == "density":
        rec = V.density_check(catalog, betas, n, seed, workers=w)
    elif which == "clan_tails":
        rec = V.clan_tail_experiment(catalog, betas, n, seed, workers=w)
    elif which == "domination":
        rec = V.domination_experiment(catalog, betas, int(cfg["clans"]), int(cfg["branching_runs"]),
                                      seed, int(cfg["max_gen"]), w)
    elif which == "poisson":
        rec = V.poisson_experiment(catalog, int(cfg["j"]), betas, tuple(cfg["V"]), n, seed, workers=w)
    elif which == "clt":
        rec = V.clt_experiment(catalog, beta, [int(s) for s in cfg["sides"]], n, seed, workers=w)
    elif which == "mixing":
        rec = V.mixing_experiment(catalog, beta, [int(x) for x in cfg["distances"]], n, seed, w)
    else:
        rec = V.time_convergence_experiment(catalog, _volume(catalog, cfg), beta, n, seed, workers=w,
                                            cap=int(cfg["max_configurations"]))
    d = output_dir(cfg, f"experiment-{which}")
    _write_config(d, cfg, f"experiment {which}")
    rec.write(d)
    return d


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./contourgas-out)")
    common.add_argument("--beta", type=float)
    common.add_argument("--max-length", dest="max_length", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--replicas", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--tail-model", dest="tail_model", choices=["walk", "trail", "geometric"])
    common.add_argument("--set", action="append", metavar="KEY=JSON",
                        help="override any config key (repeatable)")
    p = argparse.ArgumentParser(prog="contourgas", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("enumerate", parents=[common], help="build the contour catalog")
    sub.add_parser("bounds", parents=[common], help="subcriticality constants and bounds")
    sub.add_parser("sample", parents=[common], help="perfect samples and clan statistics")
    e = sub.add_parser("experiment", parents=[common], help="validation experiments")
    e.add_argument("which", help=" | ".join(EXPERIMENTS))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        if args.command == "enumerate":
            d = cmd_enumerate(cfg)
        elif args.command == "bounds":
            d = cmd_bounds(cfg)
        elif args.command == "sample":
            d = cmd_sample(cfg)
        else:
            d = cmd_experiment(cfg, args.which)
    except (RegimeError, DomainError) as e:
        print(f"regime guard: {e}", file=sys.stderr)
        return 3
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BudgetExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if args.command == "enumerate" else 4
    except (HorizonExploded, PopulationExplosion, V.SupportTooLarge, V.ScaleTooLarge) as e:
        print(f"resource cap: {e}", file=sys.stderr)
        return 4
    print(d)
    return 0


if __name__ == "__main__":
    sys.exit(main())
