"""Command line entry points.

Subcommands: simulate, direct, weights, moran, fit, predict, bootstrap,
pipeline.  All randomness sits behind a single --seed / config seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import bootstrap as boot_mod
from . import direct as direct_mod
from . import fh as fh_mod
from . import pipeline as pipe_mod
from . import sfh as sfh_mod
from . import simulate as sim_mod
from . import weights as w_mod
from .errors import SaekitError


def _load_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_simulate(args) -> int:
    table = sim_mod.simulate_area_table(args.areas, args.seed)
    sim_mod.write_area_table_csv(args.out, table)
    print(f"wrote {args.areas} areas to {args.out}")
    return 0


def cmd_direct(args) -> int:
    rows = direct_mod.read_survey_csv(args.survey)
    if args.indicator == "anemia":
        ind = lambda r: direct_mod.anemia_indicator(r, args.hemoglobin_threshold)
    else:
        ind = direct_mod.stunting_indicator
    ests = direct_mod.estimate_by_area(rows, ind)
    direct_mod.write_estimates_csv(args.out, ests)
    print(f"wrote {len(ests)} area estimates to {args.out}")
    return 0


def _build_weights_cli(args) -> w_mod.SpatialWeights:
    if args.geojson:
        geos = w_mod.read_geojson(args.geojson)
    else:
        geos = w_mod.read_centroids_csv(args.centroids)
    if args.rule == "knn":
        return w_mod.neighbors_knn(geos, args.k)
    if args.rule == "distance":
        return w_mod.neighbors_distance(geos, args.L)
    return w_mod.neighbors_contiguity(geos)


def cmd_weights(args) -> int:
    w = _build_weights_cli(args)
    w_mod.write_weights_csv(args.out, w)
    n_isl = len(w.islands)
    print(f"wrote {w.n}-area weights ({args.rule}) to {args.out}; {n_isl} islands")
    return 0


def cmd_moran(args) -> int:
    w = w_mod.read_weights_csv(args.weights)
    vals = {}
    with open(args.values, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            vals[rec["area_id"]] = float(rec["value"])
    x = [vals[a] for a in w.ids]
    print(f"{w_mod.morans_i(x, w):.6f}")
    return 0


def _fh_input_from_config(cfg: dict):
    table = pipe_mod.read_area_table(cfg["area_table"])
    samp = table.sampled
    x = table.design(list(cfg["covariates"]), samp)
    inp = fh_mod.FhInput(table.y[samp], x, table.var_y[samp])
    return table, inp, table.area_id[samp].tolist()


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    table, inp, ids = _fh_input_from_config(cfg)
    method = cfg.get("method", fh_mod.REML)
    spatial = (cfg.get("spatial") or {}).get("enabled", False)
    if spatial:
        full_w = pipe_mod._build_weights(table, np.ones(table.n, bool), cfg["spatial"])
        sinp = sfh_mod.SfhInput(inp, full_w.restrict(ids), ids=tuple(ids))
        fit = sfh_mod.fit_sfh(sinp, method=cfg["spatial"].get("method", method))
        report = {
            "model": "sfh", "method": fit.method,
            "beta": list(map(float, fit.beta)), "sigma2_eps": fit.sigma2_eps,
            "rho": fit.rho, "rho_se": fit.rho_se, "loglik": fit.loglik,
            "converged": fit.converged, "boundary_rho": fit.boundary_rho,
            "trace": [list(t) for t in fit.trace],
        }
    else:
        fit = fh_mod.fit(inp, method)
        report = {
            "model": "fh", "method": fit.method,
            "beta": list(map(float, fit.beta)), "sigma2_u": fit.sigma2_u,
            "loglik": fit.loglik, "converged": fit.converged,
            "iterations": fit.iterations, "trace": [list(t) for t in fit.trace],
        }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    print(f"wrote fit report to {args.out}")
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args.config)
    outdir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(outdir, exist_ok=True)
    cfg = dict(cfg)
    cfg.setdefault("stratify", False)
    pipe_mod.run_pipeline(cfg, outdir)
    src = os.path.join(outdir, "predictions.csv")
    if os.path.abspath(src) != os.path.abspath(args.out):
        os.replace(src, args.out)
    print(f"wrote predictions to {args.out}")
    return 0


def cmd_bootstrap(args) -> int:
    cfg = _load_config(args.config)
    table, inp, ids = _fh_input_from_config(cfg)
    method = cfg.get("method", fh_mod.REML)
    spatial = (cfg.get("spatial") or {}).get("enabled", False)
    if spatial:
        full_w = pipe_mod._build_weights(table, np.ones(table.n, bool), cfg["spatial"])
        binp = sfh_mod.SfhInput(inp, full_w.restrict(ids), ids=tuple(ids))
        bfit = sfh_mod.fit_sfh(binp, method=cfg["spatial"].get("method", method))
    else:
        binp, bfit = inp, fh_mod.fit(inp, method)
    spec = boot_mod.BootstrapSpec(
        replicates=args.replicates, seed=args.seed,
        model="SFH" if spatial else "FH", refit_method=method,
    )
    mt = boot_mod.bootstrap_mse(binp, bfit, spec)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["area_id", "prediction", "mse", "rrmse", "b_effective"])
        for i, aid in enumerate(ids):
            wr.writerow([aid, repr(float(mt.predictions[i])), repr(float(mt.mse[i])),
                         repr(float(mt.rrmse[i])), mt.b_effective])
    print(f"wrote bootstrap MSEs to {args.out} ({mt.b_effective}/{spec.replicates} ok)")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args.config)
    manifest = pipe_mod.run_pipeline(cfg, args.out)
    print(f"pipeline done: {manifest['n_areas']} areas, "
          f"strata {manifest['strata']}, outputs in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saekit",
                                description="Small-area estimation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic national area table")
    s.add_argument("--out", required=True)
    s.add_argument("--areas", type=int, default=1900)
    s.add_argument("--seed", type=int, default=12345)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("direct", help="direct estimates from unit-level survey CSV")
    s.add_argument("--survey", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--indicator", choices=["anemia", "stunted"], default="anemia")
    s.add_argument("--hemoglobin-threshold", type=float,
                   default=direct_mod.ANEMIA_HEMOGLOBIN_G_DL)
    s.set_defaults(func=cmd_direct)

    s = sub.add_parser("weights", help="build a spatial weights matrix")
    s.add_argument("--centroids", help="area_id,lat,lon,altitude_km CSV")
    s.add_argument("--geojson", help="GeoJSON FeatureCollection")
    s.add_argument("--rule", choices=["knn", "distance", "contiguity"], default="knn")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--L", type=float, default=50.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("moran", help="Moran autocorrelation of area values")
    s.add_argument("--values", required=True, help="area_id,value CSV")
    s.add_argument("--weights", required=True, help="i_id,j_id,w CSV")
    s.set_defaults(func=cmd_moran)

    s = sub.add_parser("fit", help="fit one model on the sampled areas")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="predictions for all areas (no strata)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("bootstrap", help="parametric bootstrap MSEs")
    s.add_argument("--config", required=True)
    s.add_argument("--replicates", type=int, default=boot_mod.DEFAULT_REPLICATES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("pipeline", help="full per-stratum workflow")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_pipeline)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SaekitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
