"""Pipeline orchestration: ingestion, stratification, fitting, prediction.

Reads an area table CSV, splits it into poverty strata, fits the basic and
(optionally) spatial model per stratum, predicts for every area, and emits
a merged prediction CSV, a GeoJSON FeatureCollection, per-stratum fit
reports, and a run manifest.  Everything is deterministic given
(inputs, config, seed).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import bootstrap as boot_mod
from . import fh as fh_mod
from . import sfh as sfh_mod
from . import weights as w_mod
from .errors import MissingPoverty, ZeroVariance
from .fh import PredictionRow

POVERTY_CUT_LOW = 30.0
POVERTY_CUT_HIGH = 55.0


@dataclass
class AreaTable:
    """Column-oriented area table; y/var_y are nan for unsampled areas."""

    area_id: np.ndarray
    y: np.ndarray
    var_y: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    poverty_pct: np.ndarray
    sampled: np.ndarray
    covariates: dict[str, np.ndarray]

    def __post_init__(self):
        bad = self.sampled != (np.isfinite(self.y) & np.isfinite(self.var_y))
        if np.any(bad):
            raise ValueError(
                f"{bad.sum()} rows where sampled flag disagrees with y/var_y presence"
            )

    @property
    def n(self) -> int:
        return len(self.area_id)

    def design(self, names: list[str], rows: np.ndarray) -> np.ndarray:
        cols = [np.ones(int(rows.sum()))]
        for name in names:
            cols.append(self.covariates[name][rows])
        return np.column_stack(cols)


def read_area_table(path: str) -> AreaTable:
    core = {"area_id", "y", "var_y", "lat", "lon", "poverty_pct", "sampled"}
    recs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cov_names = [c for c in reader.fieldnames or [] if c not in core]
        for rec in reader:
            recs.append(rec)

    def col(name, conv=float, missing=np.nan):
        return np.array([conv(r[name]) if r.get(name, "") != "" else missing
                         for r in recs])

    return AreaTable(
        area_id=np.array([r["area_id"] for r in recs]),
        y=col("y"), var_y=col("var_y"), lat=col("lat"), lon=col("lon"),
        poverty_pct=col("poverty_pct"),
        sampled=np.array([r["sampled"] in ("1", "true", "True") for r in recs]),
        covariates={c: col(c) for c in cov_names},
    )


def stratify(table: AreaTable) -> np.ndarray:
    """Poverty strata: 1 below 30%, 2 in [30, 55), 3 at or above 55%."""
    p = table.poverty_pct
    if np.any(~np.isfinite(p)):
        raise MissingPoverty("poverty_pct missing for some areas")
    return np.where(p < POVERTY_CUT_LOW, 1, np.where(p < POVERTY_CUT_HIGH, 2, 3))


def backward_eliminate(inp: fh_mod.FhInput, names: list[str], method: str,
                       alpha: float = 0.10) -> tuple[list[str], fh_mod.FhInput]:
    """Drop the least significant covariate until all pass the Wald test.

    The intercept (column 0) is never dropped.  Returns the surviving
    covariate names and the reduced input.
    """
    cur_names = list(names)
    cur = inp
    while cur_names and cur.x.shape[1] > 1:
        fit = fh_mod.fit(cur, method)
        v = fit.sigma2_u + cur.sigma2_e
        cov = np.linalg.inv(cur.x.T @ (cur.x / v[:, None]))
        se = np.sqrt(np.diag(cov))
        z = fit.beta / se
        pvals = 2.0 * stats.norm.sf(np.abs(z))
        worst = int(np.argmax(pvals[1:])) + 1
        if pvals[worst] <= alpha:
            break
        del cur_names[worst - 1]
        keep = [0] + [i for i in range(1, cur.x.shape[1]) if i != worst]
        cur = fh_mod.FhInput(cur.y, cur.x[:, keep], cur.sigma2_e, cur.max_zero_var)
    return cur_names, cur


def _build_weights(table: AreaTable, rows: np.ndarray, spatial_cfg: dict) -> w_mod.SpatialWeights:
    idx = np.flatnonzero(rows)
    geos = [
        w_mod.AreaGeo(table.area_id[i], float(table.lat[i]), float(table.lon[i]))
        for i in idx
    ]
    rule = spatial_cfg.get("rule", "knn")
    if rule == "knn":
        return w_mod.neighbors_knn(geos, int(spatial_cfg.get("k", 5)))
    if rule == "distance":
        return w_mod.neighbors_distance(geos, float(spatial_cfg.get("L", 50.0)))
    raise ValueError(f"unknown weights rule {rule!r}")


def _clamp(rows: list[PredictionRow]) -> tuple[list[dict], int]:
    out, n_clamped = [], 0
    for r in rows:
        val = min(max(r.value, 0.0), 1.0)
        flags = list(r.flags)
        if val != r.value:
            flags.append("clamped")
            n_clamped += 1
        out.append({
            "area_id": r.area_id, "stratum": r.stratum, "estimator_kind": r.kind,
            "value": val, "raw_value": r.value, "gamma": r.gamma, "mse": r.mse,
            "mse_method": r.mse_method, "flags": ";".join(flags),
        })
    return out, n_clamped


def run_pipeline(config: dict, outdir: str) -> dict:
    """Run the full per-stratum fit/predict workflow; returns the manifest."""
    os.makedirs(outdir, exist_ok=True)
    table = read_area_table(config["area_table"])
    cov_names = list(config["covariates"])
    method = config.get("method", fh_mod.REML)
    spatial_cfg = config.get("spatial") or {}
    spatial_on = bool(spatial_cfg.get("enabled", False))
    boot_cfg = config.get("bootstrap") or {}
    seed = int(config.get("seed", 0))

    if config.get("stratify", True):
        strata = stratify(table)
    else:
        strata = np.ones(table.n, dtype=int)

    merged: list[dict] = []
    reports = {}
    n_clamped_total = 0
    islands: list[str] = []

    for s in sorted(set(strata.tolist())):
        in_stratum = strata == s
        samp = in_stratum & table.sampled
        unsamp = in_stratum & ~table.sampled
        samp_ids = table.area_id[samp].tolist()
        unsamp_ids = table.area_id[unsamp].tolist()

        x_s = table.design(cov_names, samp)
        inp = fh_mod.FhInput(table.y[samp], x_s, table.var_y[samp])
        used_names = cov_names
        if config.get("selection", {}).get("enabled", False):
            used_names, inp = backward_eliminate(
                inp, cov_names, method, config["selection"].get("alpha", 0.10))
        x_u = table.design(used_names, unsamp)

        # direct rows for sampled areas
        for i, aid in enumerate(samp_ids):
            merged.append({
                "area_id": aid, "stratum": s, "estimator_kind": "direct",
                "value": float(inp.y[i]), "raw_value": float(inp.y[i]),
                "gamma": None, "mse": float(inp.sigma2_e[i]),
                "mse_method": "design", "flags": "",
            })

        fit = fh_mod.fit(inp, method)
        report = {
            "stratum": s, "model": "fh", "method": method,
            "covariates": used_names,
            "beta": dict(zip(["intercept"] + used_names, map(float, fit.beta))),
            "sigma2_u": fit.sigma2_u, "loglik": fit.loglik,
            "converged": fit.converged, "iterations": fit.iterations,
            "n_sampled": len(samp_ids), "n_unsampled": len(unsamp_ids),
        }

        model_rows: list[PredictionRow]
        if spatial_on:
            full_w = _build_weights(table, in_stratum, spatial_cfg)
            w_samp = full_w.restrict(samp_ids)
            rho_bounds = tuple(spatial_cfg.get("rho_bounds",
                                               sfh_mod.DEFAULT_RHO_BOUNDS))
            sinp = sfh_mod.SfhInput(inp, w_samp, rho_bounds=rho_bounds,
                                    ids=tuple(samp_ids))
            sfit = sfh_mod.fit_sfh(sinp, method=spatial_cfg.get("method", method),
                                   n_starts=int(spatial_cfg.get("n_starts", 5)))
            try:
                moran = w_mod.morans_i(inp.y, w_samp)
            except ZeroVariance:
                moran = None
            report["spatial"] = {
                "rule": spatial_cfg.get("rule", "knn"),
                "sigma2_eps": sfit.sigma2_eps, "rho": sfit.rho,
                "rho_se": sfit.rho_se, "loglik": sfit.loglik,
                "converged": sfit.converged, "boundary_rho": sfit.boundary_rho,
                "moran_i_direct": moran,
            }
            model_rows = sfh_mod.seblup(sinp, sfit)
            model_rows += sfh_mod.seblup_out_of_sample(full_w, x_u, sinp, sfit)
            islands += [full_w.ids[i] for i in full_w.islands]
            boot_inp, boot_fit = sinp, sfit
        else:
            model_rows = fh_mod.eblup(inp, fit, ids=samp_ids)
            model_rows += fh_mod.synthetic_predict(x_u, fit, ids=unsamp_ids)
            boot_inp, boot_fit = inp, fit

        if boot_cfg.get("enabled", False):
            spec = boot_mod.BootstrapSpec(
                replicates=int(boot_cfg.get("replicates", boot_mod.DEFAULT_REPLICATES)),
                seed=seed + s,
                model="SFH" if spatial_on else "FH",
                refit_method=boot_cfg.get("refit_method", method),
            )
            mse_table = boot_mod.bootstrap_mse(boot_inp, boot_fit, spec)
            # bootstrap covers only the in-sample block
            for i in range(len(samp_ids)):
                r = model_rows[i]
                model_rows[i] = PredictionRow(
                    r.area_id, r.kind, r.value, r.gamma,
                    float(mse_table.mse[i]), "bootstrap", r.flags, r.stratum)
            report["bootstrap"] = {
                "replicates": spec.replicates, "b_effective": mse_table.b_effective,
                "seed": spec.seed,
            }

        model_rows = [
            PredictionRow(r.area_id, r.kind, r.value, r.gamma, r.mse,
                          r.mse_method, r.flags, s)
            for r in model_rows
        ]
        rows, n_clamped = _clamp(model_rows)
        n_clamped_total += n_clamped
        merged += rows
        reports[f"stratum_{s}"] = report

    _write_predictions_csv(os.path.join(outdir, "predictions.csv"), merged)
    _write_geojson(os.path.join(outdir, "predictions.geojson"), merged, table)
    with open(os.path.join(outdir, "fit_reports.json"), "w", encoding="utf-8") as fh:
        json.dump(reports, fh, indent=2, sort_keys=True)

    import saekit

    manifest = {
        "saekit_version": saekit.__version__,
        "numpy_version": np.__version__,
        "seed": seed,
        "config": config,
        "strata": sorted(set(int(s) for s in strata.tolist())),
        "n_areas": int(table.n),
        "n_sampled": int(table.sampled.sum()),
        "weights_rule": spatial_cfg.get("rule") if spatial_on else None,
        "islands": sorted(islands),
        "n_clamped": n_clamped_total,
        "outputs": ["predictions.csv", "predictions.geojson", "fit_reports.json"],
    }
    with open(os.path.join(outdir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_predictions_csv(path: str, rows: list[dict]) -> None:
    cols = ["area_id", "stratum", "estimator_kind", "value", "raw_value",
            "gamma", "mse", "mse_method", "flags"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_fmt(r.get(c)) for c in cols])


def _write_geojson(path: str, rows: list[dict], table: AreaTable) -> None:
    """One Point feature per area carrying its model-based prediction."""
    pos = {a: i for i, a in enumerate(table.area_id.tolist())}
    features = []
    for r in rows:
        if r["estimator_kind"] == "direct":
            continue
        i = pos[r["area_id"]]
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point",
                         "coordinates": [float(table.lon[i]), float(table.lat[i])]},
            "properties": {
                "area_id": r["area_id"], "value": r["value"], "mse": r["mse"],
                "estimator_kind": r["estimator_kind"],
            },
        })
    doc = {"type": "FeatureCollection", "features": features}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
