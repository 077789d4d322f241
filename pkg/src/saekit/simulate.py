"""Synthetic national fixture generator.

Produces an area table in the pipeline's CSV schema: a jittered lattice of
districts with census-style covariate shares, a poverty share that splits
the domain into three nonempty strata, spatially autocorrelated true
prevalences, and direct estimates with known sampling variances for the
sampled subset.  No real microdata is involved.
"""

from __future__ import annotations

import numpy as np

from . import weights as w_mod

# operating points in the realistic magnitude range for prevalence data
STRATUM_SAR = {1: (0.00524, 0.570), 2: (0.00451, 0.694), 3: (0.00401, 0.742)}


def lattice_geos(n: int, seed: int = 0, jitter_km: float = 3.0) -> list[w_mod.AreaGeo]:
    """Roughly square jittered lattice with ~10 km spacing."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
    side = int(np.ceil(np.sqrt(n)))
    geos = []
    deg_per_km = 1.0 / 111.0
    for i in range(n):
        r, c = divmod(i, side)
        lat = -16.0 + (r * 10.0 + rng.uniform(-jitter_km, jitter_km)) * deg_per_km
        lon = -75.0 + (c * 10.0 + rng.uniform(-jitter_km, jitter_km)) * deg_per_km
        alt = max(0.0, rng.normal(2.0, 1.2))
        geos.append(w_mod.AreaGeo(f"{i + 100000:06d}", lat, lon, alt))
    return geos


def simulate_area_table(n_areas: int = 1900, seed: int = 12345,
                        sampled_fraction: float = 0.42) -> dict:
    """Generate the synthetic national area table.

    Returns a dict of parallel arrays matching the pipeline CSV schema,
    with covariate columns ``altitude_km``, ``internet``, ``castellano``,
    ``agua``, ``analfabet``.
    """
    rng = np.random.default_rng(seed)
    geos = lattice_geos(n_areas, seed)
    ids = np.array([g.area_id for g in geos])
    lat = np.array([g.latitude for g in geos])
    lon = np.array([g.longitude for g in geos])
    alt = np.array([g.altitude_km for g in geos])

    # poverty is spatially smooth so strata come out geographically clustered
    smooth = (lat - lat.min()) / (np.ptp(lat) + 1e-12)
    poverty = np.clip(
        15.0 + 60.0 * smooth + rng.normal(0.0, 12.0, n_areas), 0.0, 100.0
    )

    internet = np.clip(0.65 - 0.005 * poverty + rng.normal(0, 0.08, n_areas), 0, 1)
    castellano = np.clip(0.9 - 0.004 * poverty + rng.normal(0, 0.1, n_areas), 0, 1)
    agua = np.clip(0.8 - 0.003 * poverty + rng.normal(0, 0.1, n_areas), 0, 1)
    analfabet = np.clip(0.02 + 0.002 * poverty + rng.normal(0, 0.02, n_areas), 0, 1)

    stratum = np.where(poverty < 30.0, 1, np.where(poverty < 55.0, 2, 3))

    # coefficient magnitudes in the plausible range for prevalence shares
    beta = {
        1: np.array([0.494, 0.015, -0.279, -0.182, 0.0, 0.0]),
        2: np.array([0.60, 0.012, -0.20, -0.18, -0.10, 0.3]),
        3: np.array([0.68, 0.021, -0.10, -0.22, 0.0, 0.8]),
    }

    theta = np.zeros(n_areas)
    for s in (1, 2, 3):
        mask = stratum == s
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        s2e, rho = STRATUM_SAR[s]
        sub_geos = [geos[i] for i in idx]
        k = min(5, idx.size - 1)
        if k >= 1:
            wm = w_mod.neighbors_knn(sub_geos, k).matrix()
        else:
            wm = np.zeros((idx.size, idx.size))
        eps = rng.normal(0.0, np.sqrt(s2e), idx.size)
        u = np.linalg.solve(np.eye(idx.size) - rho * wm, eps)
        xmat = np.column_stack([
            np.ones(idx.size), alt[idx], internet[idx], castellano[idx],
            agua[idx], analfabet[idx],
        ])
        theta[idx] = xmat @ beta[s] + u
    theta = np.clip(theta, 0.02, 0.98)

    sampled = rng.random(n_areas) < sampled_fraction
    # make sure every stratum keeps both sampled and unsampled areas
    for s in (1, 2, 3):
        mask = stratum == s
        if mask.sum() >= 2:
            idx = np.flatnonzero(mask)
            sampled[idx[0]] = True
            sampled[idx[-1]] = False

    n_eff = rng.integers(8, 80, n_areas).astype(float)
    var_y = theta * (1 - theta) / n_eff
    y = np.where(sampled, theta + rng.normal(0.0, np.sqrt(var_y)), np.nan)
    y = np.clip(y, 0.0, 1.0)

    return {
        "area_id": ids, "y": y, "var_y": np.where(sampled, var_y, np.nan),
        "lat": lat, "lon": lon, "poverty_pct": poverty, "sampled": sampled,
        "theta_true": theta, "stratum_true": stratum,
        "covariates": {
            "altitude_km": alt, "internet": internet, "castellano": castellano,
            "agua": agua, "analfabet": analfabet,
        },
    }


def write_area_table_csv(path: str, table: dict) -> None:
    import csv

    cov = table["covariates"]
    cov_names = list(cov)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["area_id", "y", "var_y", "lat", "lon", "poverty_pct",
                     "sampled"] + cov_names)
        for i in range(len(table["area_id"])):
            y = table["y"][i]
            v = table["var_y"][i]
            wr.writerow([
                table["area_id"][i],
                repr(float(y)) if np.isfinite(y) else "",
                repr(float(v)) if np.isfinite(v) else "",
                repr(float(table["lat"][i])), repr(float(table["lon"][i])),
                repr(float(table["poverty_pct"][i])),
                "1" if table["sampled"][i] else "0",
            ] + [repr(float(cov[c][i])) for c in cov_names])
