"""Spatial proximity structures over areas and autocorrelation diagnostics.

Neighbor rules: distance threshold, k-nearest, and shared-boundary
contiguity.  All produce a row-stochastic matrix w_ij = 1/K_i over the
neighbor set S_i, with zero diagonal; isolated areas keep an all-zero row
and are flagged as islands.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import KTooLarge, MissingBoundary, ZeroVariance

EARTH_RADIUS_KM = 6371.0088
CONTIGUITY_SNAP_DEG = 1e-9


@dataclass(frozen=True)
class AreaGeo:
    """Area location: centroid coordinates plus optional boundary polygon."""

    area_id: str
    latitude: float
    longitude: float
    altitude_km: float = 0.0
    boundary: tuple[tuple[tuple[float, float], ...], ...] | None = None  # rings of (lat, lon)

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")


@dataclass(frozen=True)
class SpatialWeights:
    """Row-stochastic proximity matrix stored as per-area neighbor index sets."""

    ids: tuple[str, ...]
    neighbors: tuple[tuple[int, ...], ...]  # sorted index tuples, self excluded

    def __post_init__(self):
        for i, nb in enumerate(self.neighbors):
            if i in nb:
                raise ValueError(f"area {self.ids[i]} listed as its own neighbor")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def islands(self) -> tuple[int, ...]:
        return tuple(i for i, nb in enumerate(self.neighbors) if not nb)

    def row(self, i: int) -> dict[int, float]:
        nb = self.neighbors[i]
        return {j: 1.0 / len(nb) for j in nb} if nb else {}

    def matrix(self) -> np.ndarray:
        w = np.zeros((self.n, self.n))
        for i, nb in enumerate(self.neighbors):
            if nb:
                w[i, list(nb)] = 1.0 / len(nb)
        return w

    def restrict(self, keep_ids: Sequence[str]) -> "SpatialWeights":
        """Subset to keep_ids (in the given order) and renormalize rows."""
        index = {a: i for i, a in enumerate(self.ids)}
        old = [index[a] for a in keep_ids]
        remap = {o: k for k, o in enumerate(old)}
        nbs = tuple(
            tuple(sorted(remap[j] for j in self.neighbors[o] if j in remap))
            for o in old
        )
        return SpatialWeights(tuple(keep_ids), nbs)


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometers."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def _distance_matrix(geos: Sequence[AreaGeo]) -> np.ndarray:
    lat = np.radians([g.latitude for g in geos])
    lon = np.radians([g.longitude for g in geos])
    dp = lat[:, None] - lat[None, :]
    dl = lon[:, None] - lon[None, :]
    a = np.sin(dp / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def neighbors_distance(geos: Sequence[AreaGeo], L: float) -> SpatialWeights:
    """Neighbors are all areas within great-circle distance L km."""
    if L <= 0:
        raise ValueError("L must be positive")
    if len(geos) < 2:
        raise ValueError("need at least two areas")
    d = _distance_matrix(geos)
    np.fill_diagonal(d, np.inf)
    nbs = tuple(tuple(np.flatnonzero(d[i] <= L).tolist()) for i in range(len(geos)))
    return SpatialWeights(tuple(g.area_id for g in geos), nbs)


def neighbors_knn(geos: Sequence[AreaGeo], k: int) -> SpatialWeights:
    """Neighbors are the k nearest areas; ties broken by smaller area_id."""
    D = len(geos)
    if not 1 <= k <= D - 1:
        raise KTooLarge(f"k={k} with {D} areas")
    d = _distance_matrix(geos)
    ids = [g.area_id for g in geos]
    nbs = []
    for i in range(D):
        order = sorted((d[i, j], ids[j], j) for j in range(D) if j != i)
        nbs.append(tuple(sorted(j for _, _, j in order[:k])))
    return SpatialWeights(tuple(ids), tuple(nbs))


def neighbors_contiguity(geos: Sequence[AreaGeo]) -> SpatialWeights:
    """Neighbors are areas sharing at least one boundary segment (rook)."""
    from shapely.geometry import Polygon

    polys = []
    for g in geos:
        if g.boundary is None:
            raise MissingBoundary(f"area {g.area_id} has no polygon")
        snap = round(-math.log10(CONTIGUITY_SNAP_DEG))
        rings = [
            [(round(lon, snap), round(lat, snap)) for lat, lon in ring]
            for ring in g.boundary
        ]
        polys.append(Polygon(rings[0], rings[1:]))

    D = len(geos)
    nbs = [set() for _ in range(D)]
    for i in range(D):
        for j in range(i + 1, D):
            inter = polys[i].boundary.intersection(polys[j].boundary)
            if inter.length > 0:
                nbs[i].add(j)
                nbs[j].add(i)
    return SpatialWeights(
        tuple(g.area_id for g in geos), tuple(tuple(sorted(s)) for s in nbs)
    )


def morans_i(values: Sequence[float], w: SpatialWeights) -> float:
    """Global Moran autocorrelation statistic.

    I = (D / S0) * sum_ij w_ij (x_i - xbar)(x_j - xbar) / sum_i (x_i - xbar)^2
    with S0 the sum of all weights.
    """
    x = np.asarray(values, dtype=float)
    if x.shape != (w.n,):
        raise ValueError("values length does not match weights")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise ZeroVariance("all values identical")
    wm = w.matrix()
    s0 = wm.sum()
    if s0 == 0.0:
        raise ValueError("weights matrix has no nonzero entries")
    return float(len(x) / s0 * (z @ wm @ z) / denom)


# --- I/O -------------------------------------------------------------------

def read_centroids_csv(path: str) -> list[AreaGeo]:
    """Read ``area_id,lat,lon,altitude_km`` centroid fallback format."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                AreaGeo(
                    rec["area_id"],
                    float(rec["lat"]),
                    float(rec["lon"]),
                    float(rec.get("altitude_km") or 0.0),
                )
            )
    return out


def read_geojson(path: str) -> list[AreaGeo]:
    """Read a GeoJSON FeatureCollection of polygons with an area_id property."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    out = []
    for feat in doc["features"]:
        geom = feat["geometry"]
        props = feat["properties"]
        if geom["type"] == "Polygon":
            rings = tuple(
                tuple((lat, lon) for lon, lat in ring) for ring in geom["coordinates"]
            )
        elif geom["type"] == "Point":
            lon, lat = geom["coordinates"]
            rings = None
        else:
            raise ValueError(f"unsupported geometry type {geom['type']}")
        if rings is not None:
            flat = [pt for ring in rings for pt in ring]
            lat = sum(p[0] for p in flat) / len(flat)
            lon = sum(p[1] for p in flat) / len(flat)
        out.append(
            AreaGeo(
                str(props["area_id"]), lat, lon,
                float(props.get("altitude_km", 0.0)), rings,
            )
        )
    return out


def write_weights_csv(path: str, w: SpatialWeights) -> None:
    """Write nonzero entries as ``i_id,j_id,w`` triplets."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i_id", "j_id", "w"])
        for i, nb in enumerate(w.neighbors):
            if not nb:
                # zero self-weight marker keeps islands round-trippable
                wr.writerow([w.ids[i], w.ids[i], "0.0"])
            for j in nb:
                wr.writerow([w.ids[i], w.ids[j], repr(1.0 / len(nb))])


def read_weights_csv(path: str) -> SpatialWeights:
    triplets = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            triplets.append((rec["i_id"], rec["j_id"], float(rec["w"])))
    ids = sorted({t[0] for t in triplets} | {t[1] for t in triplets})
    index = {a: i for i, a in enumerate(ids)}
    nbs: list[set[int]] = [set() for _ in ids]
    for i_id, j_id, val in triplets:
        if val != 0.0:
            nbs[index[i_id]].add(index[j_id])
    for i_id, j_id, val in triplets:
        k = len(nbs[index[i_id]])
        if val != 0.0 and not math.isclose(val, 1.0 / k, rel_tol=1e-9):
            raise ValueError(f"weight {val} for {i_id}->{j_id} is not 1/{k}")
    return SpatialWeights(tuple(ids), tuple(tuple(sorted(s)) for s in nbs))
