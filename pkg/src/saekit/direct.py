"""Design-based direct estimation of area-level proportions.

Unit-level survey rows are turned into per-area Hajek (weight-normalized
Horvitz-Thompson) proportions with a with-replacement first-stage cluster
linearized variance, the standard approximation for two-stage household
surveys.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyArea, MissingMeasurement

ANEMIA_HEMOGLOBIN_G_DL = 11.0

SINGLE_CLUSTER = "single_cluster"
VARIANCE_IMPUTED = "variance_imputed"
CENSUS_COMPLETE = "census_complete"


@dataclass(frozen=True)
class SurveyRow:
    """One sampled child: design weight plus raw health measurements."""

    area_id: str
    cluster_id: str
    sampling_weight: float
    hemoglobin_g_dl: float | None = None
    stunted: bool | None = None
    age_months: int = 0

    def __post_init__(self):
        if not self.sampling_weight > 0:
            raise ValueError(f"sampling_weight must be > 0, got {self.sampling_weight}")


@dataclass(frozen=True)
class DirectEstimate:
    """Per-area direct proportion with its design variance."""

    area_id: str
    y: float
    var_y: float
    n_eff: float
    n_raw: int
    flags: tuple[str, ...] = field(default_factory=tuple)


def anemia_indicator(row: SurveyRow, threshold: float = ANEMIA_HEMOGLOBIN_G_DL) -> bool:
    """True iff hemoglobin is strictly below the anemia cutoff (g/dl)."""
    if row.hemoglobin_g_dl is None:
        raise MissingMeasurement(f"row in area {row.area_id} has no hemoglobin value")
    return row.hemoglobin_g_dl < threshold


def stunting_indicator(row: SurveyRow) -> bool:
    """Pass through the precomputed stunting-risk flag.

    The growth-curve cutoff is applied upstream (the percentile table is
    external data, see :func:`load_percentile_table`), so the row carries a
    boolean.
    """
    if row.stunted is None:
        raise MissingMeasurement(f"row in area {row.area_id} has no stunting flag")
    return bool(row.stunted)


def classify_stunting(height_cm: float, age_months: int, table: dict[int, float]) -> bool:
    """True iff height falls below the cutoff for the child's age.

    Which percentile the cutoff represents is up to the supplied table; the
    toolkit does not pick one.
    """
    if age_months not in table:
        raise MissingMeasurement(f"no cutoff for age {age_months} months")
    return height_cm < table[age_months]


def load_percentile_table(path: str) -> dict[int, float]:
    """Load a CSV ``age_months,height_cutoff_cm`` percentile table."""
    out: dict[int, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out[int(rec["age_months"])] = float(rec["height_cutoff_cm"])
    return out


def ht_proportion(
    rows: Sequence[SurveyRow],
    indicator: Callable[[SurveyRow], bool],
) -> DirectEstimate:
    """Hajek proportion with cluster-linearized design variance.

    y = sum(w_k I_k) / sum(w_k).  The variance treats first-stage clusters
    as sampled with replacement: with cluster totals
    z_c = sum_{k in c} w_k (I_k - y),

        var_y = n_c / (n_c - 1) * sum_c z_c^2 / (sum_k w_k)^2.

    Single-cluster areas get var_y = nan and the ``single_cluster`` flag;
    impute afterwards with :func:`impute_single_cluster_variances`.
    """
    if len(rows) == 0:
        raise EmptyArea("no rows supplied")
    area_id = rows[0].area_id
    if any(r.area_id != area_id for r in rows):
        raise ValueError("rows span multiple areas")

    w = np.array([r.sampling_weight for r in rows], dtype=float)
    ind = np.array([1.0 if indicator(r) else 0.0 for r in rows])
    wsum = w.sum()
    y = float(w @ ind / wsum)

    clusters = defaultdict(list)
    for k, r in enumerate(rows):
        clusters[r.cluster_id].append(k)
    n_c = len(clusters)

    flags: list[str] = []
    if n_c < 2:
        var_y = float("nan")
        flags.append(SINGLE_CLUSTER)
    else:
        z = np.array([np.sum(w[idx] * (ind[idx] - y)) for idx in map(list, clusters.values())])
        var_y = float(n_c / (n_c - 1) * np.sum(z**2) / wsum**2)
        if var_y == 0.0:
            flags.append(CENSUS_COMPLETE)

    if var_y > 0:
        n_eff = y * (1 - y) / var_y if 0 < y < 1 else float(len(rows))
    else:
        n_eff = float(len(rows))

    return DirectEstimate(area_id, y, var_y, n_eff, len(rows), tuple(flags))


def impute_single_cluster_variances(
    estimates: Sequence[DirectEstimate],
) -> list[DirectEstimate]:
    """Replace nan variances with median relative variance scaled by 1/n_raw.

    The median relative variance rv = var_y / (y (1-y)) is taken over the
    estimates with a valid variance (typically the same stratum), then
    var_y = rv_med * y (1-y) / n_raw for each flagged area.  Flagged rows
    gain ``variance_imputed``.
    """
    valid = [
        e.var_y / (e.y * (1 - e.y))
        for e in estimates
        if np.isfinite(e.var_y) and e.var_y > 0 and 0 < e.y < 1
    ]
    if not valid:
        raise ValueError("no valid variances available to impute from")
    rv_med = float(np.median(valid))

    out = []
    for e in estimates:
        if np.isfinite(e.var_y):
            out.append(e)
            continue
        p = min(max(e.y, 1e-6), 1 - 1e-6)
        var_y = rv_med * p * (1 - p) / max(e.n_raw, 1)
        out.append(
            DirectEstimate(
                e.area_id, e.y, var_y, p * (1 - p) / var_y, e.n_raw,
                e.flags + (VARIANCE_IMPUTED,),
            )
        )
    return out


# --- CSV interfaces -------------------------------------------------------
# Input header: area_id,cluster_id,weight,hemoglobin,stunted,age_months
# Output header: area_id,y,var_y,n_eff,n_raw,flags

def read_survey_csv(path: str) -> list[SurveyRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            hemo = rec.get("hemoglobin", "")
            stunted = rec.get("stunted", "")
            rows.append(
                SurveyRow(
                    area_id=rec["area_id"],
                    cluster_id=rec["cluster_id"],
                    sampling_weight=float(rec["weight"]),
                    hemoglobin_g_dl=float(hemo) if hemo != "" else None,
                    stunted=(stunted in ("1", "true", "True")) if stunted != "" else None,
                    age_months=int(rec["age_months"]) if rec.get("age_months") else 0,
                )
            )
    return rows


def estimate_by_area(
    rows: Iterable[SurveyRow],
    indicator: Callable[[SurveyRow], bool],
    impute_singletons: bool = True,
) -> list[DirectEstimate]:
    """Group rows by area, estimate each, and optionally impute singletons."""
    by_area: dict[str, list[SurveyRow]] = defaultdict(list)
    for r in rows:
        by_area[r.area_id].append(r)
    ests = [ht_proportion(v, indicator) for _, v in sorted(by_area.items())]
    if impute_singletons and any(SINGLE_CLUSTER in e.flags for e in ests):
        ests = impute_single_cluster_variances(ests)
    return ests


def write_estimates_csv(path: str, estimates: Sequence[DirectEstimate]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["area_id", "y", "var_y", "n_eff", "n_raw", "flags"])
        for e in estimates:
            wr.writerow([e.area_id, repr(e.y), repr(e.var_y), repr(e.n_eff), e.n_raw,
                         ";".join(e.flags)])
