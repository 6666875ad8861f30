"""Detection metrics and the evaluation report.

AUROC is the exact Mann-Whitney pair statistic (ties count one half),
not a trapezoid integration of an interpolated curve. FPR@TPR picks the
largest threshold accepting at least ceil(tpr * N_id) ID samples under
the ``score >= threshold`` acceptance rule. Distribution overlap is the
summed bin-wise minimum of two jointly min-max-scaled histograms.

Both score series must share the larger-is-more-ID orientation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateRange, InternalError, InvalidInput


def _series(values) -> np.ndarray:
    arr = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInput("score series must be nonempty and 1-D")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("score series must be finite")
    return arr


def auroc(id_scores, ood_scores) -> float:
    """P(ID score > OOD score) over all pairs, ties counted 1/2."""
    ids = _series(id_scores)
    oods = _series(ood_scores)
    n, m = ids.size, oods.size
    ranks = rankdata(np.concatenate([ids, oods]), method="average")
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """OOD fraction accepted when the threshold admits >= tpr of ID."""
    ids = _series(id_scores)
    oods = _series(ood_scores)
    if not 0.0 < tpr <= 1.0:
        raise InvalidInput("tpr must lie in (0, 1]")
    need = math.ceil(tpr * ids.size)
    threshold = np.sort(ids)[::-1][need - 1]
    return float(np.mean(oods >= threshold))


def overlap_histograms(id_scores, ood_scores, bins: int = 50):
    """Jointly scaled per-series probability histograms.

    Returns ``(edges, p_id, p_ood)`` with ``bins + 1`` edges on [0, 1]
    and per-bin probability masses summing to one per series.

    Raises:
        DegenerateRange: the combined series is constant.
    """
    ids = _series(id_scores)
    oods = _series(ood_scores)
    if bins < 1:
        raise InvalidInput("bins must be >= 1")
    combined = np.concatenate([ids, oods])
    lo, hi = combined.min(), combined.max()
    if hi <= lo:
        raise DegenerateRange("combined score series is constant")
    scale = hi - lo
    edges = np.linspace(0.0, 1.0, bins + 1)
    p_id, _ = np.histogram((ids - lo) / scale, bins=bins, range=(0.0, 1.0))
    p_ood, _ = np.histogram((oods - lo) / scale, bins=bins, range=(0.0, 1.0))
    return edges, p_id / ids.size, p_ood / oods.size


def overlap_area(id_scores, ood_scores, bins: int = 50) -> float:
    """Sum over bins of min(p_id, p_ood); 0 = disjoint, 1 = identical."""
    _, p_id, p_ood = overlap_histograms(id_scores, ood_scores, bins)
    return float(np.minimum(p_id, p_ood).sum())


@dataclass
class EvalReport:
    """Bundle of detection metrics, range-validated on construction."""

    auroc: float
    fpr95: float
    overlap_area: float
    n_id: int
    n_ood: int
    compactness_deg: float | None = None
    far_id_fraction: float | None = None
    config_hash: str = ""

    def validate(self) -> None:
        unit = {"auroc": self.auroc, "fpr95": self.fpr95,
                "overlap_area": self.overlap_area}
        if self.far_id_fraction is not None:
            unit["far_id_fraction"] = self.far_id_fraction
        for name, val in unit.items():
            if not (np.isfinite(val) and 0.0 <= val <= 1.0):
                raise InternalError(f"{name}={val!r} outside [0, 1]")
        if self.compactness_deg is not None:
            if not (np.isfinite(self.compactness_deg)
                    and 0.0 <= self.compactness_deg <= 180.0):
                raise InternalError(
                    f"compactness_deg={self.compactness_deg!r} outside [0, 180]")
        if self.n_id < 1 or self.n_ood < 1:
            raise InternalError("sample counts must be positive")

    def to_json(self) -> str:
        payload = {
            "auroc": self.auroc,
            "fpr95": self.fpr95,
            "overlap_area": self.overlap_area,
            "compactness_deg": self.compactness_deg,
            "far_id_fraction": self.far_id_fraction,
            "counts": {"id": self.n_id, "ood": self.n_ood},
            "config_hash": self.config_hash,
        }
        return json.dumps(payload, sort_keys=True)


def report_from_json(text: str) -> EvalReport:
    raw = json.loads(text)
    report = EvalReport(
        auroc=raw["auroc"], fpr95=raw["fpr95"], overlap_area=raw["overlap_area"],
        n_id=raw["counts"]["id"], n_ood=raw["counts"]["ood"],
        compactness_deg=raw.get("compactness_deg"),
        far_id_fraction=raw.get("far_id_fraction"),
        config_hash=raw.get("config_hash", ""))
    report.validate()
    return report


def make_report(id_scores, ood_scores, bins: int = 50,
                compactness_deg: float | None = None,
                far_id_fraction: float | None = None,
                config_hash: str = "") -> EvalReport:
    """Compute all score-based metrics and assemble a validated report."""
    ids = _series(id_scores)
    oods = _series(ood_scores)
    report = EvalReport(
        auroc=auroc(ids, oods),
        fpr95=fpr_at_tpr(ids, oods),
        overlap_area=overlap_area(ids, oods, bins=bins),
        n_id=ids.size, n_ood=oods.size,
        compactness_deg=compactness_deg,
        far_id_fraction=far_id_fraction,
        config_hash=config_hash)
    report.validate()
    return report
