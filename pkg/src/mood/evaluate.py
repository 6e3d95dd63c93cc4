"""Threshold-free and thresholded OOD evaluation.

All score vectors are expected in the package-wide orientation: higher =
more OOD. AUROC is then the probability that a random OOD sample outscores
a random ID sample, ties counting one half.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datamodel import FeatureSet, atomic_write_bytes
from .errors import DataError, FormatError, ShapeError
from .gaussian import GaussianModel, mahalanobis_score_batch, predict_class_batch


def _check_scores(scores, name: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DataError(f"{name} scores are empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} scores contain non-finite values")
    return arr


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ordered = values[order]
    bounds = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1], True])
    avg = (bounds[:-1] + 1 + bounds[1:]) / 2.0
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.repeat(avg, np.diff(bounds))
    return ranks


def auroc(id_scores, ood_scores) -> float:
    """Rank-statistic AUROC in O((n+m) log(n+m)), midrank tie handling."""
    ids = _check_scores(id_scores, "ID")
    oods = _check_scores(ood_scores, "OOD")
    n, m = ids.size, oods.size
    ranks = _midranks(np.concatenate([ids, oods]))
    u = ranks[n:].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


def threshold_at_tpr(id_scores, tpr: float) -> float:
    """Smallest observed ID score accepting at least a ``tpr`` fraction of ID.

    A sample is accepted as ID iff its score is <= the returned threshold.
    """
    ids = _check_scores(id_scores, "ID")
    if not (0.0 < tpr <= 1.0):
        raise DataError(f"tpr must lie in (0, 1], got {tpr}")
    n = ids.size
    target = tpr * n
    k = int(np.floor(target))
    if k < target:
        k += 1
    k = max(k, 1)
    return float(np.sort(ids)[k - 1])


def fpr_at_tpr(id_scores, ood_scores, tpr: float) -> float:
    """Fraction of OOD samples wrongly accepted as ID at the TPR threshold."""
    oods = _check_scores(ood_scores, "OOD")
    t = threshold_at_tpr(id_scores, tpr)
    return float(np.mean(oods <= t))


def histogram(scores, bins: int, value_range: tuple[float, float] | None = None):
    """Equal-width histogram; bins are [e_i, e_{i+1}), the last bin closed.

    Returns (edges, counts) with ``len(edges) == bins + 1``.
    """
    arr = _check_scores(scores, "histogram")
    if bins < 1:
        raise DataError(f"bins must be positive, got {bins}")
    if value_range is None:
        lo, hi = float(arr.min()), float(arr.max())
        if lo == hi:
            raise DataError("all scores are equal; pass an explicit range")
    else:
        lo, hi = float(value_range[0]), float(value_range[1])
        if not lo < hi:
            raise DataError(f"range must satisfy lo < hi, got ({lo}, {hi})")
    counts, edges = np.histogram(arr, bins=bins, range=(lo, hi))
    return edges, counts


def confusion_counts(
    gm: GaussianModel, ood_features: FeatureSet, id_scores, tpr: float
) -> dict[int, int]:
    """Per-ID-class counts of OOD samples accepted at the TPR threshold.

    An OOD sample is accepted iff its Mahalanobis score is <= the ID
    threshold; accepted samples are attributed to their nearest class.
    Rejected samples are not counted.
    """
    if ood_features.n_cols != gm.dim:
        raise ShapeError(
            f"feature dimension {ood_features.n_cols} does not match model dimension {gm.dim}"
        )
    t = threshold_at_tpr(id_scores, tpr)
    scores = mahalanobis_score_batch(gm, ood_features.features)
    counts = {int(c): 0 for c in gm.class_labels}
    accepted = scores <= t
    if np.any(accepted):
        preds = predict_class_batch(gm, ood_features.features[accepted])
        for p in preds:
            counts[int(p)] += 1
    return counts


def _histogram_doc(edges: np.ndarray, counts: np.ndarray, n: int) -> dict:
    widths = np.diff(edges)
    density = counts / (n * widths)
    return {
        "bin_edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "density": [float(d) for d in density],
    }


@dataclass
class EvalReport:
    """Aggregated evaluation artifact: AUROC, FPR@TPR, histograms, confusion."""

    auroc: float
    fpr_at_tpr95: float
    threshold: float
    tpr: float
    per_set: dict[str, dict]
    id_histogram: dict
    ood_histograms: dict[str, dict]
    sample_counts: dict[str, int]
    confusion: dict[str, dict[str, int]] | None = None
    bins: int = 20
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "auroc": self.auroc,
            "fpr_at_tpr95": self.fpr_at_tpr95,
            "threshold": self.threshold,
            "tpr": self.tpr,
            "per_set": self.per_set,
            "id_histogram": self.id_histogram,
            "ood_histograms": self.ood_histograms,
            "sample_counts": self.sample_counts,
            "confusion": self.confusion,
            "bins": self.bins,
            "extra": self.extra,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"report is not valid JSON: {exc}") from exc
        try:
            return cls(**doc)
        except TypeError as exc:
            raise FormatError(f"report schema mismatch: {exc}") from exc

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_json().encode("utf-8"))


def build_report(
    id_scores,
    ood_score_sets: dict[str, "np.ndarray"],
    tpr: float = 0.95,
    bins: int = 20,
    confusion_inputs: tuple[GaussianModel, dict[str, FeatureSet]] | None = None,
) -> EvalReport:
    """Evaluate one ID score vector against one or more named OOD sets.

    The report's top-level AUROC is the unweighted macro average across OOD
    sets. Histograms share one common range so the exported distributions
    are directly comparable.
    """
    ids = _check_scores(id_scores, "ID")
    if not ood_score_sets:
        raise DataError("at least one OOD score set is required")
    oods = {name: _check_scores(v, f"OOD[{name}]") for name, v in ood_score_sets.items()}

    lo = min(ids.min(), *(v.min() for v in oods.values()))
    hi = max(ids.max(), *(v.max() for v in oods.values()))
    if lo == hi:
        hi = lo + 1.0  # degenerate joint range; keep one bin holding everything
    value_range = (float(lo), float(hi))

    per_set = {}
    for name, v in oods.items():
        per_set[name] = {
            "auroc": auroc(ids, v),
            "fpr_at_tpr95": fpr_at_tpr(ids, v, tpr),
        }
    macro = float(np.mean([s["auroc"] for s in per_set.values()]))
    macro_fpr = float(np.mean([s["fpr_at_tpr95"] for s in per_set.values()]))

    id_edges, id_counts = histogram(ids, bins, value_range)
    ood_hists = {}
    for name, v in oods.items():
        edges, counts = histogram(v, bins, value_range)
        ood_hists[name] = _histogram_doc(edges, counts, v.size)

    confusion = None
    if confusion_inputs is not None:
        gm, feature_sets = confusion_inputs
        confusion = {}
        for name, fs in feature_sets.items():
            if name not in oods:
                raise DataError(f"confusion features for unknown OOD set {name!r}")
            raw = confusion_counts(gm, fs, ids, tpr)
            confusion[name] = {str(k): v for k, v in raw.items()}

    return EvalReport(
        auroc=macro,
        fpr_at_tpr95=macro_fpr,
        threshold=threshold_at_tpr(ids, tpr),
        tpr=tpr,
        per_set=per_set,
        id_histogram=_histogram_doc(id_edges, id_counts, ids.size),
        ood_histograms=ood_hists,
        sample_counts={"id": int(ids.size), **{n: int(v.size) for n, v in oods.items()}},
        confusion=confusion,
        bins=bins,
    )


def histogram_csv(edges: np.ndarray, counts: np.ndarray, n: int) -> str:
    """Render one histogram as ``edge_lo,edge_hi,count,density`` CSV."""
    widths = np.diff(edges)
    lines = ["edge_lo,edge_hi,count,density"]
    for i, c in enumerate(counts):
        density = c / (n * widths[i])
        lines.append(f"{float(edges[i])!r},{float(edges[i + 1])!r},{int(c)},{float(density)!r}")
    return "\n".join(lines) + "\n"
