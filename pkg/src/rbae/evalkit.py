"""Detection and segmentation metrics: image/pixel ROCAUC and PROAUC, plus the
per-category report table."""

from __future__ import annotations

import json
import warnings
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

METRICS = ("image_auroc", "pixel_auroc", "pro_auc")
METRIC_TITLES = {"image_auroc": "Image ROCAUC", "pixel_auroc": "Pixel ROCAUC", "pro_auc": "PROAUC"}


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given input (e.g. a single class)."""


class DegenerateMetricWarning(UserWarning):
    """All scores tie; the metric is reported at its chance value."""


def _curve_area(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """ROC points ``(fpr, tpr)`` from a sweep over every distinct score, starting at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROCAUC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve; ties get half credit (Mann-Whitney convention)."""
    fpr, tpr = roc_curve(scores, labels)
    return _curve_area(fpr, tpr)


def _flat(arrays: Iterable[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def pixel_roc_auc(
    anomaly_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], pooling: str = "pooled"
) -> float:
    """Pixel-level ROCAUC.

    ``pooled`` treats every pixel of every image as one population;
    ``per-image`` averages the AUC of images holding both classes.
    An all-tied population yields 0.5 and a :class:`DegenerateMetricWarning`.
    """
    if len(anomaly_maps) != len(masks):
        raise ValueError("need one mask per anomaly map")
    for am, m in zip(anomaly_maps, masks):
        if np.shape(am) != np.shape(m):
            raise ValueError(f"map shape {np.shape(am)} does not match mask shape {np.shape(m)}")
    if pooling == "pooled":
        scores, labels = _flat(anomaly_maps), _flat(masks) > 0
        value = roc_auc(scores, labels)
        if np.all(scores == scores[0]):
            warnings.warn("all pixel scores are equal; pixel ROCAUC is degenerate", DegenerateMetricWarning)
        return value
    if pooling == "per-image":
        values = []
        for am, m in zip(anomaly_maps, masks):
            lab = np.asarray(m).ravel() > 0
            if lab.all() or not lab.any():
                continue
            values.append(roc_auc(np.asarray(am).ravel(), lab))
        if not values:
            raise UndefinedMetricError("no image holds both defect and normal pixels")
        return float(np.mean(values))
    raise ValueError(f"unknown pooling {pooling!r}")


def label_regions(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Connected components of the defect pixels (4- or 8-connected)."""
    if connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    elif connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=structure)
    return labels, int(n)


def pro_curve(
    anomaly_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], connectivity: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """Per-region overlap against false-positive rate.

    A pixel counts as predicted at threshold ``t`` when its score is ``>= t``,
    for every distinct score above the pooled minimum (pixels at the minimum
    score are never flagged).  Returns ``(fpr, pro)`` starting at (0, 0).
    """
    scores, pro_w, fpr_w = [], [], []
    regions: list[int] = []
    for am, m in zip(anomaly_maps, masks):
        am = np.asarray(am, dtype=np.float64)
        if am.shape != np.shape(m):
            raise ValueError(f"map shape {am.shape} does not match mask shape {np.shape(m)}")
        labels, n = label_regions(m, connectivity)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        scores.append(am.ravel())
        lab = labels.ravel()
        # per-pixel 1/|region| (0 outside regions), normalised by region count below
        inv = np.zeros(n + 1)
        inv[1:] = 1.0 / sizes[1:]
        pro_w.append(inv[lab])
        fpr_w.append((lab == 0).astype(np.float64))
        regions.append(n)
    n_regions = sum(regions)
    if n_regions == 0:
        raise UndefinedMetricError("PROAUC needs at least one ground-truth defect region")
    s = np.concatenate(scores)
    wp = np.concatenate(pro_w) / n_regions
    wf = np.concatenate(fpr_w)
    n_neg = wf.sum()
    if n_neg == 0:
        raise UndefinedMetricError("PROAUC needs at least one normal pixel")
    wf = wf / n_neg

    order = np.argsort(-s, kind="mergesort")
    s, wp, wf = s[order], wp[order], wf[order]
    ends = np.flatnonzero(np.diff(s) != 0)  # drops the final (minimum-score) run
    # both are fractions; clipping removes summation drift past 1
    pro = np.r_[0.0, np.minimum(np.cumsum(wp)[ends], 1.0)]
    fpr = np.r_[0.0, np.minimum(np.cumsum(wf)[ends], 1.0)]
    return fpr, pro


def integrate_capped(fpr: np.ndarray, pro: np.ndarray, fpr_cap: float) -> float:
    """Trapezoid area on ``[0, fpr_cap]`` divided by ``fpr_cap``.

    The curve is linearly interpolated at the cap, and held flat at its last
    value if it ends before the cap.
    """
    if not 0 < fpr_cap <= 1:
        raise ValueError("fpr_cap must lie in (0, 1]")
    keep = fpr <= fpr_cap
    x, y = fpr[keep], pro[keep]
    if x[-1] < fpr_cap:
        nxt = np.flatnonzero(~keep)
        if nxt.size:
            j = nxt[0]
            t = (fpr_cap - fpr[j - 1]) / (fpr[j] - fpr[j - 1])
            y_cap = pro[j - 1] + t * (pro[j] - pro[j - 1])
        else:
            y_cap = y[-1]
        x, y = np.r_[x, fpr_cap], np.r_[y, y_cap]
    return min(_curve_area(x, y) / fpr_cap, 1.0)


def pro_auc(
    anomaly_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_cap: float = 0.3, connectivity: int = 8
) -> float:
    """Normalised area under the per-region-overlap curve up to ``fpr_cap``."""
    fpr, pro = pro_curve(anomaly_maps, masks, connectivity)
    return integrate_capped(fpr, pro, fpr_cap)


# ------------------------------------------------------------ report


def report(results: Mapping[str, Mapping[str, float]] | Sequence[Mapping[str, float]]) -> tuple[str, list[dict]]:
    """Per-category table with an unweighted ``Average`` row.

    ``results`` maps category -> {metric: value in [0, 1]} (or is a list of
    records carrying a ``category`` key).  Returns the text table (percent,
    two decimals) and structured records (full precision).
    """
    if isinstance(results, Mapping):
        rows = [{"category": cat, **vals} for cat, vals in results.items()]
    else:
        rows = [dict(r) for r in results]
    if not rows:
        raise ValueError("report needs at least one evaluated category")
    metrics = [m for m in METRICS if any(m in r for r in rows)]
    numeric = {k for r in rows for k, v in r.items() if isinstance(v, float) and k not in ("fpr_cap",)}
    metrics += sorted(numeric - set(metrics))
    avg = {"category": "Average"}
    for m in metrics:
        vals = [r[m] for r in rows if r.get(m) is not None]
        avg[m] = float(np.mean(vals)) if vals else None
    records = rows + [avg]

    header = ["Category"] + [METRIC_TITLES.get(m, m) for m in metrics]
    lines = []
    for r in records:
        cells = [str(r["category"])]
        for m in metrics:
            v = r.get(m)
            cells.append("-" if v is None else f"{100.0 * v:.2f}")
        lines.append(cells)
    widths = [max(len(header[i]), *(len(row[i]) for row in lines)) for i in range(len(header))]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * len(fmt(header))
    text = "\n".join([fmt(header), rule, *(fmt(c) for c in lines[:-1]), rule, fmt(lines[-1])])
    return text, records


def records_to_json(records: list[dict]) -> str:
    return json.dumps(records, indent=2, sort_keys=False)
