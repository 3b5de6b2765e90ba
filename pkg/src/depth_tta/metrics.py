"""Standard monocular depth metrics and their aggregation over a stream."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import InputError

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass
class MetricRecord:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int = 0
    domain: str = ""

    def as_dict(self):
        return asdict(self)

    def values(self):
        return [getattr(self, n) for n in METRIC_NAMES]


def compute_metrics(pred, gt, valid=None, depth_cap=80.0, min_depth=1e-3, median_scaling=False, domain=""):
    """Error and threshold-accuracy metrics over valid pixels.

    Both maps are clamped to ``[min_depth, depth_cap]`` before comparison.
    ``valid`` defaults to ``gt > 0``. Threshold accuracies use a strict
    ``max(p/g, g/p) < 1.25**k``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool) & (gt > 0)
    if not valid.any():
        raise InputError("no valid pixels to evaluate")
    p = pred[valid]
    g = gt[valid]
    if median_scaling:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, min_depth, depth_cap)
    g = np.clip(g, min_depth, depth_cap)
    ratio = np.maximum(p / g, g / p)
    diff = p - g
    return MetricRecord(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=int(valid.sum()),
        domain=domain,
    )


def aggregate(records, rule="per-frame", domain=""):
    """Combine per-frame records into one.

    ``per-frame`` (default) is the plain mean of each metric across frames.
    ``pooled`` weights each frame by its valid-pixel count for the mean-type
    metrics and pools squared errors before the square root for RMSE and
    RMSElog, which equals evaluating all pixels at once.
    """
    records = list(records)
    if not records:
        raise InputError("nothing to aggregate")
    n = np.array([r.n_valid for r in records], dtype=np.float64)
    cols = {name: np.array([getattr(r, name) for r in records]) for name in METRIC_NAMES}
    if rule == "per-frame":
        out = {name: float(col.mean()) for name, col in cols.items()}
    elif rule == "pooled":
        w = n / n.sum()
        out = {name: float((w * col).sum()) for name, col in cols.items()}
        out["rmse"] = float(np.sqrt((w * cols["rmse"] ** 2).sum()))
        out["rmse_log"] = float(np.sqrt((w * cols["rmse_log"] ** 2).sum()))
    else:
        raise InputError(f"unknown aggregation rule {rule!r}")
    return MetricRecord(**out, n_valid=int(n.sum()), domain=domain)


def record_fields():
    return [f.name for f in fields(MetricRecord)]
