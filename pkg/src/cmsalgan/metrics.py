"""Saliency evaluation: PR curve, max F-measure, S-measure, MAE.

All maps are 2-D (or (1, H, W)) arrays; predictions in [0, 1], ground
truth binary. Computation is in float64.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_EPS = np.finfo(np.float64).eps


class EmptyGroundTruthWarning(UserWarning):
    pass


@dataclass
class MetricsConfig:
    beta2: float = 0.3
    s_alpha: float = 0.5
    n_thresholds: int = 256

    def validate(self) -> None:
        if self.beta2 <= 0:
            raise ValueError("beta2 must be > 0")
        if not 0.0 <= self.s_alpha <= 1.0:
            raise ValueError("s_alpha must be in [0, 1]")
        if self.n_thresholds < 2:
            raise ValueError("n_thresholds must be >= 2")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray


@dataclass
class MetricsReport:
    ids: list
    max_f: np.ndarray
    s: np.ndarray
    mae: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    thresholds: np.ndarray
    mean_max_f: float = 0.0           # maxF of the mean PR curve
    mean_image_max_f: float = 0.0     # mean of per-image maxF
    mean_s: float = 0.0
    mean_mae: float = 0.0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "n_images": len(self.ids),
            "maxF": self.mean_max_f,
            "maxF_per_image_mean": self.mean_image_max_f,
            "S": self.mean_s,
            "MAE": self.mean_mae,
        }


def _plane(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {a.shape}")
    return a


def _pair(pred, gt):
    p, g = _plane(pred), _plane(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g > 0.5


def thresholds(n: int = 256) -> np.ndarray:
    return np.arange(n, dtype=np.float64) / (n - 1)


def confusion_counts(pred, gt, n: int = 256) -> ConfusionCounts:
    """Counts at thresholds k/(n-1), predicting foreground where pred >= t."""
    p, g = _pair(pred, gt)
    t = thresholds(n)
    fg = np.sort(p[g])
    bg = np.sort(p[~g])
    tp = fg.size - np.searchsorted(fg, t, side="left")
    fp = bg.size - np.searchsorted(bg, t, side="left")
    return ConfusionCounts(tp=tp, fp=fp, tn=bg.size - fp, fn=fg.size - tp)


def pr_curve(pred, gt, n: int = 256) -> tuple:
    """(precision[n], recall[n]).

    Precision is 1 where nothing is predicted positive. With an all-background
    gt recall is undefined; it is reported as 1 and a warning is issued.
    """
    c = confusion_counts(pred, gt, n)
    pos = c.tp + c.fp
    precision = np.where(pos > 0, c.tp / np.maximum(pos, 1), 1.0)
    n_fg = c.tp[0] + c.fn[0]
    if n_fg == 0:
        warnings.warn("ground truth has no foreground; recall set to 1", EmptyGroundTruthWarning)
        recall = np.ones(n)
    else:
        recall = c.tp / n_fg
    return precision, recall


def f_measure(precision, recall, beta2: float = 0.3) -> np.ndarray:
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta2 * p + r
    return np.where(den > 0, (1 + beta2) * p * r / np.where(den > 0, den, 1.0), 0.0)


def max_f_measure(precision, recall, beta2: float = 0.3) -> float:
    if np.shape(precision) != np.shape(recall):
        raise ValueError("precision and recall must have the same length")
    return float(f_measure(precision, recall, beta2).max())


def mae(pred, gt) -> float:
    p, g = _plane(pred), _plane(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return float(np.abs(p - g).mean())


# ---------------------------------------------------------------------------
# structure measure


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sd + _EPS)


def s_object(p: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    o_fg = _object_score(p[g])
    o_bg = _object_score(1.0 - p[~g])
    return u * o_fg + (1.0 - u) * o_bg


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    x, y = p.mean(), g.mean()
    d = n - 1 + _EPS
    sx = ((p - x) ** 2).sum() / d
    sy = ((g - y) ** 2).sum() / d
    sxy = ((p - x) * (g - y)).sum() / d
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0 else 0.0


def centroid(g: np.ndarray) -> tuple:
    """1-based (X, Y) split point, rounded half away from zero."""
    rows, cols = g.shape
    total = g.sum()
    if total == 0:
        return int(np.floor(cols / 2 + 0.5)), int(np.floor(rows / 2 + 0.5))
    gf = g.astype(np.float64)
    x = (gf.sum(axis=0) * np.arange(1, cols + 1)).sum() / total
    y = (gf.sum(axis=1) * np.arange(1, rows + 1)).sum() / total
    return int(np.floor(x + 0.5)), int(np.floor(y + 0.5))


def s_region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    x, y = centroid(g)
    gf = g.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        pb, gb = p[rs, cs], gf[rs, cs]
        if pb.size:
            score += pb.size / (h * w) * _ssim(pb, gb)
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """alpha * S_object + (1 - alpha) * S_region, clipped below at 0.

    Degenerate ground truth: all background gives 1 - mean(pred), all
    foreground gives mean(pred).
    """
    p, g = _pair(pred, gt)
    fg = g.mean()
    if fg == 0:
        return float(1.0 - p.mean())
    if fg == 1:
        return float(p.mean())
    q = alpha * s_object(p, g) + (1.0 - alpha) * s_region(p, g)
    return float(max(q, 0.0))


# ---------------------------------------------------------------------------
# dataset level


def evaluate_dataset(predictions: Sequence, gts: Sequence, config: MetricsConfig | None = None,
                     ids: Sequence[str] | None = None) -> MetricsReport:
    cfg = config or MetricsConfig()
    cfg.validate()
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions but {len(gts)} ground-truth maps")
    if not len(predictions):
        raise ValueError("nothing to evaluate")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(predictions))]
    n = len(predictions)
    prec = np.zeros((n, cfg.n_thresholds))
    rec = np.zeros((n, cfg.n_thresholds))
    max_f, s, m = np.zeros(n), np.zeros(n), np.zeros(n)
    for i, (p, g) in enumerate(zip(predictions, gts)):
        prec[i], rec[i] = pr_curve(p, g, cfg.n_thresholds)
        max_f[i] = max_f_measure(prec[i], rec[i], cfg.beta2)
        s[i] = s_measure(p, g, cfg.s_alpha)
        m[i] = mae(p, g)
    mp, mr = prec.mean(axis=0), rec.mean(axis=0)
    return MetricsReport(
        ids=ids, max_f=max_f, s=s, mae=m, precision=mp, recall=mr,
        thresholds=thresholds(cfg.n_thresholds),
        mean_max_f=max_f_measure(mp, mr, cfg.beta2),
        mean_image_max_f=float(max_f.mean()),
        mean_s=float(s.mean()), mean_mae=float(m.mean()),
    )


def write_report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "maxF", "S", "MAE"])
        for i, sid in enumerate(report.ids):
            w.writerow([sid, f"{report.max_f[i]:.6f}", f"{report.s[i]:.6f}", f"{report.mae[i]:.6f}"])
        w.writerow(["aggregate", f"{report.mean_max_f:.6f}", f"{report.mean_s:.6f}", f"{report.mean_mae:.6f}"])


def write_pr_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(report.thresholds, report.precision, report.recall):
            w.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"])


def read_pr_csv(path) -> tuple:
    a = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return a[:, 0], a[:, 1], a[:, 2]


def format_summary(report: MetricsReport) -> str:
    s = report.summary()
    lines = [f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}" for k, v in s.items()]
    return "\n".join(lines) + "\n"
