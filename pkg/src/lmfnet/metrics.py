"""Saliency evaluation: MAE, PR/F curves, E-measure and S-measure.

Maps are 2-D arrays; predictions lie in [0, 1] and ground truth is 0/1.
Curves use 256 thresholds: a pixel is foreground at threshold ``t`` when
``S >= (t + 0.5) / 256``.  Counts per threshold come from one histogram pass,
so every curve is exactly the per-threshold brute force.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, ShapeError

N_THRESHOLDS = 256
THRESHOLDS = (np.arange(N_THRESHOLDS) + 0.5) / N_THRESHOLDS
BETA2 = 0.3
ALPHA = 0.5
EPS = np.spacing(1.0)


def _pair(s, g) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    s, g = np.squeeze(s), np.squeeze(g)
    if s.shape != g.shape:
        raise ShapeError(f"prediction shape {s.shape} does not match ground truth {g.shape}")
    if s.ndim != 2:
        raise ShapeError(f"metrics expect single-channel 2-D maps, got {s.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be strictly binary")
    return s, g


def mae(s, g) -> float:
    s, g = _pair(s, g)
    return float(np.mean(np.abs(s - g)))


def positives_above(s: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Count of ``mask`` pixels predicted foreground at each of the 256 thresholds."""
    passed = np.searchsorted(THRESHOLDS, s[mask], side="right")  # thresholds each pixel clears
    hist = np.bincount(passed, minlength=N_THRESHOLDS + 1)
    return hist[::-1].cumsum()[::-1][1:]


def threshold_counts(s, g) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Per-threshold true positives and predicted positives, plus GT positives and pixel count."""
    s, g = _pair(s, g)
    fg = g > 0.5
    tp = positives_above(s, fg)
    fp = positives_above(s, ~fg)
    return tp, tp + fp, int(fg.sum()), int(g.size)


def precision_recall(tp, pp, gt_pos) -> tuple[np.ndarray, np.ndarray]:
    """Per-threshold precision and recall with the empty-set conventions.

    No predicted positives: precision 1 if the GT is empty, else 0.
    Empty GT: recall 1.
    """
    tp, pp = np.asarray(tp, dtype=np.float64), np.asarray(pp, dtype=np.float64)
    empty_gt = gt_pos == 0
    precision = np.where(pp > 0, tp / np.maximum(pp, 1), 1.0 if empty_gt else 0.0)
    recall = np.ones_like(tp) if empty_gt else tp / gt_pos
    return precision, recall


def f_beta(precision, recall, beta2: float = BETA2):
    precision, recall = np.asarray(precision), np.asarray(recall)
    denom = beta2 * precision + recall
    return np.where(denom > 0, (1 + beta2) * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)


def pr_f_curves(s, g) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp, pp, gt_pos, _ = threshold_counts(s, g)
    p, r = precision_recall(tp, pp, gt_pos)
    return p, r, f_beta(p, r)


def e_curve(s, g) -> np.ndarray:
    """Enhanced-alignment score at each threshold.

    Only four (prediction, GT) value pairs exist after binarization, so the
    per-pixel alignment term is evaluated once per pair and weighted by counts.
    """
    tp, pp, gt_pos, n = threshold_counts(s, g)
    pred_mean = pp / n
    if gt_pos == n:
        return pred_mean.astype(np.float64)
    if gt_pos == 0:
        return 1.0 - pred_mean
    gt_mean = gt_pos / n
    counts = {
        (1, 1): tp,
        (1, 0): pp - tp,
        (0, 1): gt_pos - tp,
        (0, 0): n - pp - (gt_pos - tp),
    }
    total = np.zeros(N_THRESHOLDS)
    for (fm, gv), count in counts.items():
        a = fm - pred_mean
        b = gv - gt_mean
        phi = 2 * a * b / (a * a + b * b + EPS)
        total += count * (1 + phi) ** 2 / 4
    return total / n


def e_measure(s, g) -> float:
    return float(e_curve(s, g).max())


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return float(2 * mu / (mu * mu + 1 + sigma + EPS))


def s_object(s: np.ndarray, g: np.ndarray) -> float:
    fg = g > 0.5
    u = fg.mean()
    return float(u * _object_score(s[fg]) + (1 - u) * _object_score(1.0 - s[~fg]))


def _block_ssim(s: np.ndarray, g: np.ndarray) -> float:
    n = s.size
    if n == 0:
        return 0.0
    x, y = s.mean(), g.mean()
    denom = n - 1 if n > 1 else 1
    sx = ((s - x) ** 2).sum() / denom
    sy = ((g - y) ** 2).sum() / denom
    sxy = ((s - x) * (g - y)).sum() / denom
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    return 1.0 if beta == 0 else 0.0


def gt_centroid(g: np.ndarray) -> tuple[int, int]:
    """Split point (row, col): rounded GT centroid plus one, so the centroid falls in the top-left block."""
    rows, cols = np.nonzero(g > 0.5)
    return int(np.round(rows.mean())) + 1, int(np.round(cols.mean())) + 1


def s_region(s: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    cy, cx = gt_centroid(g)
    area = h * w
    blocks = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    score = 0.0
    for rows, cols in blocks:
        bs, bg = s[rows, cols], g[rows, cols]
        if bs.size:
            score += bs.size / area * _block_ssim(bs, bg)
    return float(score)


def s_measure(s, g, alpha: float = ALPHA) -> float:
    s, g = _pair(s, g)
    y = g.mean()
    if y == 0:
        return float(1.0 - s.mean())
    if y == 1:
        return float(s.mean())
    return float(max(0.0, alpha * s_object(s, g) + (1 - alpha) * s_region(s, g)))


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricsReport:
    mae: float
    max_f: float
    max_f_threshold: int
    max_e: float
    s_m: float
    precision: np.ndarray
    recall: np.ndarray
    f_curve: np.ndarray
    e_curve: np.ndarray
    count: int
    names: list[str] = field(default_factory=list)

    def to_dict(self, curves: bool = True) -> dict:
        d = {
            "count": self.count,
            "mae": self.mae,
            "max_f": self.max_f,
            "max_f_threshold": self.max_f_threshold,
            "max_e": self.max_e,
            "s_measure": self.s_m,
        }
        if curves:
            d["precision"] = self.precision.tolist()
            d["recall"] = self.recall.tolist()
            d["f_curve"] = self.f_curve.tolist()
            d["e_curve"] = self.e_curve.tolist()
        return d

    def to_json(self, curves: bool = True) -> str:
        return json.dumps(self.to_dict(curves), indent=2)

    def curves_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["threshold", "precision", "recall", "f"])
        for t in range(N_THRESHOLDS):
            writer.writerow([t, repr(float(self.precision[t])), repr(float(self.recall[t])), repr(float(self.f_curve[t]))])
        return buf.getvalue()


def evaluate_pairs(pairs, names=None) -> MetricsReport:
    """Per-image metrics averaged over the dataset.

    Precision and recall curves are averaged pointwise over images and the F
    curve is formed from those averages; the E curve is the pointwise mean.
    """
    pairs = list(pairs)
    if not pairs:
        raise DatasetError("cannot evaluate an empty dataset")
    maes, sms = [], []
    p_sum, r_sum, e_sum = (np.zeros(N_THRESHOLDS) for _ in range(3))
    for s, g in pairs:
        s, g = _pair(s, g)
        maes.append(mae(s, g))
        sms.append(s_measure(s, g))
        p, r, _ = pr_f_curves(s, g)
        p_sum += p
        r_sum += r
        e_sum += e_curve(s, g)
    n = len(pairs)
    precision, recall, e_mean = p_sum / n, r_sum / n, e_sum / n
    f_curve = f_beta(precision, recall)
    best = int(np.argmax(f_curve))
    return MetricsReport(
        mae=float(np.mean(maes)),
        max_f=float(f_curve[best]),
        max_f_threshold=best,
        max_e=float(e_mean.max()),
        s_m=float(np.mean(sms)),
        precision=precision,
        recall=recall,
        f_curve=f_curve,
        e_curve=e_mean,
        count=n,
        names=list(names) if names is not None else [],
    )


def evaluate_dataset(pred_dir, gt_dir) -> MetricsReport:
    """Evaluate same-stem PGM/PPM predictions against binary GT masks, in lexicographic order."""
    from .dataio import IMAGE_SUFFIXES, load_image

    def listing(d):
        d = Path(d)
        if not d.is_dir():
            raise DatasetError(f"{d} is not a directory")
        return {p.stem: p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}

    preds, gts = listing(pred_dir), listing(gt_dir)
    only_pred = sorted(preds.keys() - gts.keys())
    only_gt = sorted(gts.keys() - preds.keys())
    if only_pred or only_gt:
        raise DatasetError(
            f"unmatched files: predictions without GT {only_pred}, GT without predictions {only_gt}"
        )
    if not preds:
        raise DatasetError(f"no images in {pred_dir}")
    names = sorted(preds)
    pairs = []
    for name in names:
        pred = load_image(preds[name]).pixels
        gt = load_image(gts[name]).pixels
        if gt.shape[0] != 1 or not np.all((gt == 0) | (gt == 1)):
            raise DatasetError(f"{gts[name]}: ground truth must be a binary single-channel mask")
        if pred.shape[0] != 1:
            raise DatasetError(f"{preds[name]}: prediction must be single-channel")
        if pred.shape != gt.shape:
            raise DatasetError(f"{name}: prediction {pred.shape[1:]} and GT {gt.shape[1:]} differ in size")
        pairs.append((pred[0], gt[0]))
    return evaluate_pairs(pairs, names)
