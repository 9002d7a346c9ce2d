"""Evaluation metrics: top-k accuracy, confusion-matrix mIoU/mAcc, masked
depth errors, and the three label-aware clustering indices used to quantify
how alignment reshapes feature geometry."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValidationError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ValidationError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @classmethod
    def from_predictions(
        cls, predictions: np.ndarray, truths: np.ndarray, num_classes: int
    ) -> "ConfusionMatrix":
        p = np.asarray(predictions).reshape(-1)
        t = np.asarray(truths).reshape(-1)
        if p.shape != t.shape:
            raise ValidationError("predictions and truths differ in size")
        if p.size and (p.min() < 0 or p.max() >= num_classes or t.min() < 0
                       or t.max() >= num_classes):
            raise ValidationError(f"class ids must lie in [0, {num_classes})")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (t, p), 1)
        return cls(counts=counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValidationError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(counts=self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose true label ranks among the k best scores;
    ties resolve toward the lower class index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ValidationError(
            f"scores must be N x C with N labels, got {scores.shape} and "
            f"{labels.shape}"
        )
    n, c = scores.shape
    if not 1 <= k <= c:
        raise ValidationError(f"k must lie in [1, {c}], got {k}")
    # Stable argsort of -scores keeps ascending class order among ties.
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.sum()) / n


def miou_macc(conf: ConfusionMatrix) -> tuple[float, float]:
    """Class-mean IoU and accuracy over classes present in the ground truth."""
    c = conf.counts.astype(np.float64)
    tp = np.diag(c)
    gt_sizes = c.sum(axis=1)
    pred_sizes = c.sum(axis=0)
    present = gt_sizes > 0
    if not present.any():
        return 0.0, 0.0
    union = gt_sizes + pred_sizes - tp
    iou = tp[present] / union[present]
    acc = tp[present] / gt_sizes[present]
    return float(iou.mean()), float(acc.mean())


def depth_errors(
    d_pred: np.ndarray, d_gt: np.ndarray, mask: np.ndarray
) -> tuple[float, float]:
    """Masked mean absolute error and RMS error, in meters."""
    p = np.asarray(d_pred, dtype=np.float64)
    g = np.asarray(d_gt, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if p.shape != g.shape or p.shape != m.shape:
        raise ValidationError("depth arrays and mask must share a shape")
    if not m.any():
        return 0.0, 0.0
    if (g[m] <= 0).any():
        raise ValidationError("ground-truth depth must be positive on the mask")
    diff = p[m] - g[m]
    abs_err = float(np.abs(diff).mean())
    rms = float(np.sqrt((diff * diff).mean()))
    return abs_err, rms


@dataclass(frozen=True)
class ClusterSet:
    """Labeled points for clustering-quality evaluation."""

    points: np.ndarray  # N x D
    labels: np.ndarray  # N ids, contiguous from 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if pts.ndim != 2 or lab.shape != (pts.shape[0],):
            raise ValidationError(
                f"need N x D points with N labels, got {pts.shape}, {lab.shape}"
            )
        uniq = np.unique(lab)
        if uniq.size < 2:
            raise ValidationError("need at least 2 classes")
        if uniq[0] != 0 or uniq[-1] != uniq.size - 1:
            raise ValidationError("labels must be contiguous from 0")
        if pts.shape[0] <= uniq.size:
            raise ValidationError("need more points than classes")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def silhouette_score(cs: ClusterSet) -> float:
    """Mean of (b - a) / max(a, b) with Euclidean distances; points in
    singleton clusters contribute 0."""
    d = _pairwise_distances(cs.points)
    n = len(cs.labels)
    k = cs.num_classes
    members = [np.flatnonzero(cs.labels == c) for c in range(k)]
    scores = np.zeros(n)
    for i in range(n):
        own = cs.labels[i]
        same = members[own]
        if same.size <= 1:
            scores[i] = 0.0
            continue
        a = d[i, same].sum() / (same.size - 1)
        b = np.inf
        for c in range(k):
            if c == own:
                continue
            b = min(b, d[i, members[c]].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def davies_bouldin_score(cs: ClusterSet) -> float:
    """Mean over clusters of the worst (sigma_i + sigma_j) / centroid-distance
    ratio; two coincident zero-spread clusters contribute 0."""
    k = cs.num_classes
    centroids = np.stack(
        [cs.points[cs.labels == c].mean(axis=0) for c in range(k)]
    )
    sigma = np.array(
        [
            np.linalg.norm(cs.points[cs.labels == c] - centroids[c], axis=1).mean()
            for c in range(k)
        ]
    )
    cd = _pairwise_distances(centroids)
    worst = np.zeros(k)
    for i in range(k):
        ratios = []
        for j in range(k):
            if j == i:
                continue
            s = sigma[i] + sigma[j]
            if cd[i, j] == 0.0:
                ratios.append(0.0 if s == 0.0 else np.inf)
            else:
                ratios.append(s / cd[i, j])
        worst[i] = max(ratios)
    return float(worst.mean())


def calinski_harabasz_score(cs: ClusterSet) -> float:
    """[between-cluster dispersion / (k-1)] / [within-cluster dispersion /
    (N-k)]; zero between-dispersion yields 0."""
    n = len(cs.labels)
    k = cs.num_classes
    mean = cs.points.mean(axis=0)
    between = 0.0
    within = 0.0
    for c in range(k):
        pts = cs.points[cs.labels == c]
        centroid = pts.mean(axis=0)
        between += pts.shape[0] * float(np.sum((centroid - mean) ** 2))
        within += float(np.sum((pts - centroid) ** 2))
    if between == 0.0:
        return 0.0
    if within == 0.0:
        return float(np.inf)
    return float((between / (k - 1)) / (within / (n - k)))


def cluster_metrics(cs: ClusterSet) -> tuple[float, float, float]:
    """(silhouette, davies_bouldin, calinski_harabasz)."""
    return (
        silhouette_score(cs),
        davies_bouldin_score(cs),
        calinski_harabasz_score(cs),
    )


# ---------------------------------------------------------------------------
# Reports: flat "name = value" text, or CSV
# ---------------------------------------------------------------------------


def format_metric_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_report(metrics: dict, path: str | Path, fmt: str = "kv") -> None:
    """Write metrics sorted by name; `fmt` is "kv" (name = value lines) or
    "csv". Output is byte-deterministic for equal inputs."""
    path = Path(path)
    items = sorted(metrics.items())
    if fmt == "kv":
        lines = [f"{k} = {format_metric_value(v)}" for k, v in items]
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for k, v in items:
                writer.writerow([k, format_metric_value(v)])
    else:
        raise ValidationError(f"unknown report format {fmt!r}")


def read_metrics_report(path: str | Path) -> dict:
    """Parse a flat key-value report back into a dict of floats/strings."""
    out: dict = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            out[key] = float(value)
        except ValueError:
            out[key] = value
    return out
