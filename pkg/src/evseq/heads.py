"""Downstream task heads and losses.

Segmentation: a linear patch-wise decoder maps each of the L encoder tokens
to C*P^2 values and rearranges them into a dense C x H x W logit map; the
loss is cross-entropy plus soft Dice with equal weights.

Depth: predictions are normalized log-depth in [0, 1], denormalized through
a fixed (d_min, d_max) range; supervision combines the scale-invariant log
RMSE and a multi-scale log-gradient matching term, both restricted to a
binary validity mask so invalid pixels carry exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

DICE_SMOOTHING = 1.0
SILOG_LAMBDA = 0.85
DEFAULT_SCALES = (1, 2, 4)
DEFAULT_DEPTH_WEIGHTS = (1.0, 0.25)
MASKED_MEAN_EPS = 1e-8


# ---------------------------------------------------------------------------
# Linear patch-wise segmentation decoding
# ---------------------------------------------------------------------------


@dataclass
class PatchDecoder:
    """Shared linear map from D-dim tokens to C*P^2 per-patch outputs."""

    weight: np.ndarray  # D x (C * P^2)
    patch_size: int
    classes: int

    def __post_init__(self):
        expected = self.classes * self.patch_size**2
        if self.weight.ndim != 2 or self.weight.shape[1] != expected:
            raise ValidationError(
                f"decoder weight must be D x {expected}, got {self.weight.shape}"
            )

    @classmethod
    def init(cls, dim: int, patch_size: int, classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        w = rng.normal(scale=1.0 / np.sqrt(dim), size=(dim, classes * patch_size**2))
        return cls(weight=w, patch_size=patch_size, classes=classes)


def linear_patch_decode(tokens, dec: PatchDecoder, height: int, width: int,
                        weight=None) -> ad.Tensor:
    """Project tokens through the decoder weight and rearrange each token's
    C*P^2 outputs into its P x P cell of a C x H x W logit map.

    `weight` optionally substitutes a graph Tensor for the stored weight so
    the decoder can be trained.
    """
    p, c = dec.patch_size, dec.classes
    if height % p or width % p:
        raise ValidationError(f"({height}, {width}) not divisible by patch {p}")
    hp, wp = height // p, width // p
    t = ad.as_tensor(tokens)
    if t.data.ndim != 2 or t.data.shape[0] != hp * wp:
        raise ValidationError(
            f"expected {hp * wp} tokens for a {height}x{width} grid, "
            f"got shape {t.data.shape}"
        )
    w = ad.as_tensor(weight if weight is not None else dec.weight)
    flat = ad.matmul(t, w)  # L x (C*P^2)
    grid = ad.reshape(flat, (hp, wp, c, p, p))
    arranged = ad.transpose(grid, (2, 0, 3, 1, 4))  # C, Hp, P, Wp, P
    return ad.reshape(arranged, (c, height, width))


def patch_rearrange_inverse(logits: np.ndarray, patch_size: int) -> np.ndarray:
    """Undo the spatial rearrangement: C x H x W back to L x (C*P^2)."""
    c, h, w = logits.shape
    p = patch_size
    hp, wp = h // p, w // p
    grid = logits.reshape(c, hp, p, wp, p).transpose(1, 3, 0, 2, 4)
    return grid.reshape(hp * wp, c * p * p)


def decode_inverse(logits: np.ndarray, dec: PatchDecoder) -> np.ndarray:
    """Recover tokens from logits; requires the decoder weight to be an
    invertible square map (D == C*P^2)."""
    if dec.weight.shape[0] != dec.weight.shape[1]:
        raise ValidationError("decode_inverse needs a square decoder weight")
    flat = patch_rearrange_inverse(np.asarray(logits), dec.patch_size)
    return flat @ np.linalg.inv(dec.weight)


def _class_rows(logits) -> tuple[ad.Tensor, int, int, int]:
    """Flatten C x H x W logits into (H*W) x C rows."""
    t = ad.as_tensor(logits)
    if t.data.ndim != 3:
        raise ValidationError(f"logits must be C x H x W, got {t.data.shape}")
    c, h, w = t.data.shape
    rows = ad.reshape(ad.transpose(t, (1, 2, 0)), (h * w, c))
    return rows, c, h, w


def _label_onehot(labels: np.ndarray, c: int, ignore_index: int | None):
    labels = np.asarray(labels)
    valid = np.ones(labels.shape, dtype=bool)
    if ignore_index is not None:
        valid = labels != ignore_index
    if labels[valid].size and (labels[valid].min() < 0 or labels[valid].max() >= c):
        raise ValidationError(
            f"labels must lie in [0, {c}), got range "
            f"[{labels[valid].min()}, {labels[valid].max()}]"
        )
    flat = labels.reshape(-1)
    vflat = valid.reshape(-1)
    onehot = np.zeros((flat.size, c))
    onehot[np.arange(flat.size)[vflat], flat[vflat]] = 1.0
    return onehot, vflat


def cross_entropy_loss(logits, labels, ignore_index: int | None = None) -> ad.Tensor:
    """Pixel-mean cross-entropy over C x H x W logits and integer labels."""
    rows, c, h, w = _class_rows(logits)
    if np.asarray(labels).shape != (h, w):
        raise ValidationError(f"labels must be {h}x{w}")
    onehot, valid = _label_onehot(labels, c, ignore_index)
    log_probs = ad.row_log_softmax(rows)
    picked = ad.sum_(ad.mul(log_probs, onehot), axis=1)
    count = float(valid.sum())
    if count == 0:
        return ad.mul(0.0, ad.sum_(picked))
    return ad.neg(ad.div(ad.sum_(picked), count))


def dice_loss(logits, labels, ignore_index: int | None = None) -> ad.Tensor:
    """Soft Dice from softmax probabilities, averaged over classes."""
    rows, c, h, w = _class_rows(logits)
    onehot, valid = _label_onehot(labels, c, ignore_index)
    probs = ad.row_softmax(rows)
    if ignore_index is not None:
        probs = ad.mul(probs, valid.astype(np.float64)[:, None])
    inter = ad.sum_(ad.mul(probs, onehot), axis=0)  # per class
    sums = ad.add(ad.sum_(probs, axis=0), np.sum(onehot, axis=0))
    per_class = ad.sub(
        1.0,
        ad.div(ad.add(ad.mul(2.0, inter), DICE_SMOOTHING),
               ad.add(sums, DICE_SMOOTHING)),
    )
    return ad.mean_(per_class)


def seg_loss(logits, labels, ignore_index: int | None = None) -> ad.Tensor:
    """0.5 * cross-entropy + 0.5 * soft Dice."""
    return ad.add(
        ad.mul(0.5, cross_entropy_loss(logits, labels, ignore_index)),
        ad.mul(0.5, dice_loss(logits, labels, ignore_index)),
    )


# ---------------------------------------------------------------------------
# Depth stack
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DepthRange:
    """Fixed metric depth range mapping normalized log-depth to meters."""

    d_min: float
    d_max: float

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValidationError(
                f"need 0 < d_min < d_max, got ({self.d_min}, {self.d_max})"
            )

    @property
    def log_min(self) -> float:
        return float(np.log(self.d_min))

    @property
    def log_max(self) -> float:
        return float(np.log(self.d_max))

    @property
    def delta(self) -> float:
        return self.log_max - self.log_min


def denorm_log_depth(y_norm, rng: DepthRange) -> ad.Tensor:
    """Map normalized log-depth in [0, 1] to metric depth exp(y * delta + log d_min).

    Out-of-range inputs are clamped before exponentiation (prediction heads
    end in a sigmoid, so this is a guard, not a code path that training
    should rely on). Endpoints are pinned to d_min/d_max bitwise, since
    exp(log(d)) can miss d by an ulp.
    """
    y = ad.clip01(ad.as_tensor(y_norm))
    raw = ad.exp(ad.add(ad.mul(y, rng.delta), rng.log_min))
    data = raw.data.copy()
    data[y.data == 0.0] = rng.d_min
    data[y.data == 1.0] = rng.d_max
    return ad.Tensor(data, (raw,), (lambda g: g,))


def normalize_log_depth(depth: np.ndarray, rng: DepthRange) -> np.ndarray:
    """Inverse of denorm_log_depth on plain arrays."""
    d = np.asarray(depth, dtype=np.float64)
    if (d <= 0).any():
        raise ValidationError("depth must be positive to normalize")
    return (np.log(d) - rng.log_min) / rng.delta


def masked_mean(x, mask, epsilon: float = MASKED_MEAN_EPS) -> ad.Tensor:
    """sum(mask * x) / (sum(mask) + epsilon)."""
    m = np.asarray(mask, dtype=np.float64)
    xv = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    if xv.shape != m.shape:
        raise ValidationError(f"shape mismatch: {xv.shape} vs mask {m.shape}")
    return ad.masked_mean(x, m, eps=epsilon)


@dataclass(frozen=True)
class DepthSupervision:
    """Ground truth, validity mask and loss settings for the depth objective."""

    depth_gt: np.ndarray
    mask: np.ndarray
    scales: tuple[int, ...] = DEFAULT_SCALES
    lam: float = SILOG_LAMBDA
    w_silog: float = DEFAULT_DEPTH_WEIGHTS[0]
    w_ms_grad: float = DEFAULT_DEPTH_WEIGHTS[1]
    eps: float = MASKED_MEAN_EPS

    def __post_init__(self):
        m = np.asarray(self.mask)
        if not np.isin(m, (0, 1)).all():
            raise ValidationError("mask must be binary")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.w_silog < 0 or self.w_ms_grad < 0:
            raise ValidationError("loss weights must be non-negative")
        if not self.scales:
            raise ValidationError("scales must be non-empty")


def _check_depth_inputs(d_pred, d_gt, mask) -> tuple[np.ndarray, np.ndarray]:
    pv = d_pred.data if isinstance(d_pred, ad.Tensor) else np.asarray(d_pred)
    gv = np.asarray(d_gt, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if pv.shape != gv.shape or pv.shape != m.shape:
        raise ValidationError(
            f"depth shapes differ: pred {pv.shape}, gt {gv.shape}, mask {m.shape}"
        )
    on = m > 0
    if (pv[on] <= 0).any() or (gv[on] <= 0).any():
        raise ValidationError("non-positive depth on a valid pixel")
    return gv, m


def _mask_safe(x, mask_bool: np.ndarray) -> ad.Tensor:
    """Replace invalid pixels by 1.0 so logs stay finite; the constant branch
    carries no gradient, keeping masked-out pixels at exactly zero gradient."""
    return ad.where_mask(mask_bool, ad.as_tensor(x), 1.0)


def silog_loss(d_pred, d_gt, mask, lam: float = SILOG_LAMBDA,
               eps: float = MASKED_MEAN_EPS) -> ad.Tensor:
    """Scale-invariant log RMSE: sqrt(<y^2>_M - lam * <y>_M^2) with
    y = log(pred) - log(gt) over valid pixels."""
    gv, m = _check_depth_inputs(d_pred, d_gt, mask)
    on = m > 0
    y = ad.sub(ad.log(_mask_safe(d_pred, on)), np.log(np.where(on, gv, 1.0)))
    mean_sq = ad.masked_mean(ad.mul(y, y), m, eps=eps)
    mean = ad.masked_mean(y, m, eps=eps)
    return ad.sqrt(ad.sub(mean_sq, ad.mul(lam, ad.mul(mean, mean))))


def _avg_pool(x, s: int, hs: int, ws: int) -> ad.Tensor:
    """s x s average pooling of a graph tensor, truncating remainder rows/cols."""
    t = ad.as_tensor(x)
    if s == 1:
        return t
    cropped = ad.narrow(ad.narrow(t, 0, 0, hs * s), 1, 0, ws * s)
    blocks = ad.reshape(cropped, (hs, s, ws, s))
    return ad.mean_(ad.mean_(blocks, axis=3), axis=1)


def _avg_pool_np(x: np.ndarray, s: int, hs: int, ws: int) -> np.ndarray:
    if s == 1:
        return x[:hs, :ws]
    return x[: hs * s, : ws * s].reshape(hs, s, ws, s).mean(axis=(1, 3))


def ms_grad_loss(d_pred, d_gt, mask, scales: tuple[int, ...] = DEFAULT_SCALES,
                 eps: float = MASKED_MEAN_EPS) -> ad.Tensor:
    """Multi-scale log-depth gradient matching.

    Per scale: average-pool depth and mask, keep blocks with pooled mask
    > 0.5, take forward-difference log-gradient residuals in x and y, and
    accumulate their masked mean absolute errors; the result is the mean
    over scales.
    """
    gv, m = _check_depth_inputs(d_pred, d_gt, mask)
    if not scales:
        raise ValidationError("scales must be non-empty")
    h, w = gv.shape
    on = m > 0
    pred_safe = _mask_safe(d_pred, on)
    gt_safe = np.where(on, gv, 1.0)
    total = None
    for s in scales:
        if s < 1 or s > h or s > w:
            raise ValidationError(f"scale {s} larger than {h}x{w} grid")
        hs, ws = h // s, w // s
        pooled_pred = _avg_pool(pred_safe, s, hs, ws)
        pooled_gt = _avg_pool_np(gt_safe, s, hs, ws)
        pooled_mask = _avg_pool_np(m, s, hs, ws) > 0.5
        # Pooled values at excluded blocks may mix invalid placeholders;
        # they never enter the loss but their logs must stay finite.
        log_pred = ad.log(ad.where_mask(pooled_mask, pooled_pred, 1.0))
        log_gt = np.log(np.where(pooled_mask, pooled_gt, 1.0))
        diff = ad.sub(log_pred, log_gt)
        gx = ad.sub(ad.narrow(diff, 1, 1, ws - 1), ad.narrow(diff, 1, 0, ws - 1))
        gy = ad.sub(ad.narrow(diff, 0, 1, hs - 1), ad.narrow(diff, 0, 0, hs - 1))
        mx = (pooled_mask[:, 1:] & pooled_mask[:, :-1]).astype(np.float64)
        my = (pooled_mask[1:, :] & pooled_mask[:-1, :]).astype(np.float64)
        e_x = ad.masked_mean(ad.abs_(gx), mx, eps=eps)
        e_y = ad.masked_mean(ad.abs_(gy), my, eps=eps)
        term = ad.add(e_x, e_y)
        total = term if total is None else ad.add(total, term)
    return ad.div(total, float(len(scales)))


def depth_total(d_pred, sup: DepthSupervision) -> ad.Tensor:
    """w_silog * silog + w_ms_grad * multi-scale gradient loss."""
    out = ad.mul(
        sup.w_silog, silog_loss(d_pred, sup.depth_gt, sup.mask, sup.lam, sup.eps)
    )
    if sup.w_ms_grad != 0.0:
        out = ad.add(
            out,
            ad.mul(
                sup.w_ms_grad,
                ms_grad_loss(d_pred, sup.depth_gt, sup.mask, sup.scales, sup.eps),
            ),
        )
    return out
