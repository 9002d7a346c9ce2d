"""Stage-one alignment objectives.

An event encoder is pulled toward a frozen image encoder with three terms:
a row-wise cosine alignment loss, an in-batch InfoNCE contrast against the
image embeddings (computed behind a small projection head), and a
preservation loss that keeps the event encoder's behavior on image inputs
close to the frozen features. Image embeddings are gradient-stopped in all
three terms.

All losses accept numpy arrays or graph Tensors and return a scalar graph
Tensor, so they can be evaluated directly (`.value`) or differentiated via
`autodiff.evaluate_with_grad`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class AlignWeights:
    """Loss weights and temperature for the total alignment objective.

    Training configs require strictly positive weights; zeros are accepted
    here so that individual terms can be switched off when probing the
    objective.
    """

    lambda_cos: float = 1.0
    lambda_nce: float = 1.0
    mu: float = 1.0
    tau: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}")
        for name in ("lambda_cos", "lambda_nce", "mu"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    def require_strict(self) -> None:
        for name in ("lambda_cos", "lambda_nce", "mu"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class AlignBatch:
    """One alignment batch: event embeddings, frozen image embeddings, and
    event-encoder outputs on the image inputs (for the preservation term)."""

    z_e: np.ndarray
    z_i: np.ndarray
    z_e_on_image: np.ndarray

    def __post_init__(self):
        shapes = {self.z_e.shape, self.z_i.shape, self.z_e_on_image.shape}
        if len(shapes) != 1 or self.z_e.ndim != 2:
            raise ValidationError(
                f"batch fields must share one N x D shape, got "
                f"{self.z_e.shape}, {self.z_i.shape}, {self.z_e_on_image.shape}"
            )


@dataclass
class ProjectionHead:
    """Two affine maps with a GELU between, used only inside the InfoNCE term."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, dim: int, hidden: int, seed: int = 0) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(scale=1.0 / np.sqrt(dim), size=(dim, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, dim)),
            b2=np.zeros(dim),
        )

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def apply(self, x, params=None):
        """Run the head. `params` optionally substitutes (w1, b1, w2, b2) graph
        Tensors so the head itself can be trained."""
        w1, b1, w2, b2 = params if params is not None else (
            self.w1, self.b1, self.w2, self.b2)
        h = ad.add(ad.matmul(ad.as_tensor(x), ad.as_tensor(w1)), ad.as_tensor(b1))
        return ad.add(ad.matmul(ad.gelu(h), ad.as_tensor(w2)), ad.as_tensor(b2))


def _check_pair(z_e, z_i, forbid_zero_rows: bool) -> None:
    a = z_e.data if isinstance(z_e, ad.Tensor) else np.asarray(z_e)
    b = z_i.data if isinstance(z_i, ad.Tensor) else np.asarray(z_i)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValidationError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    if forbid_zero_rows:
        for name, m in (("z_e", a), ("z_i", b)):
            norms = np.sqrt((m * m).sum(axis=1))
            if (norms == 0.0).any():
                raise ValidationError(
                    f"{name} row {int(np.argmax(norms == 0.0))} is zero; "
                    "cosine similarity is singular"
                )


def cosine_align_loss(z_e, z_i) -> ad.Tensor:
    """Mean over the batch of 1 - cos(z_e_n, z_i_n); image side is
    gradient-stopped. Range [0, 2]."""
    _check_pair(z_e, z_i, forbid_zero_rows=True)
    zi = ad.stop_gradient(ad.as_tensor(z_i))
    cos = ad.cosine_rows(ad.as_tensor(z_e), zi)
    return ad.mean_(ad.sub(1.0, cos))


def info_nce(
    z_e,
    z_i,
    tau: float = DEFAULT_TEMPERATURE,
    head: "ProjectionHead | Callable | None" = None,
) -> ad.Tensor:
    """In-batch InfoNCE with image embeddings as the only negatives.

    Both streams go through the projection head (when given) and are
    l2-normalized; row n of the event stream is contrasted against all image
    rows at temperature tau, with the matching image row as the positive.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    _check_pair(z_e, z_i, forbid_zero_rows=False)
    ze = ad.as_tensor(z_e)
    zi = ad.stop_gradient(ad.as_tensor(z_i))
    if head is not None:
        project = head.apply if isinstance(head, ProjectionHead) else head
        ze = project(ze)
        zi = project(zi)
    ze_n = ad.l2_normalize_rows(ze)
    zi_n = ad.l2_normalize_rows(zi)
    logits = ad.div(ad.matmul(ze_n, ad.transpose(zi_n)), tau)
    n = ze_n.shape[0]
    eye = np.eye(n)
    log_probs = ad.row_log_softmax(logits)
    return ad.neg(ad.mean_(ad.sum_(ad.mul(log_probs, eye), axis=1)))


def preservation_loss(z_e_on_image, z_i, mu: float = 1.0) -> ad.Tensor:
    """mu * mean(1 - cos(z_e_on_image, z_i)): keeps the event encoder's
    response to image inputs anchored to the frozen image features."""
    _check_pair(z_e_on_image, z_i, forbid_zero_rows=True)
    zi = ad.stop_gradient(ad.as_tensor(z_i))
    cos = ad.cosine_rows(ad.as_tensor(z_e_on_image), zi)
    return ad.mul(mu, ad.mean_(ad.sub(1.0, cos)))


def total_alignment_loss(
    batch: AlignBatch | None = None,
    weights: AlignWeights = AlignWeights(),
    head: "ProjectionHead | Callable | None" = None,
    *,
    z_e=None,
    z_i=None,
    z_e_on_image=None,
) -> ad.Tensor:
    """Weighted sum of cosine alignment, InfoNCE and preservation terms.

    Either pass an AlignBatch or the three embedding blocks individually
    (graph Tensors allowed, which is how the training loop differentiates
    through its encoder).
    """
    if batch is not None:
        z_e, z_i, z_e_on_image = batch.z_e, batch.z_i, batch.z_e_on_image
    if z_e is None or z_i is None or z_e_on_image is None:
        raise ValidationError("total_alignment_loss needs z_e, z_i and z_e_on_image")
    total = ad.mul(weights.lambda_cos, cosine_align_loss(z_e, z_i))
    if weights.lambda_nce != 0.0:
        total = ad.add(
            total, ad.mul(weights.lambda_nce, info_nce(z_e, z_i, weights.tau, head))
        )
    if weights.mu != 0.0:
        total = ad.add(total, preservation_loss(z_e_on_image, z_i, weights.mu))
    return total
