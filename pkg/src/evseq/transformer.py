"""Desk-scale causal transformer.

Pre-norm blocks with strictly causal scaled dot-product attention; the output
head is an affine map back to the token dimension, because targets are
embeddings and training minimizes a mean squared error over every next-step
prediction in the window. Long-horizon generation slides a causal window,
dropping the oldest tokens once the sequence outgrows it.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import TrainingDiverged, ValidationError
from .optim import AdamW, Schedule
from .sequence import MODALITY_EVENT, MODALITY_IMAGE, TokenSequence, compose_graph, dense_targets

_LN_EPS = 1e-5


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_window: int = 64
    max_len: int = 64  # positional table length
    seed: int = 0

    def __post_init__(self):
        if min(self.layers, self.heads, self.d_model, self.d_ff, self.max_window) < 1:
            raise ValidationError("transformer dimensions must be positive")
        if self.d_model % self.heads:
            raise ValidationError(
                f"d_model={self.d_model} must be divisible by heads={self.heads}"
            )
        if self.max_window > self.max_len:
            raise ValidationError(
                f"max_window={self.max_window} exceeds positional capacity "
                f"{self.max_len}"
            )


@dataclass(frozen=True)
class RolloutSpec:
    context_len: int
    horizon: int
    window: int

    def __post_init__(self):
        if self.context_len < 1:
            raise ValidationError("rollout context must be non-empty")
        if self.horizon < 0 or self.window < 1:
            raise ValidationError("horizon must be >= 0 and window >= 1")
        if self.context_len > self.window:
            raise ValidationError(
                f"context ({self.context_len}) exceeds window ({self.window})"
            )


def _init_params(cfg: TransformerConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.d_ff
    scale = 0.02
    params: dict[str, np.ndarray] = {
        "pos_table": rng.normal(size=(cfg.max_len, d)),
        "mod_table": rng.normal(size=(2, d)),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = rng.normal(scale=scale, size=(d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params[p + name] = np.zeros(d)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "w1"] = rng.normal(scale=scale, size=(d, f))
        params[p + "b1"] = np.zeros(f)
        params[p + "w2"] = rng.normal(scale=scale, size=(f, d))
        params[p + "b2"] = np.zeros(d)
    params["lnf.g"] = np.ones(d)
    params["lnf.b"] = np.zeros(d)
    params["head.w"] = rng.normal(scale=scale, size=(d, d))
    params["head.b"] = np.zeros(d)
    return params


def _layernorm(x, g, b):
    mu = ad.mean_(x, axis=1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.mean_(ad.mul(centered, centered), axis=1, keepdims=True)
    return ad.add(ad.mul(ad.div(centered, ad.sqrt(ad.add(var, _LN_EPS))), g), b)


class CausalLM:
    """Transformer parameters plus the positional/modality encoding tables."""

    def __init__(self, cfg: TransformerConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else _init_params(cfg)
        self.param_names = list(self.params.keys())

    def param_list(self) -> list[np.ndarray]:
        return [self.params[k] for k in self.param_names]

    def _forward_graph(self, x: ad.Tensor, p: dict) -> ad.Tensor:
        cfg = self.cfg
        k = x.shape[0]
        if k > cfg.max_window:
            raise ValidationError(
                f"input length {k} exceeds window capacity {cfg.max_window}"
            )
        dh = cfg.d_model // cfg.heads
        allow = np.tril(np.ones((k, k), dtype=bool))
        h = x
        for i in range(cfg.layers):
            pre = f"layer{i}."
            a = _layernorm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = ad.add(ad.matmul(a, p[pre + "wq"]), p[pre + "bq"])
            kk = ad.add(ad.matmul(a, p[pre + "wk"]), p[pre + "bk"])
            v = ad.add(ad.matmul(a, p[pre + "wv"]), p[pre + "bv"])
            heads = []
            for j in range(cfg.heads):
                qj = ad.narrow(q, 1, j * dh, dh)
                kj = ad.narrow(kk, 1, j * dh, dh)
                vj = ad.narrow(v, 1, j * dh, dh)
                scores = ad.mul(ad.matmul(qj, ad.transpose(kj)), 1.0 / np.sqrt(dh))
                masked = ad.where_mask(allow, scores, -np.inf)
                heads.append(ad.matmul(ad.row_softmax(masked), vj))
            attn = ad.add(ad.matmul(ad.concat(heads, axis=1), p[pre + "wo"]), p[pre + "bo"])
            h = ad.add(h, attn)
            a2 = _layernorm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            hidden = ad.gelu(ad.add(ad.matmul(a2, p[pre + "w1"]), p[pre + "b1"]))
            mlp = ad.add(ad.matmul(hidden, p[pre + "w2"]), p[pre + "b2"])
            h = ad.add(h, mlp)
        hf = _layernorm(h, p["lnf.g"], p["lnf.b"])
        return ad.add(ad.matmul(hf, p["head.w"]), p["head.b"])

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Predict one output per position of already-composed inputs; output
        at position k depends only on inputs 0..k."""
        x = ad.as_tensor(np.asarray(inputs, dtype=np.float64))
        if x.data.ndim != 2 or x.data.shape[1] != self.cfg.d_model:
            raise ValidationError(
                f"inputs must be K x {self.cfg.d_model}, got {x.data.shape}"
            )
        consts = {k: ad.as_tensor(v) for k, v in self.params.items()}
        return self._forward_graph(x, consts).data

    def compose(self, tokens, positions, modalities, p: dict | None = None) -> ad.Tensor:
        params = p if p is not None else {k: ad.as_tensor(v) for k, v in self.params.items()}
        return compose_graph(
            tokens, positions, modalities, params["pos_table"], params["mod_table"]
        )


def pretrain_loss(preds, targets) -> ad.Tensor:
    """(1/w) * sum_j ||pred_j - target_j||^2 over a w x D window."""
    p = ad.as_tensor(preds)
    t = targets.data if isinstance(targets, ad.Tensor) else np.asarray(targets, dtype=np.float64)
    if p.data.shape != t.shape:
        raise ValidationError(f"shape mismatch: preds {p.data.shape} vs targets {t.shape}")
    w = p.data.shape[0]
    diff = ad.sub(p, t)
    return ad.div(ad.sum_(ad.mul(diff, diff)), float(w))


def train(
    sequences: list[TokenSequence],
    cfg: TransformerConfig,
    schedule: Schedule,
    window_seed: int | None = None,
) -> tuple[CausalLM, list[tuple[int, float, float]]]:
    """Dense autoregressive training over randomly-placed windows.

    Each step samples a sequence and a start index, composes the window with
    window-relative positions, and minimizes the dense next-step MSE with
    AdamW under the given warmup/cosine schedule. Returns the trained model
    and the (step, lr, loss) curve; training aborts on a non-finite loss.
    """
    if not sequences:
        raise ValidationError("no training sequences")
    model = CausalLM(cfg)
    names = model.param_names
    opt = AdamW(model.param_list(), weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(cfg.seed if window_seed is None else window_seed)
    curve: list[tuple[int, float, float]] = []
    for step in range(schedule.total_steps):
        seq = sequences[int(rng.integers(len(sequences)))]
        k = len(seq)
        if k < 2:
            raise ValidationError("sequences must have at least 2 tokens")
        w = min(cfg.max_window, k - 1)
        s = int(rng.integers(0, k - w))
        window = dense_targets(seq, s, w)
        rel_positions = np.arange(w, dtype=np.int64)

        def loss_fn(*param_tensors):
            p = dict(zip(names, param_tensors))
            composed = model.compose(
                window.inputs, rel_positions, window.input_modalities, p
            )
            preds = model._forward_graph(composed, p)
            return pretrain_loss(preds, window.targets)

        loss, grads = ad.evaluate_with_grad(loss_fn, model.param_list())
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        lr = schedule.lr_at(step)
        curve.append((step, lr, loss))
        opt.step(model.param_list(), grads, lr)
    return model, curve


def _continue_modality(modalities: np.ndarray, abs_index: int) -> int:
    """Continue the context's interleaving pattern at abs_index."""
    k = modalities.shape[0]
    if k >= 2:
        alternating = (modalities[0::2] == modalities[0]).all() and (
            modalities[1::2] == modalities[1]
        ).all() and modalities[0] != modalities[1]
        if alternating:
            return int(modalities[abs_index % 2])
    return int(modalities[-1])


def rollout(context: TokenSequence, spec: RolloutSpec, model: CausalLM) -> TokenSequence:
    """Autoregressively append `horizon` tokens, sliding the causal window
    once the sequence exceeds it; both modalities are generated, continuing
    the context's interleaving pattern."""
    if len(context) == 0:
        raise ValidationError("rollout context is empty")
    if spec.context_len != len(context):
        raise ValidationError(
            f"spec context_len={spec.context_len} but context has {len(context)} tokens"
        )
    if spec.window > model.cfg.max_window:
        raise ValidationError(
            f"rollout window {spec.window} exceeds model capacity "
            f"{model.cfg.max_window}"
        )
    tokens = [row for row in context.tokens]
    mods = list(int(m) for m in context.modalities)
    for step in range(spec.horizon):
        start = max(0, len(tokens) - spec.window)
        win_tokens = np.stack(tokens[start:])
        win_mods = np.asarray(mods[start:], dtype=np.int64)
        rel_positions = np.arange(win_tokens.shape[0], dtype=np.int64)
        composed = model.compose(win_tokens, rel_positions, win_mods)
        preds = model._forward_graph(
            composed, {k: ad.as_tensor(v) for k, v in model.params.items()}
        )
        tokens.append(preds.data[-1])
        mods.append(_continue_modality(context.modalities, len(mods)))
    return TokenSequence(
        tokens=np.stack(tokens), modalities=np.asarray(mods, dtype=np.int64)
    )


# ---------------------------------------------------------------------------
# Checkpoints: magic, JSON config header, then named shape-tagged float64
# parameter tensors. Loss curves go to CSV as (step, lr, loss).
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"EVCK"


def save_checkpoint(path: str | Path, model: CausalLM) -> None:
    blob = bytearray()
    blob += _CKPT_MAGIC
    cfg_json = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_json))
    blob += cfg_json
    blob += struct.pack("<I", len(model.param_names))
    for name in model.param_names:
        arr = model.params[name]
        nb = name.encode()
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> CausalLM:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    off = 4
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    cfg = TransformerConfig(**json.loads(raw[off : off + cfg_len]))
    off += cfg_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = (
            np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        )
        off += 8 * n
    if off != len(raw):
        raise ValidationError(f"{path}: trailing bytes in checkpoint")
    return CausalLM(cfg, params)


def write_loss_curve(path: str | Path, curve: list[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            writer.writerow([step, repr(lr), repr(loss)])
