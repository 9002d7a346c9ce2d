"""Multimodal token sequences: composition with positional/modality encodings,
event-image interleaving, dense next-step targets, and the pooling aggregator
used in the token-compression ablation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

MODALITY_EVENT = 0
MODALITY_IMAGE = 1


@dataclass(frozen=True)
class TokenSequence:
    """K ordered tokens with per-token modality labels and positions."""

    tokens: np.ndarray  # K x D float64
    modalities: np.ndarray  # K ints in {0, 1}
    positions: np.ndarray = field(default=None)  # K ints, strictly increasing from 0

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        mods = np.asarray(self.modalities, dtype=np.int64)
        k = tokens.shape[0]
        positions = (
            np.arange(k, dtype=np.int64)
            if self.positions is None
            else np.asarray(self.positions, dtype=np.int64)
        )
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "positions", positions)
        if tokens.ndim != 2:
            raise ValidationError(f"tokens must be K x D, got {tokens.shape}")
        if mods.shape != (k,) or positions.shape != (k,):
            raise ValidationError("tokens, modalities and positions must share length K")
        if not np.isin(mods, (MODALITY_EVENT, MODALITY_IMAGE)).all():
            raise ValidationError("modalities must be 0 (event) or 1 (image)")
        if k and (positions[0] != 0 or (np.diff(positions) <= 0).any()):
            raise ValidationError("positions must increase strictly from 0")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class EncodingTables:
    """Learned positional (max_len x D) and modality (2 x D) tables."""

    positional: np.ndarray
    modality: np.ndarray

    def __post_init__(self):
        if self.positional.ndim != 2 or self.modality.shape != (
            2,
            self.positional.shape[1],
        ):
            raise ValidationError(
                f"table shapes incompatible: positional {self.positional.shape}, "
                f"modality {self.modality.shape}"
            )

    @property
    def max_len(self) -> int:
        return self.positional.shape[0]

    @classmethod
    def init(cls, max_len: int, dim: int, seed: int = 0) -> "EncodingTables":
        rng = np.random.default_rng(seed)
        return cls(
            positional=rng.normal(size=(max_len, dim)),
            modality=rng.normal(size=(2, dim)),
        )


@dataclass(frozen=True)
class ARWindow:
    """One autoregressive training window: inputs and one-step-shifted targets."""

    start: int
    length: int
    inputs: np.ndarray  # w x D
    targets: np.ndarray  # w x D, targets[j] follows inputs[j] in the sequence
    input_modalities: np.ndarray
    input_positions: np.ndarray


def compose_tokens(seq: TokenSequence, enc: EncodingTables) -> np.ndarray:
    """X_k = token_k + positional[position_k] + modality[modality_k]."""
    if len(seq) > enc.max_len:
        raise ValidationError(
            f"sequence length {len(seq)} exceeds positional capacity {enc.max_len}"
        )
    if seq.dim != enc.positional.shape[1]:
        raise ValidationError("token dimension does not match encoding tables")
    return seq.tokens + enc.positional[seq.positions] + enc.modality[seq.modalities]


def compose_graph(tokens, positions, modalities, pos_table, mod_table) -> ad.Tensor:
    """Graph-mode composition so the tables can be trained; semantics match
    compose_tokens exactly."""
    pos = np.asarray(positions, dtype=np.int64)
    mods = np.asarray(modalities, dtype=np.int64)
    table = pos_table.data if isinstance(pos_table, ad.Tensor) else pos_table
    if pos.size and int(pos.max()) >= table.shape[0]:
        raise ValidationError(
            f"position {int(pos.max())} exceeds positional capacity {table.shape[0]}"
        )
    return ad.add(
        ad.add(ad.as_tensor(tokens), ad.gather_rows(ad.as_tensor(pos_table), pos)),
        ad.gather_rows(ad.as_tensor(mod_table), mods),
    )


def interleave(
    event_feats: np.ndarray, image_feats: np.ndarray, event_first: bool = True
) -> TokenSequence:
    """Alternate paired event/image embeddings into one 2T-token sequence."""
    ev = np.asarray(event_feats, dtype=np.float64)
    im = np.asarray(image_feats, dtype=np.float64)
    if ev.shape != im.shape or ev.ndim != 2:
        raise ValidationError(
            f"paired streams must share a T x D shape, got {ev.shape} and {im.shape}"
        )
    t, d = ev.shape
    tokens = np.empty((2 * t, d), dtype=np.float64)
    mods = np.empty(2 * t, dtype=np.int64)
    first, second = (ev, im) if event_first else (im, ev)
    mfirst, msecond = (
        (MODALITY_EVENT, MODALITY_IMAGE) if event_first else (MODALITY_IMAGE, MODALITY_EVENT)
    )
    tokens[0::2] = first
    tokens[1::2] = second
    mods[0::2] = mfirst
    mods[1::2] = msecond
    return TokenSequence(tokens=tokens, modalities=mods)


def deinterleave(seq: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    """Split an interleaved sequence back into (event_feats, image_feats)."""
    ev = seq.tokens[seq.modalities == MODALITY_EVENT]
    im = seq.tokens[seq.modalities == MODALITY_IMAGE]
    return ev, im


def dense_targets(seq: TokenSequence, s: int, w: int) -> ARWindow:
    """Window [s, s+w) as inputs with the next token of each position as its
    target, so every prefix supervises the prediction of its successor."""
    k = len(seq)
    if w < 1:
        raise ValidationError(f"window length must be >= 1, got {w}")
    if s < 0 or s + w + 1 > k:
        raise ValidationError(
            f"window start={s} length={w} does not fit sequence of length {k}"
        )
    return ARWindow(
        start=s,
        length=w,
        inputs=seq.tokens[s : s + w],
        targets=seq.tokens[s + 1 : s + w + 1],
        input_modalities=seq.modalities[s : s + w],
        input_positions=seq.positions[s : s + w],
    )


def aggregate_tokens(
    grid: np.ndarray,
    temporal_pool: int,
    spatial_pool: int,
    modality: int = MODALITY_EVENT,
) -> TokenSequence:
    """Pool a T x Q x D token grid independently along the temporal and the
    spatial axis and concatenate the two pooled sets.

    With both factors 1 this degenerates to two unpooled copies (T*Q + T*Q
    tokens); any factor > 1 strictly shrinks the output below that baseline.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValidationError(f"expected a T x Q x D grid, got shape {grid.shape}")
    t, q, d = grid.shape
    if temporal_pool < 1 or spatial_pool < 1:
        raise ValidationError("pool factors must be >= 1")
    if t % temporal_pool or q % spatial_pool:
        raise ValidationError(
            f"pool factors ({temporal_pool}, {spatial_pool}) must divide (T={t}, Q={q})"
        )
    temporal = grid.reshape(t // temporal_pool, temporal_pool, q, d).mean(axis=1)
    spatial = grid.reshape(t, q // spatial_pool, spatial_pool, d).mean(axis=2)
    tokens = np.concatenate([temporal.reshape(-1, d), spatial.reshape(-1, d)], axis=0)
    mods = np.full(tokens.shape[0], modality, dtype=np.int64)
    return TokenSequence(tokens=tokens, modalities=mods)


# ---------------------------------------------------------------------------
# Serialization: little-endian header (u32 K, u32 D, u32 max_len), K*D float64
# row-major payload, then K modality bytes.
# ---------------------------------------------------------------------------

_SEQ_HEADER = struct.Struct("<III")


def write_token_sequence(
    path: str | Path, seq: TokenSequence, max_len: int | None = None
) -> None:
    k, d = seq.tokens.shape
    max_len = k if max_len is None else max_len
    if k > max_len:
        raise ValidationError(f"sequence length {k} exceeds declared max_len {max_len}")
    with open(path, "wb") as fh:
        fh.write(_SEQ_HEADER.pack(k, d, max_len))
        fh.write(seq.tokens.astype("<f8").tobytes())
        fh.write(seq.modalities.astype(np.uint8).tobytes())


def read_token_sequence(path: str | Path) -> tuple[TokenSequence, int]:
    """Read a serialized sequence; returns (sequence, max_len)."""
    raw = Path(path).read_bytes()
    if len(raw) < _SEQ_HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    k, d, max_len = _SEQ_HEADER.unpack_from(raw, 0)
    expected = _SEQ_HEADER.size + k * d * 8 + k
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if k > max_len:
        raise ValidationError(f"{path}: K={k} exceeds max_len={max_len}")
    tokens = np.frombuffer(
        raw, dtype="<f8", count=k * d, offset=_SEQ_HEADER.size
    ).reshape(k, d)
    mods = np.frombuffer(raw, dtype=np.uint8, count=k, offset=_SEQ_HEADER.size + k * d * 8)
    return (
        TokenSequence(tokens=tokens.copy(), modalities=mods.astype(np.int64)),
        max_len,
    )
