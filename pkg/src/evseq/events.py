"""Event streams, pseudo-frame accumulation, normalization and augmentation.

An event camera reports asynchronous per-pixel brightness changes as
(x, y, t, p) tuples. A temporal window of events is accumulated into two
per-polarity count grids plus a binary activity mask, then clipped at a
percentile and normalized into an H x W x 3 pseudo-frame with channel
order (positive counts, activity mask, negative counts).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_PERCENTILE = 99


@dataclass(frozen=True, slots=True)
class Event:
    """One asynchronous brightness change."""

    x: int
    y: int
    t: int  # timestamp, nanoseconds
    p: int  # polarity, +1 or -1


@dataclass(frozen=True)
class RawCounts:
    """Per-polarity event counts for one temporal window.

    `m_r` counts positive-polarity events, `m_b` negative-polarity events,
    and `mask` marks pixels with at least one event of either polarity.
    """

    m_r: np.ndarray  # H x W, non-negative ints
    m_b: np.ndarray
    mask: np.ndarray  # H x W, {0, 1}
    window: tuple[int, int]  # [t_start, t_end) in nanoseconds

    def __add__(self, other: "RawCounts") -> "RawCounts":
        if self.m_r.shape != other.m_r.shape:
            raise ValidationError("cannot merge counts of different resolutions")
        m_r = self.m_r + other.m_r
        m_b = self.m_b + other.m_b
        return RawCounts(
            m_r=m_r,
            m_b=m_b,
            mask=((m_r + m_b) > 0).astype(np.uint8),
            window=(min(self.window[0], other.window[0]),
                    max(self.window[1], other.window[1])),
        )


@dataclass(frozen=True)
class PseudoFrame:
    """Normalized H x W x 3 accumulation; channels are (r, mask, b)."""

    data: np.ndarray  # float64, values in [0, 1]
    percentile: int

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AugSpec:
    """Deterministic augmentation plan for one pseudo-frame.

    crop is (top, left, height, width, (out_h, out_w)); upscale zooms by the
    given factor and crops back to the original size.
    """

    polarity_swap: bool = False
    hflip: bool = False
    crop: tuple[int, int, int, int, tuple[int, int]] | None = None
    upscale: float | None = None

    def validate(self, height: int, width: int) -> None:
        if self.crop is not None:
            top, left, ch, cw, out_size = self.crop
            if ch <= 0 or cw <= 0:
                raise ValidationError("crop size must be positive")
            if top < 0 or left < 0 or top + ch > height or left + cw > width:
                raise ValidationError(
                    f"crop rectangle {(top, left, ch, cw)} exceeds frame "
                    f"{(height, width)}"
                )
            if len(out_size) != 2 or out_size[0] <= 0 or out_size[1] <= 0:
                raise ValidationError("crop output size must be positive (h, w)")
        if self.upscale is not None and self.upscale < 1.0:
            raise ValidationError("upscale factor must be >= 1")


def event_arrays(events: Sequence[Event]):
    n = len(events)
    xs = np.empty(n, dtype=np.int64)
    ys = np.empty(n, dtype=np.int64)
    ts = np.empty(n, dtype=np.int64)
    ps = np.empty(n, dtype=np.int64)
    for i, e in enumerate(events):
        xs[i] = e.x
        ys[i] = e.y
        ts[i] = e.t
        ps[i] = e.p
    return xs, ys, ts, ps


def accumulate_arrays(
    xs: np.ndarray,
    ys: np.ndarray,
    ts: np.ndarray,
    ps: np.ndarray,
    window: tuple[int, int],
    resolution: tuple[int, int],
) -> RawCounts:
    """Array-based accumulation; see `accumulate` for the contract."""
    t0, t1 = int(window[0]), int(window[1])
    if t1 <= t0:
        raise ValidationError(f"window [{t0}, {t1}) is empty")
    height, width = resolution
    m_r = np.zeros((height, width), dtype=np.int64)
    m_b = np.zeros((height, width), dtype=np.int64)
    if xs.size:
        bad = (xs < 0) | (xs >= width) | (ys < 0) | (ys >= height)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(
                f"event coordinate ({xs[i]}, {ys[i]}) outside resolution "
                f"{width}x{height}"
            )
        if not np.isin(ps, (-1, 1)).all():
            raise ValidationError("event polarity must be +1 or -1")
        sel = (ts >= t0) & (ts < t1)
        pos = sel & (ps == 1)
        negd = sel & (ps == -1)
        np.add.at(m_r, (ys[pos], xs[pos]), 1)
        np.add.at(m_b, (ys[negd], xs[negd]), 1)
    mask = ((m_r + m_b) > 0).astype(np.uint8)
    return RawCounts(m_r=m_r, m_b=m_b, mask=mask, window=(t0, t1))


def accumulate(
    events: Sequence[Event],
    window: tuple[int, int],
    resolution: tuple[int, int],
) -> RawCounts:
    """Count in-window events per pixel and polarity.

    The window is half-open [t_start, t_end) so adjacent windows partition a
    stream. Events outside the window are ignored; events with coordinates
    outside the resolution are rejected.
    """
    if len(events) == 0:
        xs = ys = ts = ps = np.empty(0, dtype=np.int64)
    else:
        xs, ys, ts, ps = event_arrays(events)
    return accumulate_arrays(xs, ys, ts, ps, window, resolution)


def nearest_rank_percentile(values: np.ndarray, n: int) -> float:
    """n-th percentile by the nearest-rank rule over the full multiset."""
    if not 0 < n <= 100:
        raise ValidationError(f"percentile must be in (0, 100], got {n}")
    flat = np.sort(np.asarray(values).ravel())
    rank = -(-n * flat.size // 100)  # ceil(n * N / 100) in integers
    return float(flat[rank - 1])


def normalize(counts: RawCounts, n: int = DEFAULT_PERCENTILE) -> PseudoFrame:
    """Percentile-clip and normalize raw counts into a pseudo-frame.

    The scale is the n-th percentile (nearest rank, zeros included) of all
    pixel values pooled across both count channels; each count channel is
    then min(count, scale) / scale. If the percentile is zero the maximum
    count is used instead; if that is also zero the frame is all zero.
    The mask channel is copied verbatim.
    """
    if not 0 < n <= 100:
        raise ValidationError(f"percentile must be in (0, 100], got {n}")
    pooled = np.concatenate([counts.m_r.ravel(), counts.m_b.ravel()])
    alpha = nearest_rank_percentile(pooled, n)
    if alpha == 0.0:
        alpha = float(pooled.max())
    height, width = counts.m_r.shape
    data = np.zeros((height, width, 3), dtype=np.float64)
    data[:, :, 1] = counts.mask
    if alpha > 0.0:
        data[:, :, 0] = np.minimum(counts.m_r, alpha) / alpha
        data[:, :, 2] = np.minimum(counts.m_b, alpha) / alpha
    return PseudoFrame(data=data, percentile=n)


def _resize_plane(plane: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    """Resample one channel with half-pixel-center coordinates.

    `mode` is "bilinear" (count channels) or "nearest" (the binary mask,
    which must stay exactly 0/1).
    """
    in_h, in_w = plane.shape
    sy = in_h / out_h
    sx = in_w / out_w
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * sy - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * sx - 0.5
    if mode == "nearest":
        yi = np.clip(np.floor(ys + 0.5), 0, in_h - 1).astype(np.int64)
        xi = np.clip(np.floor(xs + 0.5), 0, in_w - 1).astype(np.int64)
        return plane[np.ix_(yi, xi)]
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    p00 = plane[np.ix_(y0, x0)]
    p01 = plane[np.ix_(y0, x1)]
    p10 = plane[np.ix_(y1, x0)]
    p11 = plane[np.ix_(y1, x1)]
    top = p00 * (1.0 - fx) + p01 * fx
    bot = p10 * (1.0 - fx) + p11 * fx
    return top * (1.0 - fy) + bot * fy


def _resize_frame(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    out = np.empty((out_h, out_w, 3), dtype=np.float64)
    out[:, :, 0] = _resize_plane(data[:, :, 0], out_h, out_w, "bilinear")
    out[:, :, 1] = _resize_plane(data[:, :, 1], out_h, out_w, "nearest")
    out[:, :, 2] = _resize_plane(data[:, :, 2], out_h, out_w, "bilinear")
    return out


def augment(frame: PseudoFrame, spec: AugSpec, rng_seed: int = 0) -> PseudoFrame:
    """Apply an augmentation plan: polarity swap, horizontal flip, crop+resize,
    upscale-and-recrop, in that order.

    Everything is deterministic given (spec, rng_seed); the seed only places
    the recrop window of the upscale step.
    """
    spec.validate(frame.height, frame.width)
    data = frame.data
    if spec.polarity_swap:
        data = data[:, :, [2, 1, 0]]
    if spec.hflip:
        data = data[:, ::-1, :]
    if spec.crop is not None:
        top, left, ch, cw, (oh, ow) = spec.crop[0], spec.crop[1], spec.crop[2], \
            spec.crop[3], spec.crop[4]
        region = data[top:top + ch, left:left + cw, :]
        data = _resize_frame(region, oh, ow)
    if spec.upscale is not None and spec.upscale > 1.0:
        h, w = data.shape[:2]
        zh, zw = int(round(h * spec.upscale)), int(round(w * spec.upscale))
        zoomed = _resize_frame(data, zh, zw)
        rng = np.random.default_rng(rng_seed)
        top = int(rng.integers(0, zh - h + 1))
        left = int(rng.integers(0, zw - w + 1))
        data = zoomed[top:top + h, left:left + w, :]
    return PseudoFrame(data=np.clip(data, 0.0, 1.0), percentile=frame.percentile)


def sample_aug_spec(
    rng: np.random.Generator,
    height: int,
    width: int,
    p_polarity_swap: float = 0.5,
    p_hflip: float = 0.5,
    crop_scale: tuple[float, float] = (0.25, 1.0),
    p_upscale: float = 0.1,
    upscale_factor: float = 2.0,
) -> AugSpec:
    """Draw one augmentation plan: polarity swap and horizontal flip are coin
    flips, a random resized crop (area fraction uniform in `crop_scale`) is
    always taken, and an upscale is applied with probability `p_upscale`."""
    swap = bool(rng.random() < p_polarity_swap)
    flip = bool(rng.random() < p_hflip)
    area = float(rng.uniform(crop_scale[0], crop_scale[1]))
    side = float(np.sqrt(area))
    ch = max(1, int(round(height * side)))
    cw = max(1, int(round(width * side)))
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    upscale = upscale_factor if rng.random() < p_upscale else None
    return AugSpec(
        polarity_swap=swap,
        hflip=flip,
        crop=(top, left, ch, cw, (height, width)),
        upscale=upscale,
    )


# ---------------------------------------------------------------------------
# Binary event file format: 16-byte header (magic "EVT1", u16 width,
# u16 height, u64 count), then little-endian 16-byte records
# (u16 x, u16 y, i64 t_ns, i8 p, 3 pad bytes).
# ---------------------------------------------------------------------------

_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sHHQ")
_RECORD_DTYPE = np.dtype(
    {
        "names": ["x", "y", "t", "p"],
        "formats": ["<u2", "<u2", "<i8", "<i1"],
        "offsets": [0, 2, 4, 12],
        "itemsize": 16,
    }
)


def write_event_file(
    path: str | Path, events: Sequence[Event], width: int, height: int
) -> None:
    for e in events:
        if not (0 <= e.x < width and 0 <= e.y < height):
            raise ValidationError(
                f"event coordinate ({e.x}, {e.y}) outside resolution "
                f"{width}x{height}"
            )
        if e.p not in (-1, 1):
            raise ValidationError("event polarity must be +1 or -1")
    rec = np.zeros(len(events), dtype=_RECORD_DTYPE)
    for i, e in enumerate(events):
        rec[i] = (e.x, e.y, e.t, e.p)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, width, height, len(events)))
        fh.write(rec.tobytes())


def read_event_file(path: str | Path) -> tuple[list[Event], int, int]:
    """Read a binary event file, validating magic and coordinate ranges.

    Returns (events, width, height).
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, width, height, count = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + count * _RECORD_DTYPE.itemsize
    if len(raw) != expected:
        raise ValidationError(
            f"{path}: payload length {len(raw)} does not match count {count}"
        )
    rec = np.frombuffer(raw, dtype=_RECORD_DTYPE, count=count, offset=_HEADER.size)
    if count and (int(rec["x"].max()) >= width or int(rec["y"].max()) >= height):
        raise ValidationError(f"{path}: event coordinates outside {width}x{height}")
    events = [
        Event(x=int(r["x"]), y=int(r["y"]), t=int(r["t"]), p=int(r["p"])) for r in rec
    ]
    return events, width, height
