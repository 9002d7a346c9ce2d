"""Deterministic synthetic scenes: moving geometric patterns rendered to
intensity frames, with events produced by per-pixel log-intensity threshold
crossings of the motion, plus class / segmentation / depth labels derived
from the known geometry.

Everything is a pure function of the scene description; the seed only feeds
optional stochastic components, so noise-free scenes are bit-identical
across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .events import Event, write_event_file

NUM_PATTERN_CLASSES = 8

_BG = 0.1  # background intensity; keeps log() finite
_FG = 1.0  # pattern intensity
_PERIOD = 8.0  # stripe/checker period in pixels


@dataclass(frozen=True)
class SynthScene:
    """Description of one moving-pattern scene."""

    seed: int = 0
    height: int = 32
    width: int = 32
    pattern: int = 0  # class id in [0, NUM_PATTERN_CLASSES)
    velocity: tuple[float, float] = (8.0, 3.0)  # pixels / second (vx, vy)
    phase: tuple[float, float] = (0.0, 0.0)  # initial pattern offset in pixels
    duration_s: float = 1.0
    fps: float = 10.0
    substeps: int = 4  # event sampling substeps per frame interval
    threshold: float = 0.2  # log-intensity contrast step per event

    def __post_init__(self):
        if not 0 <= self.pattern < NUM_PATTERN_CLASSES:
            raise ValidationError(
                f"pattern must lie in [0, {NUM_PATTERN_CLASSES}), got {self.pattern}"
            )
        if self.height < 4 or self.width < 4:
            raise ValidationError("scene must be at least 4x4")
        if self.duration_s <= 0 or self.fps <= 0 or self.substeps < 1:
            raise ValidationError("duration, fps and substeps must be positive")
        if self.threshold <= 0:
            raise ValidationError("event threshold must be positive")


@dataclass(frozen=True)
class SynthData:
    """Rendered scene: events plus per-frame images and labels.

    frames[k] is rendered at frame_times_ns[k]; the event window
    [frame_times_ns[k], frame_times_ns[k+1]) pairs with frames[k+1].
    """

    scene: SynthScene
    events: list[Event]
    frame_times_ns: np.ndarray  # T+1 timestamps
    frames: np.ndarray  # (T+1) x H x W intensities in (0, 1]
    seg_labels: np.ndarray  # (T+1) x H x W uint8, 0 background / 1 pattern
    depth: np.ndarray  # (T+1) x H x W meters
    depth_mask: np.ndarray  # (T+1) x H x W uint8 validity

    @property
    def num_windows(self) -> int:
        return len(self.frame_times_ns) - 1

    def window(self, k: int) -> tuple[int, int]:
        return int(self.frame_times_ns[k]), int(self.frame_times_ns[k + 1])


def _foreground(scene: SynthScene, t_s: float) -> np.ndarray:
    """Binary pattern support at time t, from the known geometry."""
    h, w = scene.height, scene.width
    dx = scene.phase[0] + scene.velocity[0] * t_s
    dy = scene.phase[1] + scene.velocity[1] * t_s
    ys, xs = np.mgrid[0:h, 0:w]
    x = xs - dx
    y = ys - dy
    p = scene.pattern
    if p == 0:  # vertical bars
        return np.mod(x, _PERIOD) < _PERIOD / 2
    if p == 1:  # horizontal bars
        return np.mod(y, _PERIOD) < _PERIOD / 2
    if p == 2:  # diagonal stripes
        return np.mod(x + y, _PERIOD) < _PERIOD / 2
    if p == 3:  # checkerboard
        return (np.mod(x, _PERIOD) < _PERIOD / 2) ^ (np.mod(y, _PERIOD) < _PERIOD / 2)
    cx, cy = w / 2.0, h / 2.0
    # Remaining patterns tile with the scene size so motion wraps around.
    u = np.mod(x - cx, w) - w / 2.0
    v = np.mod(y - cy, h) - h / 2.0
    r = min(h, w) / 4.0
    if p == 4:  # filled disk
        return u * u + v * v <= r * r
    if p == 5:  # filled square
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    if p == 6:  # cross
        bar = min(h, w) / 8.0
        return ((np.abs(u) <= bar) & (np.abs(v) <= 2 * r)) | (
            (np.abs(v) <= bar) & (np.abs(u) <= 2 * r)
        )
    # p == 7: concentric rings
    rad = np.sqrt(u * u + v * v)
    return np.mod(rad, _PERIOD) < _PERIOD / 2


def render_frame(scene: SynthScene, t_s: float) -> np.ndarray:
    """Two-level intensity image of the pattern at time t."""
    fg = _foreground(scene, t_s)
    return np.where(fg, _FG, _BG)


def _depth_labels(scene: SynthScene, t_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Depth map (near pattern over a ramped background) and validity mask."""
    h, w = scene.height, scene.width
    fg = _foreground(scene, t_s)
    rows = np.linspace(12.0, 6.0, h)[:, None]  # background recedes upward
    depth = np.where(fg, 2.0, np.broadcast_to(rows, (h, w)))
    ys, xs = np.mgrid[0:h, 0:w]
    invalid = (ys * w + xs) % 7 == 3  # deterministic sparse dropout
    return depth, (~invalid).astype(np.uint8)


def generate_scene(scene: SynthScene) -> SynthData:
    """Render frames and generate threshold-crossing events between them."""
    n_frames = max(1, int(round(scene.duration_s * scene.fps)))
    frame_dt = 1.0 / scene.fps
    sub_dt = frame_dt / scene.substeps
    times_s = np.array([k * frame_dt for k in range(n_frames + 1)])
    frames = np.stack([render_frame(scene, t) for t in times_s])
    seg = np.stack(
        [_foreground(scene, t).astype(np.uint8) for t in times_s]
    )
    depth_pairs = [_depth_labels(scene, t) for t in times_s]
    depth = np.stack([d for d, _ in depth_pairs])
    depth_mask = np.stack([m for _, m in depth_pairs])

    theta = scene.threshold
    log_ref = np.log(frames[0])
    raw: list[tuple[int, int, int, int]] = []  # (t_ns, y, x, p)
    total_substeps = n_frames * scene.substeps
    for step in range(total_substeps):
        t_a = step * sub_dt
        t_b = (step + 1) * sub_dt
        log_new = np.log(render_frame(scene, t_b))
        diff = log_new - log_ref
        counts = np.floor(np.abs(diff) / theta).astype(np.int64)
        ys, xs = np.nonzero(counts)
        for y, x in zip(ys, xs):
            n = counts[y, x]
            sign = 1 if diff[y, x] > 0 else -1
            for i in range(n):
                t_ev = t_a + (i + 1) * (t_b - t_a) / (n + 1)
                raw.append((int(t_ev * 1e9), int(y), int(x), sign))
            log_ref[y, x] += sign * n * theta
    raw.sort()
    events = [Event(x=x, y=y, t=t, p=p) for (t, y, x, p) in raw]
    return SynthData(
        scene=scene,
        events=events,
        frame_times_ns=(times_s * 1e9).astype(np.int64),
        frames=frames,
        seg_labels=seg,
        depth=depth,
        depth_mask=depth_mask,
    )


def changed_pixel_oracle(scene: SynthScene, t0_s: float, t1_s: float) -> np.ndarray:
    """Pixels whose rendered intensity changes at any substep inside
    [t0, t1): with two-level patterns these are exactly the pixels that must
    carry events."""
    sub_dt = 1.0 / (scene.fps * scene.substeps)
    n = max(1, int(round((t1_s - t0_s) / sub_dt)))
    changed = np.zeros((scene.height, scene.width), dtype=bool)
    prev = render_frame(scene, t0_s)
    for i in range(1, n + 1):
        cur = render_frame(scene, t0_s + i * sub_dt)
        changed |= prev != cur
        prev = cur
    return changed


# ---------------------------------------------------------------------------
# On-disk layout: <name>.evt (binary events) + <name>.npz (frames and labels)
# ---------------------------------------------------------------------------


def write_scene(out_dir: str | Path, name: str, data: SynthData) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_event_file(
        out_dir / f"{name}.evt", data.events, data.scene.width, data.scene.height
    )
    np.savez(
        out_dir / f"{name}.npz",
        frame_times_ns=data.frame_times_ns,
        frames=data.frames,
        seg_labels=data.seg_labels,
        depth=data.depth,
        depth_mask=data.depth_mask,
        pattern=np.int64(data.scene.pattern),
        height=np.int64(data.scene.height),
        width=np.int64(data.scene.width),
    )


def load_scene(out_dir: str | Path, name: str) -> SynthData:
    from .events import read_event_file

    out_dir = Path(out_dir)
    events, width, height = read_event_file(out_dir / f"{name}.evt")
    with np.load(out_dir / f"{name}.npz") as z:
        scene = SynthScene(
            height=int(z["height"]), width=int(z["width"]), pattern=int(z["pattern"])
        )
        return SynthData(
            scene=scene,
            events=events,
            frame_times_ns=z["frame_times_ns"],
            frames=z["frames"],
            seg_labels=z["seg_labels"],
            depth=z["depth"],
            depth_mask=z["depth_mask"],
        )
