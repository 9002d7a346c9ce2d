"""Run-directory pipeline: synth -> accumulate -> align -> pretrain -> rollout
plus the segmentation / depth / clustering evaluations and the gradient-check
stage.

Every stage is a pure function of (config, on-disk artifacts): reports are
sorted flat key-value text carrying the config hash, so identical
config+seed reruns produce byte-identical reports.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import (
    AlignWeights,
    ProjectionHead,
    cosine_align_loss,
    info_nce,
    preservation_loss,
    total_alignment_loss,
)
from .blobs import write_f64_blob, write_u8_blob
from .config import RunConfig
from .errors import StageOrderError, ValidationError
from .events import (
    PseudoFrame,
    accumulate_arrays,
    augment,
    event_arrays,
    normalize,
    sample_aug_spec,
)
from .heads import (
    DepthRange,
    DepthSupervision,
    PatchDecoder,
    cross_entropy_loss,
    denorm_log_depth,
    depth_total,
    dice_loss,
    linear_patch_decode,
    ms_grad_loss,
    seg_loss,
    silog_loss,
)
from .metrics import (
    ClusterSet,
    ConfusionMatrix,
    cluster_metrics,
    depth_errors,
    miou_macc,
    write_metrics_report,
)
from .optim import AdamW, Schedule
from .sequence import TokenSequence, interleave, write_token_sequence
from .synth import SynthData, SynthScene, generate_scene, load_scene, write_scene
from .transformer import (
    CausalLM,
    RolloutSpec,
    TransformerConfig,
    load_checkpoint,
    pretrain_loss,
    rollout,
    save_checkpoint,
    train,
    write_loss_curve,
)

STAGES = (
    "synth",
    "accumulate",
    "align",
    "pretrain",
    "rollout",
    "eval-seg",
    "eval-depth",
    "eval-cluster",
    "gradcheck",
)


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------


def scene_specs(cfg: RunConfig) -> list[tuple[str, SynthScene, str]]:
    """Deterministic (name, scene, split) list for the synthetic dataset."""
    specs = []
    per_class = cfg.synth_train_per_class + cfg.synth_eval_per_class
    for c in range(cfg.synth_classes):
        for i in range(per_class):
            rng = np.random.default_rng([cfg.seed, 101, c, i])
            # Fast enough that edge activity sweeps a few pixels per window,
            # so pattern support is recoverable from a single pseudo-frame.
            speed = float(rng.uniform(16.0, 32.0))
            angle = float(rng.uniform(0.0, 2.0 * np.pi))
            scene = SynthScene(
                seed=cfg.seed,
                height=cfg.synth_height,
                width=cfg.synth_width,
                pattern=c,
                velocity=(speed * np.cos(angle), speed * np.sin(angle)),
                phase=(float(rng.uniform(0, 8.0)), float(rng.uniform(0, 8.0))),
                duration_s=cfg.synth_duration_s,
                fps=cfg.synth_fps,
                substeps=cfg.synth_substeps,
                threshold=cfg.synth_threshold,
            )
            split = "train" if i < cfg.synth_train_per_class else "eval"
            specs.append((f"scene_c{c}_i{i}", scene, split))
    return specs


def _synth_dir(out_dir: Path) -> Path:
    return out_dir / "synth"


def _require_synth(cfg: RunConfig, out_dir: Path) -> list[tuple[str, SynthData, str]]:
    sdir = _synth_dir(out_dir)
    if not (sdir / "manifest.txt").exists():
        raise StageOrderError(
            f"synth artifacts missing in {sdir}; run the synth stage first"
        )
    loaded = []
    for name, _, split in scene_specs(cfg):
        if not (sdir / f"{name}.evt").exists():
            raise StageOrderError(f"missing scene file {name}.evt; rerun synth")
        loaded.append((name, load_scene(sdir, name), split))
    return loaded


def scene_pseudo_frames(data: SynthData, cfg: RunConfig) -> list[PseudoFrame]:
    """One pseudo-frame per temporal bin; bins_per_frame sub-bins split each
    inter-frame window."""
    xs, ys, ts, ps = (
        event_arrays(data.events)
        if data.events
        else (np.empty(0, np.int64),) * 4
    )
    res = (data.scene.height, data.scene.width)
    frames = []
    n = cfg.bins_per_frame
    for k in range(data.num_windows):
        t0, t1 = data.window(k)
        edges = np.linspace(t0, t1, n + 1).astype(np.int64)
        for j in range(n):
            counts = accumulate_arrays(
                xs, ys, ts, ps, (int(edges[j]), int(edges[j + 1])), res
            )
            frames.append(normalize(counts, cfg.percentile))
    return frames


def image_as_frame(img: np.ndarray) -> PseudoFrame:
    """Lift a grayscale frame into the 3-channel layout so augmentation and
    featurization treat both modalities uniformly."""
    data = np.stack([img, img, img], axis=-1)
    return PseudoFrame(data=np.clip(data, 0.0, 1.0), percentile=100)


def student_features(frames: list[PseudoFrame]) -> np.ndarray:
    """Encoder-input descriptor for a batch of 3-channel frames: per-channel
    spectral magnitudes, concatenated. Shared between event pseudo-frames and
    lifted image frames so one encoder serves both modalities."""
    stack = np.stack([f.data for f in frames])  # N x H x W x 3
    return np.concatenate(
        [fft_features(stack[:, :, :, c]) for c in range(3)], axis=1
    )


def student_feature_dim(height: int, width: int) -> int:
    return 3 * height * (width // 2 + 1)


def fft_features(images: np.ndarray) -> np.ndarray:
    """Translation-insensitive image descriptor: normalized magnitudes of the
    2-D spectrum, flattened per image."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    h, w = imgs.shape[1:]
    mags = np.abs(np.fft.rfft2(imgs, axes=(1, 2))) / (h * w)
    return mags.reshape(imgs.shape[0], -1)


class Teacher:
    """Frozen image-side embedding standing in for a pretrained encoder:
    spectral-magnitude features through a fixed random projection and a
    saturating nonlinearity, calibrated once on the training images and
    frozen afterwards."""

    def __init__(self, train_images: np.ndarray, embed_dim: int, gain: float,
                 seed: int):
        feats = fft_features(train_images)
        rng = np.random.default_rng([seed, 7])
        self.w = rng.normal(
            scale=1.0 / np.sqrt(feats.shape[1]), size=(feats.shape[1], embed_dim)
        )
        self.center = feats.mean(axis=0)
        proj = (feats - self.center) @ self.w
        self.scale = max(float(proj.std()), 1e-9)
        self.gain = gain

    @classmethod
    def from_arrays(cls, w, center, scale, gain) -> "Teacher":
        t = cls.__new__(cls)
        t.w = w
        t.center = center
        t.scale = scale
        t.gain = gain
        return t

    def embed(self, images: np.ndarray) -> np.ndarray:
        feats = fft_features(images)
        return np.tanh(self.gain * ((feats - self.center) @ self.w) / self.scale)


def init_encoder(feat_dim: int, embed_dim: int, seed: int) -> dict[str, np.ndarray]:
    # Non-zero bias keeps embeddings away from the cosine singularity even
    # for event-free crops.
    rng = np.random.default_rng([seed, 13])
    return {
        "w": rng.normal(scale=1.0 / np.sqrt(feat_dim), size=(feat_dim, embed_dim)),
        "b": rng.normal(scale=0.01, size=embed_dim),
    }


def encode(feats: np.ndarray, enc: dict[str, np.ndarray]) -> np.ndarray:
    return feats @ enc["w"] + enc["b"]


def _collect_samples(
    scenes: list[tuple[str, SynthData, str]], cfg: RunConfig, split: str
) -> tuple[list[PseudoFrame], list[PseudoFrame], np.ndarray]:
    """Per-window (event pseudo-frame, paired image frame, class id) triples."""
    ev_frames: list[PseudoFrame] = []
    img_frames: list[PseudoFrame] = []
    labels: list[int] = []
    for _, data, sp in scenes:
        if sp != split:
            continue
        pfs = scene_pseudo_frames(data, cfg)
        n = cfg.bins_per_frame
        for k in range(data.num_windows):
            image = image_as_frame(data.frames[k + 1])
            for j in range(n):
                ev_frames.append(pfs[k * n + j])
                img_frames.append(image)
                labels.append(data.scene.pattern)
    return ev_frames, img_frames, np.asarray(labels, dtype=np.int64)




def _report_path(out_dir: Path, stage: str) -> Path:
    rdir = out_dir / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    return rdir / f"{stage.replace('-', '_')}.txt"


def _finish(report: dict, cfg: RunConfig, stage: str, out_dir: Path) -> dict:
    report["stage"] = stage
    report["seed"] = cfg.seed
    report["config_hash"] = cfg.config_hash()
    write_metrics_report(report, _report_path(out_dir, stage))
    return report


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_synth(cfg: RunConfig, out_dir: Path) -> dict:
    sdir = _synth_dir(out_dir)
    sdir.mkdir(parents=True, exist_ok=True)
    total_events = 0
    names = []
    for name, scene, _ in scene_specs(cfg):
        data = generate_scene(scene)
        write_scene(sdir, name, data)
        total_events += len(data.events)
        names.append(name)
    manifest = {
        "scenes": len(names),
        "events": total_events,
        "config_hash": cfg.config_hash(),
    }
    write_metrics_report(manifest, sdir / "manifest.txt")
    return {
        "scenes": len(names),
        "events_total": total_events,
        "classes": cfg.synth_classes,
    }


def stage_accumulate(cfg: RunConfig, out_dir: Path) -> dict:
    scenes = _require_synth(cfg, out_dir)
    adir = out_dir / "accumulate"
    adir.mkdir(parents=True, exist_ok=True)
    frames_written = 0
    activity = []
    for name, data, _ in scenes:
        pfs = scene_pseudo_frames(data, cfg)
        stack = np.stack([pf.data for pf in pfs])
        np.savez(adir / f"{name}_frames.npz", frames=stack)
        frames_written += len(pfs)
        activity.extend(float(pf.data[:, :, 1].mean()) for pf in pfs)
    return {
        "pseudo_frames": frames_written,
        "mean_activity": float(np.mean(activity)),
        "percentile": cfg.percentile,
    }


def _augment_pair(ev: PseudoFrame, img: PseudoFrame, spec, seed: int):
    """Shared geometric augmentation; polarity swap only affects the event
    frame (it permutes identical channels on images)."""
    return augment(ev, spec, rng_seed=seed), augment(img, spec, rng_seed=seed)


def _train_alignment(cfg: RunConfig, scenes) -> dict:
    """Run alignment training; returns encoder params, teacher and metrics."""
    ev_frames, img_frames, labels = _collect_samples(scenes, cfg, "train")
    if len(ev_frames) < cfg.align_batch:
        raise ValidationError(
            f"not enough training samples ({len(ev_frames)}) for batch size "
            f"{cfg.align_batch}"
        )
    feat_dim = student_feature_dim(cfg.synth_height, cfg.synth_width)
    train_images = np.stack([f.data[:, :, 0] for f in img_frames])
    teacher = Teacher(train_images, cfg.embed_dim, cfg.teacher_gain, cfg.seed)
    enc = init_encoder(feat_dim, cfg.embed_dim, cfg.seed)
    head = ProjectionHead.init(cfg.embed_dim, cfg.head_hidden_dim, seed=cfg.seed + 1)
    weights = AlignWeights(cfg.lambda_cos, cfg.lambda_nce, cfg.mu, cfg.tau)
    weights.require_strict()

    params = [enc["w"], enc["b"], head.w1, head.b1, head.w2, head.b2]
    schedule = Schedule(
        total_steps=cfg.align_steps,
        peak_lr=cfg.align_lr,
        warmup_steps=cfg.align_warmup,
        weight_decay=cfg.align_weight_decay,
    )
    opt = AdamW(params, weight_decay=schedule.weight_decay)
    rng = np.random.default_rng([cfg.seed, 11])
    h, w = cfg.synth_height, cfg.synth_width
    first_loss = last_loss = None
    for step in range(cfg.align_steps):
        idx = rng.choice(len(ev_frames), size=cfg.align_batch, replace=False)
        feats_e = np.empty((cfg.align_batch, feat_dim))
        feats_img = np.empty((cfg.align_batch, feat_dim))
        aug_images = np.empty((cfg.align_batch, h, w))
        for row, i in enumerate(idx):
            spec = sample_aug_spec(
                rng,
                h,
                w,
                p_polarity_swap=cfg.aug_polarity_swap_prob,
                p_hflip=cfg.aug_hflip_prob,
                crop_scale=(cfg.aug_crop_scale_min, cfg.aug_crop_scale_max),
                p_upscale=cfg.aug_upscale_prob,
                upscale_factor=cfg.aug_upscale_factor,
            )
            aug_seed = int(rng.integers(2**31))
            ev_aug, img_aug = _augment_pair(
                ev_frames[i], img_frames[i], spec, aug_seed
            )
            feats_e[row] = student_features([ev_aug])[0]
            feats_img[row] = student_features([img_aug])[0]
            aug_images[row] = img_aug.data[:, :, 0]
        z_i = teacher.embed(aug_images)

        def loss_fn(w_t, b_t, h1, hb1, h2, hb2):
            z_e = ad.add(ad.matmul(ad.as_tensor(feats_e), w_t), b_t)
            z_e_img = ad.add(ad.matmul(ad.as_tensor(feats_img), w_t), b_t)
            return total_alignment_loss(
                z_e=z_e,
                z_i=z_i,
                z_e_on_image=z_e_img,
                weights=weights,
                head=lambda x: head.apply(x, params=(h1, hb1, h2, hb2)),
            )

        loss, grads = ad.evaluate_with_grad(loss_fn, params)
        if first_loss is None:
            first_loss = loss
        last_loss = loss
        opt.step(params, grads, schedule.lr_at(step))

    return {
        "encoder": enc,
        "head": head,
        "teacher": teacher,
        "loss_first": first_loss,
        "loss_last": last_loss,
    }


def _eval_cluster_features(cfg: RunConfig, scenes, enc) -> tuple[float, float, float]:
    ev_frames, _, labels = _collect_samples(scenes, cfg, "eval")
    feats = student_features(ev_frames)
    cs = ClusterSet(points=encode(feats, enc), labels=labels)
    return cluster_metrics(cs)


def stage_align(cfg: RunConfig, out_dir: Path) -> dict:
    scenes = _require_synth(cfg, out_dir)
    result = _train_alignment(cfg, scenes)
    enc = result["encoder"]
    head = result["head"]
    adir = out_dir / "align"
    adir.mkdir(parents=True, exist_ok=True)
    np.savez(
        adir / "encoder.npz",
        w=enc["w"],
        b=enc["b"],
        head_w1=head.w1,
        head_b1=head.b1,
        head_w2=head.w2,
        head_b2=head.b2,
        teacher_w=result["teacher"].w,
        teacher_center=result["teacher"].center,
        teacher_scale=np.float64(result["teacher"].scale),
        teacher_gain=np.float64(result["teacher"].gain),
    )
    feat_dim = student_feature_dim(cfg.synth_height, cfg.synth_width)
    init = init_encoder(feat_dim, cfg.embed_dim, cfg.seed)
    sil0, db0, ch0 = _eval_cluster_features(cfg, scenes, init)
    sil1, db1, ch1 = _eval_cluster_features(cfg, scenes, enc)
    return {
        "loss_first": result["loss_first"],
        "loss_last": result["loss_last"],
        "silhouette_init": sil0,
        "silhouette_aligned": sil1,
        "davies_bouldin_init": db0,
        "davies_bouldin_aligned": db1,
        "calinski_harabasz_init": ch0,
        "calinski_harabasz_aligned": ch1,
    }


def _require_encoder(out_dir: Path) -> tuple[dict, Teacher]:
    path = out_dir / "align" / "encoder.npz"
    if not path.exists():
        raise StageOrderError(
            f"alignment artifacts missing at {path}; run the align stage first"
        )
    with np.load(path) as z:
        enc = {"w": z["w"].copy(), "b": z["b"].copy()}
        teacher = Teacher.from_arrays(
            w=z["teacher_w"].copy(),
            center=z["teacher_center"].copy(),
            scale=float(z["teacher_scale"]),
            gain=float(z["teacher_gain"]),
        )
    return enc, teacher


def build_token_sequences(
    cfg: RunConfig, scenes, enc: dict, teacher: Teacher, split: str
) -> list[TokenSequence]:
    """Per scene: encode per-window event features and per-frame image
    features, interleaved into one multimodal sequence."""
    sequences = []
    for _, data, sp in scenes:
        if sp != split:
            continue
        pfs = scene_pseudo_frames(data, cfg)
        n = cfg.bins_per_frame
        ev_feats = student_features(pfs)
        images = np.stack([data.frames[k + 1] for k in range(data.num_windows)])
        z_e = encode(ev_feats, enc)
        z_i = teacher.embed(images)
        if n == 1:
            sequences.append(interleave(z_e, z_i))
        else:
            # n event tokens per interval followed by the paired image token
            tokens, mods = [], []
            for k in range(data.num_windows):
                for j in range(n):
                    tokens.append(z_e[k * n + j])
                    mods.append(0)
                tokens.append(z_i[k])
                mods.append(1)
            sequences.append(
                TokenSequence(tokens=np.stack(tokens), modalities=np.asarray(mods))
            )
    return sequences


def _transformer_config(cfg: RunConfig) -> TransformerConfig:
    return TransformerConfig(
        layers=cfg.layers,
        heads=cfg.heads,
        d_model=cfg.embed_dim,
        d_ff=cfg.d_ff,
        max_window=cfg.window,
        max_len=cfg.max_len,
        seed=cfg.seed,
    )


def stage_pretrain(cfg: RunConfig, out_dir: Path) -> dict:
    scenes = _require_synth(cfg, out_dir)
    enc, teacher = _require_encoder(out_dir)
    sequences = build_token_sequences(cfg, scenes, enc, teacher, "train")
    schedule = Schedule(
        total_steps=cfg.pretrain_steps,
        peak_lr=cfg.pretrain_lr,
        warmup_steps=cfg.pretrain_warmup,
        weight_decay=cfg.pretrain_weight_decay,
    )
    model, curve = train(sequences, _transformer_config(cfg), schedule)
    pdir = out_dir / "pretrain"
    pdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pdir / "model.ckpt", model)
    write_loss_curve(pdir / "loss_curve.csv", curve)
    tail = float(np.mean([c[2] for c in curve[-10:]]))
    return {
        "sequences": len(sequences),
        "steps": len(curve),
        "loss_first": curve[0][2],
        "loss_tail_mean": tail,
        "loss_ratio": tail / curve[0][2] if curve[0][2] else 0.0,
    }


def stage_rollout(cfg: RunConfig, out_dir: Path) -> dict:
    ckpt = out_dir / "pretrain" / "model.ckpt"
    if not ckpt.exists():
        raise StageOrderError(
            f"pretrain checkpoint missing at {ckpt}; run the pretrain stage first"
        )
    model = load_checkpoint(ckpt)
    scenes = _require_synth(cfg, out_dir)
    enc, teacher = _require_encoder(out_dir)
    sequences = build_token_sequences(cfg, scenes, enc, teacher, "eval")
    if not sequences:
        raise ValidationError("no eval sequences available for rollout")
    seq = sequences[0]
    context_len = min(cfg.rollout_context, len(seq), model.cfg.max_window)
    context = TokenSequence(
        tokens=seq.tokens[:context_len], modalities=seq.modalities[:context_len]
    )
    spec = RolloutSpec(
        context_len=context_len,
        horizon=cfg.rollout_horizon,
        window=model.cfg.max_window,
    )
    generated = rollout(context, spec, model)
    rdir = out_dir / "rollout"
    rdir.mkdir(parents=True, exist_ok=True)
    write_token_sequence(rdir / "generated.seq", generated, max_len=len(generated))
    return {
        "context_tokens": context_len,
        "generated_tokens": len(generated) - context_len,
        "all_finite": int(bool(np.isfinite(generated.tokens).all())),
        "mean_abs_token": float(np.abs(generated.tokens).mean()),
    }


def patch_tokens(frame3: np.ndarray, patch: int) -> np.ndarray:
    """Per-patch features: flattened patch values, the channel means of the
    eight neighboring patches (local context), and the patch's normalized
    grid coordinates."""
    h, w, _ = frame3.shape
    hp, wp = h // patch, w // patch
    grid = frame3.reshape(hp, patch, wp, patch, 3).transpose(0, 2, 1, 3, 4)
    flat = grid.reshape(hp * wp, patch * patch * 3)
    means = grid.mean(axis=(2, 3))  # hp x wp x 3
    padded = np.pad(means, ((1, 1), (1, 1), (0, 0)), mode="edge")
    neighbors = [
        padded[1 + dy : 1 + dy + hp, 1 + dx : 1 + dx + wp].reshape(hp * wp, 3)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dy, dx) != (0, 0)
    ]
    gy, gx = np.mgrid[0:hp, 0:wp]
    coords = np.stack([gy.ravel() / hp, gx.ravel() / wp], axis=1)
    return np.concatenate([flat, *neighbors, coords], axis=1)


def _head_frames(cfg: RunConfig, scenes, split: str):
    """(tokens, seg_labels, depth, depth_mask) per paired frame."""
    out = []
    for _, data, sp in scenes:
        if sp != split:
            continue
        pfs = scene_pseudo_frames(data, cfg)
        n = cfg.bins_per_frame
        for k in range(data.num_windows):
            pf = pfs[k * n]  # first bin of the window
            tokens = patch_tokens(pf.data, cfg.patch_size)
            out.append(
                (
                    tokens,
                    data.seg_labels[k + 1],
                    data.depth[k + 1],
                    data.depth_mask[k + 1].astype(np.float64),
                )
            )
    return out


def stage_eval_seg(cfg: RunConfig, out_dir: Path) -> dict:
    scenes = _require_synth(cfg, out_dir)
    train_frames = _head_frames(cfg, scenes, "train")
    eval_frames = _head_frames(cfg, scenes, "eval")
    if not train_frames or not eval_frames:
        raise ValidationError("segmentation evaluation needs both splits")
    token_dim = train_frames[0][0].shape[1]
    dec = PatchDecoder.init(token_dim, cfg.patch_size, cfg.seg_classes, seed=cfg.seed)
    h, w = cfg.synth_height, cfg.synth_width
    rng = np.random.default_rng([cfg.seed, 17])
    schedule = Schedule(total_steps=cfg.seg_steps, peak_lr=cfg.seg_lr,
                        warmup_steps=10, weight_decay=0.0)
    params = [dec.weight]
    opt = AdamW(params, weight_decay=0.0)
    subset = train_frames[: cfg.head_train_frames]
    for step in range(cfg.seg_steps):
        tokens, labels, _, _ = subset[int(rng.integers(len(subset)))]

        def loss_fn(w_t):
            logits = linear_patch_decode(tokens, dec, h, w, weight=w_t)
            return seg_loss(logits, labels)

        _, grads = ad.evaluate_with_grad(loss_fn, params)
        opt.step(params, grads, schedule.lr_at(step))

    conf = ConfusionMatrix(counts=np.zeros((cfg.seg_classes, cfg.seg_classes)))
    edir = out_dir / "eval-seg"
    edir.mkdir(parents=True, exist_ok=True)
    for i, (tokens, labels, _, _) in enumerate(eval_frames):
        logits = linear_patch_decode(tokens, dec, h, w).data
        pred = np.argmax(logits, axis=0)
        conf = conf + ConfusionMatrix.from_predictions(pred, labels, cfg.seg_classes)
        if i == 0:
            write_f64_blob(edir / "example_logits.blob", logits)
            write_u8_blob(edir / "example_labels.u8", labels)
            write_u8_blob(edir / "example_pred.u8", pred)
    miou, macc = miou_macc(conf)
    return {
        "miou": miou,
        "macc": macc,
        "eval_frames": len(eval_frames),
        "train_frames": len(subset),
    }


def _sigmoid(x: ad.Tensor) -> ad.Tensor:
    return ad.mul(0.5, ad.add(ad.tanh(ad.mul(x, 0.5)), 1.0))


def stage_eval_depth(cfg: RunConfig, out_dir: Path) -> dict:
    scenes = _require_synth(cfg, out_dir)
    train_frames = _head_frames(cfg, scenes, "train")
    eval_frames = _head_frames(cfg, scenes, "eval")
    if not train_frames or not eval_frames:
        raise ValidationError("depth evaluation needs both splits")
    token_dim = train_frames[0][0].shape[1]
    dec = PatchDecoder.init(token_dim, cfg.patch_size, 1, seed=cfg.seed + 2)
    depth_range = DepthRange(cfg.d_min, cfg.d_max)
    h, w = cfg.synth_height, cfg.synth_width
    scales = tuple(int(s) for s in cfg.depth_scales)
    rng = np.random.default_rng([cfg.seed, 19])
    schedule = Schedule(total_steps=cfg.depth_steps, peak_lr=cfg.depth_lr,
                        warmup_steps=10, weight_decay=0.0)
    params = [dec.weight]
    opt = AdamW(params, weight_decay=0.0)
    subset = train_frames[: cfg.head_train_frames]

    def predict(tokens, w_t=None):
        raw = linear_patch_decode(tokens, dec, h, w, weight=w_t)
        y_norm = _sigmoid(ad.reshape(raw, (h, w)))
        return denorm_log_depth(y_norm, depth_range)

    for step in range(cfg.depth_steps):
        tokens, _, depth_gt, mask = subset[int(rng.integers(len(subset)))]
        sup = DepthSupervision(
            depth_gt=depth_gt,
            mask=mask,
            scales=scales,
            lam=cfg.silog_lambda,
            w_silog=cfg.w_silog,
            w_ms_grad=cfg.w_ms_grad,
        )

        def loss_fn(w_t):
            return depth_total(predict(tokens, w_t), sup)

        _, grads = ad.evaluate_with_grad(loss_fn, params)
        opt.step(params, grads, schedule.lr_at(step))

    preds, gts, masks = [], [], []
    edir = out_dir / "eval-depth"
    edir.mkdir(parents=True, exist_ok=True)
    for i, (tokens, _, depth_gt, mask) in enumerate(eval_frames):
        pred = predict(tokens).data
        preds.append(pred)
        gts.append(depth_gt)
        masks.append(mask)
        if i == 0:
            write_f64_blob(edir / "example_depth.blob", pred)
            write_u8_blob(edir / "example_mask.u8", mask.astype(np.uint8))
    abs_err, rms = depth_errors(np.stack(preds), np.stack(gts), np.stack(masks))
    return {
        "abs": abs_err,
        "rms": rms,
        "eval_frames": len(eval_frames),
        "train_frames": len(subset),
        "d_min": cfg.d_min,
        "d_max": cfg.d_max,
    }


def stage_eval_cluster(cfg: RunConfig, out_dir: Path) -> dict:
    scenes = _require_synth(cfg, out_dir)
    enc, _ = _require_encoder(out_dir)
    feat_dim = student_feature_dim(cfg.synth_height, cfg.synth_width)
    init = init_encoder(feat_dim, cfg.embed_dim, cfg.seed)
    sil0, db0, ch0 = _eval_cluster_features(cfg, scenes, init)
    sil1, db1, ch1 = _eval_cluster_features(cfg, scenes, enc)
    return {
        "silhouette_init": sil0,
        "silhouette_aligned": sil1,
        "davies_bouldin_init": db0,
        "davies_bouldin_aligned": db1,
        "calinski_harabasz_init": ch0,
        "calinski_harabasz_aligned": ch1,
        "points": cfg.synth_classes * cfg.synth_eval_per_class,
    }


def stage_gradcheck(cfg: RunConfig, out_dir: Path) -> dict:
    rng = np.random.default_rng([cfg.seed, 23])
    z_e = rng.normal(size=(4, 6))
    z_i = rng.normal(size=(4, 6))
    z_img = rng.normal(size=(4, 6))
    head = ProjectionHead.init(6, 8, seed=cfg.seed)
    weights = AlignWeights(1.0, 1.0, 1.0, 0.2)
    logits = rng.normal(size=(3, 4, 4))
    labels = rng.integers(0, 3, size=(4, 4))
    gt = rng.uniform(1, 8, size=(4, 4))
    pred = rng.uniform(1, 8, size=(4, 4))
    mask = np.ones((4, 4))
    mask[0, 1] = 0.0
    sup = DepthSupervision(depth_gt=gt, mask=mask, scales=(1, 2))
    preds_ar = rng.normal(size=(5, 4))
    targets_ar = rng.normal(size=(5, 4))
    cases = {
        "cosine_align": (lambda a: cosine_align_loss(a, z_i), [z_e]),
        "info_nce": (lambda a: info_nce(a, z_i, tau=0.2, head=head), [z_e]),
        "preservation": (lambda a: preservation_loss(a, z_i, mu=0.7), [z_img]),
        "total_alignment": (
            lambda a, b: total_alignment_loss(
                z_e=a, z_i=z_i, z_e_on_image=b, weights=weights, head=head
            ),
            [z_e, z_img],
        ),
        "pretrain": (lambda a: pretrain_loss(a, targets_ar), [preds_ar]),
        "cross_entropy": (lambda t: cross_entropy_loss(t, labels), [logits]),
        "dice": (lambda t: dice_loss(t, labels), [logits]),
        "seg": (lambda t: seg_loss(t, labels), [logits]),
        "silog": (lambda t: silog_loss(t, gt, mask), [pred]),
        "ms_grad": (lambda t: ms_grad_loss(t, gt, mask, scales=(1, 2)), [pred]),
        "depth_total": (lambda t: depth_total(t, sup), [pred]),
    }
    report: dict = {}
    failures = []
    for name, (f, inputs) in cases.items():
        r = ad.grad_check(f, inputs, rel_tol=1e-4)
        report[f"{name}_max_rel_error"] = r.max_rel_error
        report[f"{name}_pass"] = int(r.passed)
        if not r.passed:
            failures.append(name)
    report["all_pass"] = int(not failures)
    if failures:
        _finish(report, cfg, "gradcheck", out_dir)
        raise ValidationError(f"gradient checks failed: {', '.join(failures)}")
    return report


_STAGE_FNS = {
    "synth": stage_synth,
    "accumulate": stage_accumulate,
    "align": stage_align,
    "pretrain": stage_pretrain,
    "rollout": stage_rollout,
    "eval-seg": stage_eval_seg,
    "eval-depth": stage_eval_depth,
    "eval-cluster": stage_eval_cluster,
    "gradcheck": stage_gradcheck,
}


def run_pipeline(cfg: RunConfig, stage: str, out_dir: str | Path) -> dict:
    """Run one stage; artifacts land under out_dir and a flat key-value
    report (with the config hash) is written to out_dir/reports."""
    if stage not in _STAGE_FNS:
        raise ValidationError(f"unknown stage {stage!r}; choose from {STAGES}")
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = _STAGE_FNS[stage](cfg, out_dir)
    return _finish(report, cfg, stage, out_dir)
