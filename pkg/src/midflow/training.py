"""Two-stage training: the synthesis network learns to merge warped frames
under a fixed flow teacher, the teacher can then be fine-tuned against the
frozen synthesizer, and finally the flow-generating diffusion model trains
against the frozen teacher's pseudo-labels.

Epoch counts default to the reference protocol; ``epoch_scale`` shrinks
them proportionally so desk-size datasets train in minutes. Validation
samples are chosen deterministically by an index hash (90/10).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import Triplet, TripletFolder
from .diffusion import (NoiseSchedule, ancestral_sample, loss_x0_l1, make_linear_schedule,
                        make_step_plan, q_sample)
from .flow import (FlowPair, backward_warp, denormalize_flow, normalize_flow, resize_flow)
from .losses import FeatureExtractor, LossWeights, combined_loss, epe, psnr
from .motion_model import MotionUNet, MotionUNetConfig
from .nn import Conv2d, Module, ModuleList
from .optim import AdamW, EmaShadow
from .rng import Rng
from .synthesis import (SynthUNet, inference_levels, max_feasible_levels, pyramid_synthesize)
from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


# ---------------------------------------------------------------- teachers


class OracleTeacher:
    """Returns the dataset's analytic ground-truth flows; immutable."""

    trainable = False

    def flow_pair_tensor(self, batch: "TripletBatch") -> Tensor:
        if batch.flows is None:
            raise ValueError("OracleTeacher needs ground-truth flows in the batch")
        return Tensor(batch.flows)

    def named_parameters(self):
        return iter(())


class NetTeacher(Module):
    """Small trainable flow estimator standing in for a pretrained model.

    Siamese 5-level feature pyramid, correlation-free: each level regresses
    a flow update from the first image's features, the warped second-image
    features, and the upsampled coarser flow.
    """

    trainable = True
    WIDTHS = (16, 24, 32, 48, 64)

    def __init__(self, rng: Rng):
        w = self.WIDTHS
        self.enc = ModuleList()
        prev = 3
        for lvl, width in enumerate(w):
            self.enc.append(Conv2d(prev, width, 3, rng, stride=1 if lvl == 0 else 2))
            prev = width
        self.dec_hidden = ModuleList()
        self.dec_out = ModuleList()
        for width in w:
            self.dec_hidden.append(Conv2d(2 * width + 2, 32, 3, rng))
            self.dec_out.append(Conv2d(32, 2, 3, rng, gain=0.1))

    def _pyramid(self, img: Tensor) -> list[Tensor]:
        feats = []
        x = img
        for conv in self.enc:
            x = T.silu(conv(x))
            feats.append(x)
        return feats

    def flow(self, img_a: Tensor, img_b: Tensor) -> Tensor:
        """Flow from img_a's coordinates toward img_b, full resolution."""
        fa = self._pyramid(img_a)
        fb = self._pyramid(img_b)
        flow = None
        for lvl in reversed(range(len(fa))):
            if flow is None:
                n, _, h, w = fa[lvl].shape
                flow = Tensor(np.zeros((n, 2, h, w), dtype=np.float32))
            else:
                flow = resize_flow(flow, 2)
            warped = backward_warp(fb[lvl], flow)
            x = T.concat([fa[lvl], warped, flow], axis=1)
            delta = self.dec_out[lvl](T.silu(self.dec_hidden[lvl](x)))
            flow = flow + delta
        return flow

    def flow_pair_tensor(self, batch: "TripletBatch") -> Tensor:
        mid = Tensor(batch.frame_mid)
        return T.concat([self.flow(mid, Tensor(batch.frame0)),
                         self.flow(mid, Tensor(batch.frame1))], axis=1)


# ------------------------------------------------------------ configuration


@dataclass(frozen=True)
class PhaseConfig:
    epochs: int
    lr: float
    weight_decay: float
    batch_size: int
    ema_decay: float
    steps_override: int | None = None

    def steps_for(self, n_train: int, epoch_scale: float) -> int:
        if self.steps_override is not None:
            return self.steps_override
        return max(1, round(self.epochs * epoch_scale * n_train / self.batch_size))


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    crop_size: int = 64            # reference protocol crops at 256
    epoch_scale: float = 1.0       # shrinks epoch counts for desk runs
    levels: int = 3
    synth_base_channels: int = 32
    motion: MotionUNetConfig = field(default_factory=MotionUNetConfig)
    extractor_seed: int = 77
    augment: bool = True
    val_interval: int = 200
    val_samples: int = 64
    # phase defaults follow the reference protocol
    synthesis: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        epochs=200, lr=2e-4, weight_decay=1e-4, batch_size=32, ema_decay=0.999))
    synthesis_loss_switch: float = 0.75  # L1-only before, full stack after
    teacher_pretrain: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        epochs=20, lr=2e-4, weight_decay=1e-4, batch_size=32, ema_decay=0.999))
    teacher_finetune: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        epochs=100, lr=1e-4, weight_decay=1e-4, batch_size=32, ema_decay=0.999))
    motion_phase: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        epochs=500, lr=2e-4, weight_decay=1e-8, batch_size=64, ema_decay=0.9999))

    def late_weights(self) -> LossWeights:
        return LossWeights(1.0, 1.0, 20.0)

    def early_weights(self) -> LossWeights:
        return LossWeights(1.0, 0.0, 0.0)


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def _dataclass_from(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise KeyError(f"unknown config keys at {path}: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        if f.name == "motion" and isinstance(val, dict):
            val = _dataclass_from(MotionUNetConfig, val, f"{path}.motion")
        elif f.name in ("synthesis", "teacher_pretrain", "teacher_finetune",
                        "motion_phase") and isinstance(val, dict):
            val = _dataclass_from(PhaseConfig, val, f"{path}.{f.name}")
        elif isinstance(val, list):
            val = tuple(val)
        kwargs[f.name] = val
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    return _dataclass_from(TrainConfig, data, "config")


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class Augmentation:
    """One concrete augmentation: crop window plus symmetry flags."""

    crop_y: int = 0
    crop_x: int = 0
    crop_size: int | None = None
    rotate: bool = False       # quarter turn; flow (u, v) -> (-v, u)
    hflip: bool = False
    vflip: bool = False
    reverse: bool = False      # swap frame order and the flow pair


def apply_augmentation(triplet: Triplet, aug: Augmentation) -> Triplet:
    """Deterministic application; flows transform consistently with frames."""
    frames = [triplet.frame0, triplet.frame_mid, triplet.frame1]
    flows = [triplet.flows.to_frame0.data, triplet.flows.to_frame1.data] \
        if triplet.flows is not None else None

    if aug.crop_size is not None:
        y, x, c = aug.crop_y, aug.crop_x, aug.crop_size
        if y < 0 or x < 0 or y + c > triplet.height or x + c > triplet.width:
            raise T.ShapeError(f"crop {c} at ({y}, {x}) exceeds "
                               f"{triplet.height}x{triplet.width} frames")
        frames = [f[:, y:y + c, x:x + c] for f in frames]
        if flows is not None:
            flows = [f[y:y + c, x:x + c] for f in flows]
    if aug.rotate:
        frames = [np.rot90(f, k=-1, axes=(1, 2)) for f in frames]
        if flows is not None:
            flows = [np.stack([-f[..., 1], f[..., 0]], axis=-1)
                     for f in (np.rot90(f, k=-1, axes=(0, 1)) for f in flows)]
    if aug.hflip:
        frames = [f[:, :, ::-1] for f in frames]
        if flows is not None:
            flows = [np.stack([-f[:, ::-1, 0], f[:, ::-1, 1]], axis=-1) for f in flows]
    if aug.vflip:
        frames = [f[:, ::-1, :] for f in frames]
        if flows is not None:
            flows = [np.stack([f[::-1, :, 0], -f[::-1, :, 1]], axis=-1) for f in flows]
    if aug.reverse:
        frames = [frames[2], frames[1], frames[0]]
        if flows is not None:
            flows = [flows[1], flows[0]]

    frames = [np.ascontiguousarray(f) for f in frames]
    pair = None
    if flows is not None:
        from .flow import FlowField
        pair = FlowPair(FlowField(np.ascontiguousarray(flows[0])),
                        FlowField(np.ascontiguousarray(flows[1])))
    return Triplet(frames[0], frames[1], frames[2], flows=pair)


def augment_triplet(triplet: Triplet, rng: Rng, crop_size: int, *,
                    rotate: bool = True, flip: bool = True,
                    reverse: bool = True, crop: bool = True) -> Triplet:
    """Random crop, optional quarter rotation / flips / temporal reversal."""
    h, w = triplet.height, triplet.width
    if crop and (h < crop_size or w < crop_size):
        raise T.ShapeError(f"frames {h}x{w} smaller than crop {crop_size}")
    aug = Augmentation(
        crop_y=int(rng.integers(0, h - crop_size + 1)) if crop else 0,
        crop_x=int(rng.integers(0, w - crop_size + 1)) if crop else 0,
        crop_size=crop_size if crop else None,
        rotate=rotate and rng.choice(0.5),
        hflip=flip and rng.choice(0.5),
        vflip=flip and rng.choice(0.5),
        reverse=reverse and rng.choice(0.5))
    return apply_augmentation(triplet, aug)


# ------------------------------------------------------------ data plumbing


@dataclass
class TripletBatch:
    frame0: np.ndarray      # (N, 3, H, W)
    frame_mid: np.ndarray
    frame1: np.ndarray
    flows: np.ndarray | None  # (N, 4, H, W) pixel units


def _hash_index(i: int) -> int:
    x = (i + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def split_train_val(n: int, val_fraction: float = 0.1) -> tuple[list[int], list[int]]:
    """Deterministic split by sample-index hash; exact 10% validation."""
    order = sorted(range(n), key=lambda i: (_hash_index(i), i))
    n_val = int(np.ceil(n * val_fraction))
    val = sorted(order[:n_val])
    train = sorted(order[n_val:])
    return train, val


class CachedDataset:
    """In-memory copy of a triplet folder (uint8 frames, float32 flows)."""

    def __init__(self, handle: TripletFolder):
        self._frames = []
        self._flows = []
        for i in range(len(handle)):
            t = handle.load(i)
            self._frames.append(tuple(
                np.clip(np.round(f * 255), 0, 255).astype(np.uint8)
                for f in (t.frame0, t.frame_mid, t.frame1)))
            self._flows.append((t.flows.to_frame0.data, t.flows.to_frame1.data))

    def __len__(self):
        return len(self._frames)

    def load(self, i: int) -> Triplet:
        from .flow import FlowField
        f0, fm, f1 = (f.astype(np.float32) / 255.0 for f in self._frames[i])
        return Triplet(f0, fm, f1,
                       flows=FlowPair(FlowField(self._flows[i][0]),
                                      FlowField(self._flows[i][1])))


def _make_batch(dataset, indices, rng: Rng, crop: int, augment: bool) -> TripletBatch:
    f0s, fms, f1s, fls = [], [], [], []
    for i in indices:
        t = dataset.load(int(i))
        if augment:
            t = augment_triplet(t, rng, crop)
        elif t.height != crop or t.width != crop:
            t = augment_triplet(t, rng, crop, rotate=False, flip=False, reverse=False)
        f0s.append(t.frame0)
        fms.append(t.frame_mid)
        f1s.append(t.frame1)
        if t.flows is not None:
            fls.append(np.concatenate([t.flows.to_frame0.data.transpose(2, 0, 1),
                                       t.flows.to_frame1.data.transpose(2, 0, 1)]))
    flows = np.stack(fls).astype(np.float32) if len(fls) == len(f0s) else None
    return TripletBatch(np.stack(f0s), np.stack(fms), np.stack(f1s), flows)


class TrainLogger:
    """Line-delimited JSON records; optionally mirrored to a file."""

    def __init__(self, out_dir: str | None, name: str):
        self.records: list[dict] = []
        self._fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self._fh = open(os.path.join(out_dir, name), "w")

    def log(self, **record) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    module: Module
    history: list[dict]
    best_metric: float


def _check_finite(loss_value: float, step: int, phase: str) -> None:
    if not np.isfinite(loss_value):
        raise DivergenceError(f"{phase}: loss became {loss_value} at step {step}")


def _snapshot(module: Module, ema: EmaShadow, cfg: TrainConfig, kind: str,
              step: int) -> Checkpoint:
    meta = config_to_dict(cfg)
    meta["kind"] = kind
    return Checkpoint(params=module.state_dict(), ema=ema.state_dict(),
                      config=meta, seed=cfg.seed, step=step)


# ------------------------------------------------------------ model builders


def build_synthesis(cfg: TrainConfig) -> SynthUNet:
    return SynthUNet(Rng(cfg.seed, 0x51), base_channels=cfg.synth_base_channels)


def build_motion(cfg: TrainConfig) -> MotionUNet:
    return MotionUNet(cfg.motion, Rng(cfg.seed, 0x52))


def build_teacher(cfg: TrainConfig) -> NetTeacher:
    return NetTeacher(Rng(cfg.seed, 0x53))


_BUILDERS = {"synthesis": build_synthesis, "motion": build_motion,
             "teacher": build_teacher}


def model_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True) -> Module:
    """Rebuild the module recorded in a checkpoint; EMA weights by default."""
    kind = ckpt.config.get("kind")
    if kind not in _BUILDERS:
        raise ValueError(f"checkpoint carries unknown model kind {kind!r}")
    cfg_dict = {k: v for k, v in ckpt.config.items() if k != "kind"}
    module = _BUILDERS[kind](config_from_dict(cfg_dict))
    state = ckpt.ema if (use_ema and ckpt.ema) else ckpt.params
    module.load_state_dict(state)
    return module


# -------------------------------------------------------------- stage 1


def train_stage1_synthesis(dataset, teacher, cfg: TrainConfig,
                           out_dir: str | None = None) -> TrainResult:
    """Train the synthesis network against a fixed flow teacher.

    The teacher is never updated; with a NetTeacher its parameters are
    excluded from the tape. L1-only for the first part of the schedule,
    then the full perceptual stack. Returns the best-validation (PSNR,
    EMA weights) checkpoint.
    """
    train_idx, val_idx = split_train_val(len(dataset))
    phase = cfg.synthesis
    steps = phase.steps_for(len(train_idx), cfg.epoch_scale)
    module = build_synthesis(cfg)
    if isinstance(teacher, Module):
        teacher.freeze()
    opt = AdamW(list(module.named_parameters()), lr=phase.lr,
                weight_decay=phase.weight_decay)
    ema = EmaShadow(module.named_parameters(), phase.ema_decay)
    extractor = FeatureExtractor(seed=cfg.extractor_seed)
    batch_rng = Rng(cfg.seed, 0x10)
    aug_rng = Rng(cfg.seed, 0x11)
    logger = TrainLogger(out_dir, "synthesis_log.jsonl")
    switch = int(steps * cfg.synthesis_loss_switch)
    best = (-np.inf, None)
    try:
        for step in range(1, steps + 1):
            idx = batch_rng.integers(0, len(train_idx), (phase.batch_size,))
            batch = _make_batch(dataset, [train_idx[i] for i in idx], aug_rng,
                                cfg.crop_size, cfg.augment)
            with T.no_grad():
                flows = teacher.flow_pair_tensor(batch).detach()
            out = pyramid_synthesize(module, Tensor(batch.frame0), Tensor(batch.frame1),
                                     flows, levels=cfg.levels)
            weights = cfg.early_weights() if step <= switch else cfg.late_weights()
            loss = combined_loss(Tensor(batch.frame_mid), out, weights, extractor)
            loss_val = loss.item()
            _check_finite(loss_val, step, "stage1-synthesis")
            module.zero_grad()
            loss.backward()
            opt.step()
            ema.update(module.named_parameters())
            logger.log(phase="synthesis", step=step, loss=loss_val,
                       loss_weights=[weights.l1, weights.perceptual, weights.style])
            if step % cfg.val_interval == 0 or step == steps:
                score = _validate_synthesis(module, ema, teacher, dataset, val_idx, cfg)
                logger.log(phase="synthesis", step=step, val_psnr=score)
                if score > best[0]:
                    best = (score, _snapshot(module, ema, cfg, "synthesis", step))
    finally:
        logger.close()
    ckpt = best[1] if best[1] is not None else _snapshot(module, ema, cfg, "synthesis", steps)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "synthesis.ckpt"), ckpt)
    return TrainResult(ckpt, module, logger.records, best[0])


def _validate_synthesis(module, ema, teacher, dataset, val_idx, cfg: TrainConfig) -> float:
    eval_net = build_synthesis(cfg)
    ema.copy_to(eval_net)
    rng = Rng(cfg.seed, 0x12)
    take = val_idx[:cfg.val_samples]
    scores = []
    with T.no_grad():
        for chunk in range(0, len(take), 16):
            batch = _make_batch(dataset, take[chunk:chunk + 16], rng,
                                cfg.crop_size, augment=False)
            flows = teacher.flow_pair_tensor(batch).detach()
            out = pyramid_synthesize(eval_net, Tensor(batch.frame0),
                                     Tensor(batch.frame1), flows, levels=cfg.levels)
            for i in range(out.shape[0]):
                scores.append(psnr(out.data[i].transpose(1, 2, 0),
                                   batch.frame_mid[i].transpose(1, 2, 0)))
    return float(np.mean(scores))


def pretrain_teacher(dataset, teacher: NetTeacher, cfg: TrainConfig,
                     out_dir: str | None = None) -> TrainResult:
    """Supervised warm-up of the trainable teacher on ground-truth flows.

    Stands in for the off-the-shelf pretrained estimator the protocol
    assumes before alternating fine-tuning.
    """
    train_idx, _ = split_train_val(len(dataset))
    phase = cfg.teacher_pretrain
    steps = phase.steps_for(len(train_idx), cfg.epoch_scale)
    teacher.unfreeze()
    opt = AdamW(list(teacher.named_parameters()), lr=phase.lr,
                weight_decay=phase.weight_decay)
    ema = EmaShadow(teacher.named_parameters(), phase.ema_decay)
    batch_rng = Rng(cfg.seed, 0x20)
    aug_rng = Rng(cfg.seed, 0x21)
    logger = TrainLogger(out_dir, "teacher_pretrain_log.jsonl")
    try:
        for step in range(1, steps + 1):
            idx = batch_rng.integers(0, len(train_idx), (phase.batch_size,))
            batch = _make_batch(dataset, [train_idx[i] for i in idx], aug_rng,
                                cfg.crop_size, cfg.augment)
            pred = teacher.flow_pair_tensor(batch)
            loss = T.absolute(pred - Tensor(batch.flows)).mean()
            loss_val = loss.item()
            _check_finite(loss_val, step, "teacher-pretrain")
            teacher.zero_grad()
            loss.backward()
            opt.step()
            ema.update(teacher.named_parameters())
            logger.log(phase="teacher_pretrain", step=step, loss=loss_val)
    finally:
        logger.close()
    ckpt = _snapshot(teacher, ema, cfg, "teacher", steps)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "teacher.ckpt"), ckpt)
    return TrainResult(ckpt, teacher, logger.records, logger.records[-1]["loss"])


def finetune_stage1_teacher(dataset, synthesis: SynthUNet, teacher: NetTeacher,
                            cfg: TrainConfig, out_dir: str | None = None) -> TrainResult:
    """Fine-tune the teacher through the frozen synthesizer.

    The synthesis loss backpropagates through warping into the teacher's
    parameters only; the synthesizer is bit-frozen.
    """
    train_idx, val_idx = split_train_val(len(dataset))
    phase = cfg.teacher_finetune
    steps = phase.steps_for(len(train_idx), cfg.epoch_scale)
    synthesis.freeze()
    teacher.unfreeze()
    opt = AdamW(list(teacher.named_parameters()), lr=phase.lr,
                weight_decay=phase.weight_decay)
    ema = EmaShadow(teacher.named_parameters(), phase.ema_decay)
    extractor = FeatureExtractor(seed=cfg.extractor_seed)
    batch_rng = Rng(cfg.seed, 0x30)
    aug_rng = Rng(cfg.seed, 0x31)
    logger = TrainLogger(out_dir, "teacher_finetune_log.jsonl")
    weights = cfg.late_weights()
    try:
        for step in range(1, steps + 1):
            idx = batch_rng.integers(0, len(train_idx), (phase.batch_size,))
            batch = _make_batch(dataset, [train_idx[i] for i in idx], aug_rng,
                                cfg.crop_size, cfg.augment)
            flows = teacher.flow_pair_tensor(batch)
            out = pyramid_synthesize(synthesis, Tensor(batch.frame0),
                                     Tensor(batch.frame1), flows, levels=cfg.levels)
            loss = combined_loss(Tensor(batch.frame_mid), out, weights, extractor)
            loss_val = loss.item()
            _check_finite(loss_val, step, "stage1-teacher-finetune")
            teacher.zero_grad()
            loss.backward()
            opt.step()
            ema.update(teacher.named_parameters())
            logger.log(phase="teacher_finetune", step=step, loss=loss_val)
    finally:
        logger.close()
        synthesis.unfreeze()
    ckpt = _snapshot(teacher, ema, cfg, "teacher", steps)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "teacher_finetuned.ckpt"), ckpt)
    return TrainResult(ckpt, teacher, logger.records, logger.records[-1]["loss"])


# -------------------------------------------------------------- stage 2


def train_stage2_motion(dataset, teacher, cfg: TrainConfig,
                        out_dir: str | None = None,
                        resume_from: Checkpoint | None = None) -> TrainResult:
    """Train the flow-generating diffusion model on teacher pseudo-labels.

    Per step: normalized teacher flows are diffused to a uniform random
    timestep and the network's clean-state prediction is penalized with L1.
    The teacher stays frozen (bit-identical). Best-validation checkpoint is
    chosen by sampled-flow EPE against the teacher labels.
    """
    train_idx, val_idx = split_train_val(len(dataset))
    phase = cfg.motion_phase
    steps = phase.steps_for(len(train_idx), cfg.epoch_scale)
    module = build_motion(cfg)
    start_step = 0
    if resume_from is not None:
        module.load_state_dict(resume_from.params)
        start_step = resume_from.step
    if isinstance(teacher, Module):
        teacher.freeze()
    opt = AdamW(list(module.named_parameters()), lr=phase.lr,
                weight_decay=phase.weight_decay)
    ema = EmaShadow(module.named_parameters(), phase.ema_decay)
    if resume_from is not None and resume_from.ema:
        ema.shadow = {k: v.copy() for k, v in resume_from.ema.items()}
    schedule = make_linear_schedule(cfg.motion.diffusion_steps)
    batch_rng = Rng(cfg.seed, 0x40)
    aug_rng = Rng(cfg.seed, 0x41)
    diff_rng = Rng(cfg.seed, 0x42)
    logger = TrainLogger(out_dir, "motion_log.jsonl")
    best = (np.inf, None)
    try:
        for step in range(start_step + 1, start_step + steps + 1):
            idx = batch_rng.integers(0, len(train_idx), (phase.batch_size,))
            batch = _make_batch(dataset, [train_idx[i] for i in idx], aug_rng,
                                cfg.crop_size, cfg.augment)
            with T.no_grad():
                z0 = normalize_flow(teacher.flow_pair_tensor(batch)).detach()
            t = diff_rng.integers(1, schedule.steps + 1, (z0.shape[0],))
            eps = Tensor(diff_rng.normal(z0.shape))
            z_t = q_sample(z0, t, eps, schedule)
            pred = module.predict_x0(z_t, t, Tensor(batch.frame0), Tensor(batch.frame1))
            loss = loss_x0_l1(pred, z0)
            loss_val = loss.item()
            _check_finite(loss_val, step, "stage2-motion")
            module.zero_grad()
            loss.backward()
            opt.step()
            ema.update(module.named_parameters())
            logger.log(phase="motion", step=step, loss=loss_val)
            if (step - start_step) % cfg.val_interval == 0 or step == start_step + steps:
                score = _validate_motion(ema, teacher, dataset, val_idx, cfg, schedule)
                logger.log(phase="motion", step=step, val_epe=score)
                if score < best[0]:
                    best = (score, _snapshot(module, ema, cfg, "motion", step))
    finally:
        logger.close()
    ckpt = best[1] if best[1] is not None else _snapshot(module, ema, cfg, "motion",
                                                         start_step + steps)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "motion.ckpt"), ckpt)
    return TrainResult(ckpt, module, logger.records, best[0])


def _validate_motion(ema: EmaShadow, teacher, dataset, val_idx, cfg: TrainConfig,
                     schedule: NoiseSchedule, num_steps: int = 8) -> float:
    eval_net = build_motion(cfg)
    ema.copy_to(eval_net)
    rng = Rng(cfg.seed, 0x43)
    take = val_idx[:min(len(val_idx), 24)]
    plan = make_step_plan(num_steps, schedule.steps)
    errs = []
    with T.no_grad():
        for chunk in range(0, len(take), 8):
            batch = _make_batch(dataset, take[chunk:chunk + 8], rng,
                                cfg.crop_size, augment=False)
            ref = teacher.flow_pair_tensor(batch).detach()
            f0, f1 = Tensor(batch.frame0), Tensor(batch.frame1)
            z = ancestral_sample(
                lambda z_t, t: eval_net.predict_x0(z_t, t, f0, f1),
                ref.shape, plan, schedule, rng.spawn(chunk + 1))
            sampled = denormalize_flow(z).data
            for i in range(sampled.shape[0]):
                errs.append(epe(sampled[i, :2].transpose(1, 2, 0),
                                ref.data[i, :2].transpose(1, 2, 0)))
                errs.append(epe(sampled[i, 2:].transpose(1, 2, 0),
                                ref.data[i, 2:].transpose(1, 2, 0)))
    return float(np.mean(errs))


# ------------------------------------------------------------- inference


def _pad_reflect_np(arr: np.ndarray, mult: int) -> tuple[np.ndarray, int, int]:
    h, w = arr.shape[-2:]
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return arr, ph, pw


def interpolate_frames(motion_net: MotionUNet, synth_net: SynthUNet,
                       frame0: np.ndarray, frame1: np.ndarray, *,
                       num_steps: int = 8, seed: int = 0,
                       train_resolution: int = 64,
                       schedule: NoiseSchedule | None = None,
                       levels: int | None = None) -> tuple[np.ndarray, FlowPair]:
    """Generate flows from noise, then synthesize the middle frame.

    Frames are (3, H, W) in [0, 1] with equal extents. Flows are sampled at
    the training resolution when the input is larger, then bicubically
    upsampled (with magnitude rescaling) back to full size.
    """
    if frame0.shape != frame1.shape:
        raise T.ShapeError(f"frame extents differ: {frame0.shape} vs {frame1.shape}")
    h, w = frame0.shape[-2:]
    if schedule is None:
        schedule = make_linear_schedule(motion_net.config.diffusion_steps)
    if levels is None:
        levels = min(inference_levels(h, w), max_feasible_levels(h, w))
    mult = max(8, 4 * (1 << (levels - 1)))
    f0p, ph, pw = _pad_reflect_np(frame0[None].astype(np.float32), mult)
    f1p, _, _ = _pad_reflect_np(frame1[None].astype(np.float32), mult)
    hp, wp = f0p.shape[-2:]

    gen_h, gen_w = hp, wp
    if min(hp, wp) > train_resolution:
        gen_h = gen_w = train_resolution
    rng = Rng(seed, 0xF10)
    plan = make_step_plan(num_steps, schedule.steps)
    with T.no_grad():
        if (gen_h, gen_w) != (hp, wp):
            g0 = T.resize_to(Tensor(f0p), (gen_h, gen_w), "bilinear")
            g1 = T.resize_to(Tensor(f1p), (gen_h, gen_w), "bilinear")
        else:
            g0, g1 = Tensor(f0p), Tensor(f1p)
        z = ancestral_sample(
            lambda z_t, t: motion_net.predict_x0(z_t, t, g0, g1),
            (1, 4, gen_h, gen_w), plan, schedule, rng)
        flows = denormalize_flow(z)
        if (gen_h, gen_w) != (hp, wp):
            flows = resize_flow(flows, (wp / gen_w, hp / gen_h), "bicubic")
        out = pyramid_synthesize(synth_net, Tensor(f0p), Tensor(f1p), flows,
                                 levels=levels)
    frame = out.data[0, :, :h, :w]
    pair = FlowPair.from_tensor(T.narrow(T.narrow(flows, 2, 0, h), 3, 0, w))
    return frame, pair


def interpolate(frame0: np.ndarray, frame1: np.ndarray,
                motion_ckpt: Checkpoint | str, synth_ckpt: Checkpoint | str,
                num_steps: int = 8, seed: int = 0) -> tuple[np.ndarray, FlowPair]:
    """Checkpoint-level entry point; uses EMA weights."""
    if isinstance(motion_ckpt, str):
        motion_ckpt = load_checkpoint(motion_ckpt)
    if isinstance(synth_ckpt, str):
        synth_ckpt = load_checkpoint(synth_ckpt)
    motion_net = model_from_checkpoint(motion_ckpt)
    synth_net = model_from_checkpoint(synth_ckpt)
    train_res = motion_ckpt.config.get("crop_size", 64)
    return interpolate_frames(motion_net, synth_net, frame0, frame1,
                              num_steps=num_steps, seed=seed,
                              train_resolution=train_res)
