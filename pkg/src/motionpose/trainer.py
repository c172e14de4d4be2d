"""Training loops: joint unsupervised training, pose and action fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, from_model
from .imaging import person_crop, to_image_coords
from .layers import sgd_momentum_step
from .metrics import (SkeletonEval, VideoProtocol, binary_accuracy, decode_heatmaps, eval_action_video, pdj,
                      strict_pcp)
from .nets import JointModel, build_action_net, build_pose_net
from .sampler import BatchConfig, make_batch
from .synth import K

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


def lr_at(schedule, iteration):
    """Learning rate for 0-based ``iteration`` under ``[(lr, count), ...]``."""
    for lr, count in schedule:
        if iteration < count:
            return lr
        iteration -= count
    raise IndexError("iteration beyond the schedule")


def total_iterations(schedule):
    return sum(c for _, c in schedule)


def _emit(logger, **kv):
    line = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in kv.items())
    (logger or log.info)(line)


# ---------------------------------------------------------------- unsupervised


@dataclass
class TrainConfig:
    positives: int = 8
    negatives_per_positive: int = 2
    delta: int = 4
    patch_size: int = 64
    p_flip: float = 0.5
    p_reverse: float = 0.5
    schedule: tuple = ((1e-2, 2000), (1e-3, 1000))
    momentum: float = 0.9
    seed: int = 0
    checkpoint_interval: int = 500
    val_fraction: float = 0.2
    val_batches: int = 25
    nan_patience: int = 3

    @property
    def batch(self):
        return BatchConfig(self.positives, self.negatives_per_positive, self.delta, self.patch_size,
                           self.p_flip, self.p_reverse)


TRAIN_PRESETS = {
    # 128 appearance pairs per batch, each with two in-batch negatives
    "paper": TrainConfig(positives=128, delta=12, patch_size=224, schedule=((1e-3, 75000), (1e-4, 25000)),
                         checkpoint_interval=5000),
    "mini": TrainConfig(),
}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    final_val_acc: float
    train_clips: list
    val_clips: list
    steps: int = 0
    lrs: list = field(default_factory=list)


def validation_batches(corpus, cfg, clip_ids, seed):
    rng = np.random.default_rng([seed, 0x5EED])
    bc = replace(cfg.batch, p_flip=0.0, p_reverse=0.0)
    return [make_batch(corpus, bc, rng, clip_ids) for _ in range(cfg.val_batches)]


def train_unsupervised(corpus, model=None, cfg=None, logger=None, on_checkpoint=None):
    """Joint training of both streams and the fusion head on mined triplets."""
    cfg = cfg or TrainConfig()
    if len(corpus) < 2:
        raise ValueError("unsupervised training needs at least two clips")
    rng = np.random.default_rng(cfg.seed)
    model = model or JointModel("vggm-mini", cfg.delta, rng=np.random.default_rng([cfg.seed, 1]))
    if model.delta != cfg.delta:
        raise ValueError(f"model frame gap {model.delta} differs from config {cfg.delta}")
    train_ids, val_ids = corpus.split(cfg.val_fraction)
    if len(val_ids) < 2:
        val_ids, train_ids = train_ids, train_ids
        log.warning("corpus too small for a clip-disjoint validation split; validating on training clips")
    vbatches = validation_batches(corpus, cfg, val_ids, cfg.seed)
    history, running, bad_streak = [], [], 0
    last_good = from_model(model, history)
    total = total_iterations(cfg.schedule)
    lrs = []
    for it in range(total):
        lr = lr_at(cfg.schedule, it)
        batch = make_batch(corpus, cfg.batch, rng, train_ids)
        loss = T.softmax_cross_entropy(model.forward_batch(batch), batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            bad_streak += 1
            model.params.zero_grad()
            if bad_streak >= cfg.nan_patience:
                raise TrainingDiverged(f"loss non-finite for {bad_streak} consecutive iterations at {it}", last_good)
            continue
        bad_streak = 0
        loss.backward()
        sgd_momentum_step(model.params, lr, cfg.momentum)
        lrs.append(lr)
        running.append(value)
        if (it + 1) % cfg.checkpoint_interval == 0 or it + 1 == total:
            acc = binary_accuracy(model, vbatches)
            rec = (it + 1, float(np.mean(running)), float(acc))
            history.append(rec)
            running = []
            _emit(logger, iter=rec[0], loss=rec[1], val_acc=rec[2])
            last_good = from_model(model, history)
            if on_checkpoint is not None:
                on_checkpoint(last_good)
    acc = history[-1][2] if history else binary_accuracy(model, vbatches)
    return TrainResult(last_good, history, acc, train_ids, val_ids, len(lrs), lrs)


def _limit(ids, limit, rng):
    """At most ``limit`` clip ids, drawn without replacement, original order kept."""
    ids = list(ids)
    if limit is None or len(ids) <= limit:
        return ids
    if limit < 1:
        raise ValueError("train_clip_limit must be at least 1")
    pick = rng.choice(len(ids), size=limit, replace=False)
    return [ids[i] for i in sorted(pick)]


# ---------------------------------------------------------------- pose


@dataclass
class PoseTrainConfig:
    torso_expansion: float = 3.0
    crop_size: int = 64
    heatmap_size: int = 16
    neighborhood_radius: int = 1
    schedule: tuple = ((1e-2, 300),)
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.2
    top_k: int = 5
    train_clip_limit: int | None = None
    arch: str = "vggm-mini"


POSE_PRESETS = {
    "paper": PoseTrainConfig(crop_size=256, heatmap_size=60, top_k=20, arch="vggm-paper"),
    "mini": PoseTrainConfig(),
}


def pose_target_heatmaps(joints, crop_size, heatmap_size, neighborhood_radius=1):
    """``(K, H, H)`` maps of -1 with a (2r+1)^2 block of +1 at each joint."""
    joints = np.asarray(joints, dtype=np.float64)
    if np.any(joints < 0) or np.any(joints > crop_size):
        raise ValueError("joint outside the crop; re-crop before building targets")
    h = heatmap_size
    r = neighborhood_radius
    out = -np.ones((len(joints), h, h), dtype=np.float32)
    hm = np.clip(np.round(joints * (h / crop_size)).astype(int), 0, h - 1)
    for k, (x, y) in enumerate(hm):
        out[k, max(y - r, 0):y + r + 1, max(x - r, 0):x + r + 1] = 1.0
    return out


def reweight_mask(target):
    """Per-pixel weights 1/P on positive and 1/N on negative pixels of each map."""
    target = np.asarray(target)
    pos = target > 0
    axes = tuple(range(target.ndim - 2, target.ndim))
    p = pos.sum(axis=axes, keepdims=True)
    n = (~pos).sum(axis=axes, keepdims=True)
    if np.any(p == 0) or np.any(n == 0):
        raise ValueError("every heatmap needs at least one positive and one negative pixel")
    return np.where(pos, 1.0 / p, 1.0 / n)


def reweighted_euclidean_grad(pred, target):
    """``(pred - target)`` scaled per pixel by 1/P (positives) or 1/N (negatives)."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    return (pred - target) * reweight_mask(target)


@dataclass
class PoseData:
    crops: np.ndarray  # (N, 1, S, S)
    targets: np.ndarray  # (N, K, H, H)
    joints: np.ndarray  # (N, K, 2) image coordinates
    transforms: list
    keys: list


def pose_dataset(corpus, clip_ids, cfg):
    crops, targets, joints, tfs, keys = [], [], [], [], []
    for cid in clip_ids:
        clip = corpus.load_clip(cid)
        if clip.joints is None:
            raise ValueError(f"clip {cid} has no joint annotations")
        for t in range(clip.frame_count):
            crop, local, tf = person_crop(clip.frames[t], clip.joints[t], cfg.torso_expansion, cfg.crop_size)
            crops.append(crop[None])
            targets.append(pose_target_heatmaps(local, cfg.crop_size, cfg.heatmap_size, cfg.neighborhood_radius))
            joints.append(clip.joints[t])
            tfs.append(tf)
            keys.append((cid, t))
    return PoseData(np.stack(crops), np.stack(targets), np.array(joints), tfs, keys)


@dataclass
class PoseResult:
    net: object
    checkpoint: Checkpoint
    history: list
    losses: list
    train_clips: list
    val_clips: list


def finetune_pose(corpus, init=None, cfg=None, logger=None, clip_ids=None):
    """Train the pose network; ``init`` is an appearance ParamSet/Checkpoint or None (random)."""
    cfg = cfg or PoseTrainConfig()
    if isinstance(init, Checkpoint):
        init = init.layer_params()
    rng = np.random.default_rng(cfg.seed)
    net = build_pose_net(init, K, cfg.heatmap_size, cfg.crop_size, cfg.arch, rng=np.random.default_rng([cfg.seed, 2]))
    sub = corpus if clip_ids is None else corpus.subset(clip_ids)
    train_ids, val_ids = sub.split(cfg.val_fraction)
    train_ids = _limit(train_ids, cfg.train_clip_limit, rng)
    data = pose_dataset(corpus, train_ids, cfg)
    weights = reweight_mask(data.targets)
    losses, history = [], []
    total = total_iterations(cfg.schedule)
    for it in range(total):
        idx = rng.choice(len(data.crops), size=min(cfg.batch_size, len(data.crops)), replace=False)
        pred = net(data.crops[idx])
        # 1/(K*B): average of the per-map reweighted gradients over maps and batch
        loss = T.euclidean_loss(pred, data.targets[idx], weight=weights[idx], scale=1.0 / (K * len(idx)))
        loss.backward()
        sgd_momentum_step(net.params, lr_at(cfg.schedule, it), cfg.momentum)
        losses.append(loss.item())
        if (it + 1) % 100 == 0 or it + 1 == total:
            rec = (it + 1, float(np.mean(losses[-100:])), float("nan"))
            history.append(rec)
            _emit(logger, iter=rec[0], loss=rec[1])
    return PoseResult(net, from_model(net, history), history, losses, train_ids, val_ids)


def predict_pose(net, crops, transforms, top_k, chunk=128):
    """Joint predictions in image coordinates plus raw heatmaps."""
    maps = np.concatenate([net(crops[i:i + chunk]).data for i in range(0, len(crops), chunk)])
    h = maps.shape[-1]
    s = crops.shape[-1]
    preds = np.array([to_image_coords(decode_heatmaps(m, top_k) * (s / h), tf) for m, tf in zip(maps, transforms)])
    return preds, maps


@dataclass
class PoseEval:
    pcp: object
    pdj: object
    preds: np.ndarray
    gt: np.ndarray
    positive_pixels_per_map: np.ndarray  # (N, K) counts of heatmap pixels > 0


def evaluate_pose(net, corpus, clip_ids, cfg=None, skel=None):
    cfg = cfg or PoseTrainConfig()
    data = pose_dataset(corpus, clip_ids, cfg)
    preds, maps = predict_pose(net, data.crops, data.transforms, cfg.top_k)
    skel = skel or SkeletonEval()
    return PoseEval(strict_pcp(preds, data.joints, skel), pdj(preds, data.joints, skel), preds, data.joints,
                    (maps > 0).sum(axis=(2, 3)))


# ---------------------------------------------------------------- action


@dataclass
class ActionTrainConfig:
    num_classes: int = 4
    freeze_trunk: bool = False
    schedule: tuple = ((1e-2, 300),)
    momentum: float = 0.9
    batch_size: int = 32
    crop_size: int = 64
    train_clip_limit: int | None = None
    seed: int = 0
    val_fraction: float = 0.2
    hidden_dim: int | None = None
    arch: str = "vggm-mini"


ACTION_PRESETS = {
    "paper": ActionTrainConfig(num_classes=101, schedule=((1e-3, 14000), (1e-4, 6000)), batch_size=256,
                               crop_size=224, hidden_dim=2048, arch="vggm-paper"),
    "mini": ActionTrainConfig(),
}


@dataclass
class ActionResult:
    net: object
    checkpoint: Checkpoint
    history: list
    losses: list
    train_clips: list
    val_clips: list


def finetune_action(corpus, init=None, cfg=None, logger=None, clip_ids=None, val_ids=None):
    """Softmax classifier on random single-frame crops of labelled clips."""
    cfg = cfg or ActionTrainConfig()
    if isinstance(init, Checkpoint):
        init = init.layer_params()
    rng = np.random.default_rng(cfg.seed)
    net = build_action_net(init, cfg.num_classes, cfg.hidden_dim, cfg.arch, rng=np.random.default_rng([cfg.seed, 3]))
    if clip_ids is None:
        clip_ids, split_val = corpus.split(cfg.val_fraction)
        val_ids = split_val if val_ids is None else val_ids
    train_ids = list(clip_ids)
    if val_ids is not None and set(train_ids) & set(val_ids):
        raise ValueError("training and validation clips overlap")
    train_ids = _limit(train_ids, cfg.train_clip_limit, rng)
    clips = [corpus.load_clip(c) for c in train_ids]
    for c in clips:
        if c.action_label is None:
            raise ValueError(f"clip {c.clip_id} has no action label")
        if not 0 <= c.action_label < cfg.num_classes:
            raise ValueError(f"clip {c.clip_id}: label {c.action_label} >= num_classes {cfg.num_classes}")
    only = net.head_names if cfg.freeze_trunk else None
    s = cfg.crop_size
    losses, history = [], []
    total = total_iterations(cfg.schedule)
    for it in range(total):
        xs, ys = [], []
        for _ in range(cfg.batch_size):
            c = clips[int(rng.integers(len(clips)))]
            f = c.frames[int(rng.integers(c.frame_count))]
            h, w = f.shape
            y0, x0 = int(rng.integers(h - s + 1)), int(rng.integers(w - s + 1))
            xs.append(f[None, y0:y0 + s, x0:x0 + s])
            ys.append(c.action_label)
        loss = T.softmax_cross_entropy(net(np.stack(xs)), np.array(ys))
        loss.backward()
        sgd_momentum_step(net.params, lr_at(cfg.schedule, it), cfg.momentum, only=only)
        losses.append(loss.item())
        if (it + 1) % 100 == 0 or it + 1 == total:
            rec = (it + 1, float(np.mean(losses[-100:])), float("nan"))
            history.append(rec)
            _emit(logger, iter=rec[0], loss=rec[1])
    return ActionResult(net, from_model(net, history), history, losses, train_ids, list(val_ids or []))


def evaluate_action(net, corpus, clip_ids, protocol=None):
    """Clip-level accuracy with the multi-crop video protocol."""
    protocol = protocol or VideoProtocol()
    preds, labels = [], []
    for cid in clip_ids:
        clip = corpus.load_clip(cid)
        preds.append(eval_action_video(lambda x: net(x).data, clip, protocol).label)
        labels.append(clip.action_label)
    return float(np.mean(np.array(preds) == np.array(labels))), preds, labels
