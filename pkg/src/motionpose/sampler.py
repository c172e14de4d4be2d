"""Triplet mining for the appearance/motion agreement task.

A positive pairs two crops of clip ``i`` taken ``delta`` frames apart with
the flow block between them at the same crop.  Negatives keep the
appearance pair and substitute a flow block from a different clip; flow
from the same clip at another time is never used as a negative.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .flow import FlowBlock, hflip_flow, reverse_flow_block


class SamplingError(ValueError):
    pass


@dataclass
class TripletSample:
    patch_a: np.ndarray  # (C, P, P) frame n
    patch_b: np.ndarray  # (C, P, P) frame n + delta, same crop
    flow_block: np.ndarray  # (2*delta, P, P), interleaved u, v
    label: int
    app_clip: str
    app_frame: int
    app_crop: tuple  # (x, y)
    flow_clip: str
    flow_frame: int
    flow_crop: tuple
    flipped: bool = False
    reversed: bool = False

    @property
    def provenance(self):
        return (self.app_clip, self.app_frame), (self.flow_clip, self.flow_frame)


@dataclass
class BatchConfig:
    positives: int = 8
    negatives_per_positive: int = 2
    delta: int = 4
    patch_size: int = 64
    p_flip: float = 0.5
    p_reverse: float = 0.5

    @property
    def size(self):
        return self.positives * (1 + self.negatives_per_positive)


@dataclass
class Batch:
    """Positives' appearance pairs plus index lists selecting the triplets.

    Sample ``s`` is ``(patch_a[app_index[s]], patch_b[app_index[s]],
    flows[flow_index[s]])`` with label ``labels[s]``.  Flow rows beyond the
    positives are extra blocks drawn when in-batch mining had no clip-disjoint
    partner.
    """

    positives: list
    flows: np.ndarray
    flow_meta: list  # (clip, frame, crop) per flow row
    app_index: np.ndarray
    flow_index: np.ndarray
    labels: np.ndarray

    @property
    def patch_a(self):
        return np.stack([p.patch_a for p in self.positives])

    @property
    def patch_b(self):
        return np.stack([p.patch_b for p in self.positives])

    def __len__(self):
        return len(self.labels)

    @property
    def samples(self):
        out = []
        for a, f, y in zip(self.app_index, self.flow_index, self.labels):
            p = self.positives[a]
            clip, frame, crop = self.flow_meta[f]
            out.append(replace(p, flow_block=self.flows[f], label=int(y), flow_clip=clip, flow_frame=frame, flow_crop=crop))
        return out


def _eligible(corpus, delta, patch_size, clip_ids=None):
    ids = corpus.clip_ids if clip_ids is None else list(clip_ids)
    out = []
    for cid in ids:
        c = corpus.load_clip(cid)
        h, w = c.frame_size
        if c.frame_count >= delta + 1 and patch_size <= min(h, w):
            out.append(cid)
    if not out:
        raise SamplingError(f"no clip has >= {delta + 1} frames and frame size >= {patch_size}")
    return out


def _crop_origin(clip, patch_size, rng):
    h, w = clip.frame_size
    return int(rng.integers(0, w - patch_size + 1)), int(rng.integers(0, h - patch_size + 1))


def _flow_block(clip, frame, delta, crop, patch_size):
    try:
        flows = clip.flows
    except Exception as exc:
        raise SamplingError(f"clip {clip.clip_id}: flows unavailable ({exc})") from None
    x, y = crop
    blk = flows[frame:frame + delta, :, y:y + patch_size, x:x + patch_size]
    return np.ascontiguousarray(blk.reshape(2 * delta, patch_size, patch_size))


def _patch(clip, frame, crop, patch_size):
    x, y = crop
    return np.ascontiguousarray(clip.frames[frame, y:y + patch_size, x:x + patch_size][None])


def sample_positive(corpus, delta, patch_size, rng, clip_ids=None, clip_id=None):
    """Aligned (frame n, frame n+delta, flow block) triplet with label 1."""
    pool = _eligible(corpus, delta, patch_size, clip_ids) if clip_id is None else [clip_id]
    clip = corpus.load_clip(pool[int(rng.integers(len(pool)))])
    n = int(rng.integers(0, clip.frame_count - delta))
    crop = _crop_origin(clip, patch_size, rng)
    block = _flow_block(clip, n, delta, crop, patch_size)
    return TripletSample(
        _patch(clip, n, crop, patch_size), _patch(clip, n + delta, crop, patch_size), block, 1,
        clip.clip_id, n, crop, clip.clip_id, n, crop)


def sample_negative(corpus, positive, rng, clip_ids=None):
    """Same appearance pair, flow block from a random location of another clip."""
    delta = positive.flow_block.shape[0] // 2
    size = positive.patch_a.shape[-1]
    pool = [c for c in _eligible(corpus, delta, size, clip_ids) if c != positive.app_clip]
    if not pool:
        raise SamplingError("negative mining needs at least two eligible clips")
    clip = corpus.load_clip(pool[int(rng.integers(len(pool)))])
    k = int(rng.integers(0, clip.frame_count - delta))
    crop = _crop_origin(clip, size, rng)
    return replace(positive, flow_block=_flow_block(clip, k, delta, crop, size), label=0,
                   flow_clip=clip.clip_id, flow_frame=k, flow_crop=crop)


def flip_block(channels):
    blk = FlowBlock.from_channels(channels)
    return FlowBlock([hflip_flow(f) for f in blk.fields]).to_channels()


def reverse_block(channels):
    return reverse_flow_block(FlowBlock.from_channels(channels)).to_channels()


def augment(sample, rng, p_flip=0.5, p_reverse=0.5):
    """Random horizontal flip of the whole triplet and random temporal reversal."""
    s = sample
    if rng.random() < p_flip:
        s = replace(s, patch_a=np.ascontiguousarray(s.patch_a[..., ::-1]),
                    patch_b=np.ascontiguousarray(s.patch_b[..., ::-1]),
                    flow_block=flip_block(s.flow_block), flipped=not s.flipped)
    if rng.random() < p_reverse:
        s = replace(s, patch_a=s.patch_b, patch_b=s.patch_a,
                    flow_block=reverse_block(s.flow_block), reversed=not s.reversed)
    return s


def make_batch(corpus, cfg, rng, clip_ids=None):
    """``positives * (1 + negatives_per_positive)`` triplets with in-batch negatives.

    Positives come from distinct clips whenever the pool is large enough, so
    every other positive's flow block is a valid cross-clip negative.  When no
    clip-disjoint partner exists a fresh block is drawn from another clip.
    """
    pool = _eligible(corpus, cfg.delta, cfg.patch_size, clip_ids)
    if len(pool) < 2 and cfg.negatives_per_positive > 0:
        raise SamplingError("negative mining needs at least two eligible clips")
    replace_draw = len(pool) < cfg.positives
    chosen = rng.choice(len(pool), size=cfg.positives, replace=replace_draw)
    positives = [augment(sample_positive(corpus, cfg.delta, cfg.patch_size, rng, clip_id=pool[i]),
                         rng, cfg.p_flip, cfg.p_reverse) for i in chosen]
    flows = [p.flow_block for p in positives]
    meta = [(p.flow_clip, p.flow_frame, p.flow_crop) for p in positives]
    app_idx, flow_idx, labels = [], [], []
    for i, p in enumerate(positives):
        app_idx.append(i)
        flow_idx.append(i)
        labels.append(1)
        partners = [j for j, q in enumerate(positives) if q.app_clip != p.app_clip]
        take = min(cfg.negatives_per_positive, len(partners))
        picks = list(rng.choice(partners, size=take, replace=False)) if take else []
        for _ in range(cfg.negatives_per_positive - take):
            neg = augment(sample_negative(corpus, p, rng, pool), rng, cfg.p_flip, 0.0)
            flows.append(neg.flow_block)
            meta.append((neg.flow_clip, neg.flow_frame, neg.flow_crop))
            picks.append(len(flows) - 1)
        for j in picks:
            app_idx.append(i)
            flow_idx.append(int(j))
            labels.append(0)
    return Batch(positives, np.stack(flows), meta, np.array(app_idx), np.array(flow_idx), np.array(labels))
