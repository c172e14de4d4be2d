"""Heatmap decoding, Strict PCP, PDJ, surrogate accuracy, video-level action
evaluation and the FC6 nearest-neighbour pose probe."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import synth
from .imaging import CropError, person_crop


@dataclass(frozen=True)
class SkeletonEval:
    limbs: tuple = synth.LIMBS
    torso_pair: tuple = synth.TORSO_PAIR
    alpha: float = 0.5
    thresholds: tuple = (0.1, 0.2, 0.3, 0.4)
    joint_names: tuple = synth.JOINT_NAMES
    groups: dict = field(default_factory=lambda: {"upper_arms": ("l_upper_arm", "r_upper_arm"),
                                                  "lower_arms": ("l_lower_arm", "r_lower_arm")})

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("PCP alpha must be in (0, 1]")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("PDJ thresholds must be ascending")


# ---------------------------------------------------------------- heatmaps


def decode_heatmap(hmap, top_k=20):
    """Unweighted centroid ``(x, y)`` of the ``top_k`` highest pixels.

    Ties at the cut-off go to the earlier pixel in row-major order.
    """
    hmap = np.asarray(hmap)
    h, w = hmap.shape
    if top_k > h * w:
        raise ValueError(f"top_k={top_k} exceeds the {h}x{w} map")
    flat = hmap.reshape(-1)
    # stable sort on the negated values keeps row-major order among equals
    idx = np.argsort(-flat, kind="stable")[:top_k]
    ys, xs = np.divmod(idx, w)
    return float(xs.mean()), float(ys.mean())


def decode_heatmaps(maps, top_k=20):
    return np.array([decode_heatmap(m, top_k) for m in maps])


# ---------------------------------------------------------------- PCP / PDJ


@dataclass
class PCPResult:
    limbs: dict  # limb name -> correct fraction
    groups: dict  # group name -> correct fraction
    degenerate: int = 0


def strict_pcp(pred, gt, skel=None):
    """Strict PCP over a set of poses (``(N, K, 2)`` or a single ``(K, 2)``)."""
    skel = skel or SkeletonEval()
    pred, gt = _as_sets(pred, gt, skel)
    correct = {name: [] for name, _, _ in skel.limbs}
    degenerate = 0
    for p, g in zip(pred, gt):
        for name, a, b in skel.limbs:
            length = np.linalg.norm(g[a] - g[b])
            if length == 0:
                degenerate += 1
                continue
            ok = (np.linalg.norm(p[a] - g[a]) <= skel.alpha * length) and (np.linalg.norm(p[b] - g[b]) <= skel.alpha * length)
            correct[name].append(ok)
    limbs = {n: (float(np.mean(v)) if v else float("nan")) for n, v in correct.items()}
    groups = {}
    for gname, members in skel.groups.items():
        vals = [x for m in members for x in correct.get(m, [])]
        groups[gname] = float(np.mean(vals)) if vals else float("nan")
    return PCPResult(limbs, groups, degenerate)


@dataclass
class PDJResult:
    table: dict  # joint name -> {threshold: detection rate}
    thresholds: tuple
    skipped: int = 0

    def rate(self, joint, t):
        return self.table[joint][t]

    def overall(self, t):
        return float(np.mean([row[t] for row in self.table.values()]))


def pdj(pred, gt, skel=None, thresholds=None):
    """Detected iff ``||pred - gt|| <= t * torso diameter`` (torso pair from the GT)."""
    skel = skel or SkeletonEval()
    thresholds = tuple(thresholds or skel.thresholds)
    pred, gt = _as_sets(pred, gt, skel)
    a, b = skel.torso_pair
    diam = np.linalg.norm(gt[:, a] - gt[:, b], axis=1)
    keep = diam > 0
    skipped = int((~keep).sum())
    err = np.linalg.norm(pred - gt, axis=2)[keep] / diam[keep, None]
    table = {}
    for j, name in enumerate(skel.joint_names):
        table[name] = {t: (float(np.mean(err[:, j] <= t)) if len(err) else float("nan")) for t in thresholds}
    return PDJResult(table, thresholds, skipped)


def _as_sets(pred, gt, skel):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape or pred.shape[1] != len(skel.joint_names):
        raise ValueError(f"pose arrays {pred.shape} / {gt.shape} do not match {len(skel.joint_names)} joints")
    return pred, gt


# ---------------------------------------------------------------- surrogate task


def binary_accuracy(model, batches):
    """Fraction of triplets whose argmax score equals the label."""
    ok = n = 0
    for b in batches:
        scores = model.forward_batch(b).data
        ok += int((scores.argmax(axis=1) == b.labels).sum())
        n += len(b)
    return ok / n if n else float("nan")


def accuracy_of_predictions(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float((pred == labels).mean())


# ---------------------------------------------------------------- action videos


@dataclass(frozen=True)
class VideoProtocol:
    num_frames: int = 25
    crops: str = "corners+center"  # or "center"
    flips: bool = True
    crop_size: int = 64

    @property
    def samples_per_video(self):
        return self.num_frames * (5 if self.crops == "corners+center" else 1) * (2 if self.flips else 1)


@dataclass
class VideoPrediction:
    label: int
    scores: np.ndarray
    num_samples: int


def video_samples(frames, protocol):
    """``(num_samples, 1, S, S)`` crops for one clip under ``protocol``."""
    f = len(frames)
    idx = np.round(np.linspace(0, f - 1, protocol.num_frames)).astype(int) if f > 1 else np.zeros(protocol.num_frames, int)
    h, w = frames.shape[1:]
    s = protocol.crop_size
    if s > min(h, w):
        raise ValueError(f"crop {s} larger than frame {h}x{w}")
    origins = [((h - s) // 2, (w - s) // 2)]
    if protocol.crops == "corners+center":
        origins = [(0, 0), (0, w - s), (h - s, 0), (h - s, w - s)] + origins
    elif protocol.crops != "center":
        raise ValueError(f"unknown crop scheme {protocol.crops!r}")
    out = []
    for i in idx:
        for y, x in origins:
            c = frames[i, y:y + s, x:x + s]
            out.append(c)
            if protocol.flips:
                out.append(c[:, ::-1])
    return np.ascontiguousarray(np.stack(out)[:, None], dtype=np.float32)


def eval_action_video(model, clip, protocol=None, frames=None):
    """Average class probabilities over all protocol samples; return the argmax.

    ``model`` maps an ``(N, 1, S, S)`` array to ``(N, classes)`` scores.
    """
    protocol = protocol or VideoProtocol()
    frames = clip.frames if frames is None else frames
    x = video_samples(frames, protocol)
    scores = model(x)
    scores = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    if len(scores) != len(x):
        raise RuntimeError("model returned a different number of score rows than samples")
    z = scores - scores.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    mean = probs.mean(axis=0)
    return VideoPrediction(int(mean.argmax()), mean, len(x))


# ---------------------------------------------------------------- nearest-neighbour probe


def normalized_layout(joints, torso_pair=synth.TORSO_PAIR):
    joints = np.asarray(joints, dtype=np.float64)
    centre = joints[list(synth.TORSO_BOX_JOINTS)].mean(axis=0)
    diam = np.linalg.norm(joints[torso_pair[0]] - joints[torso_pair[1]])
    return (joints - centre) / max(diam, 1e-9)


def layout_distance(a, b):
    return float(np.linalg.norm(normalized_layout(a) - normalized_layout(b), axis=1).mean())


def permutation_pvalue(x, y, rng, n_perm=5000, alternative="less"):
    """Permutation test on ``mean(x) - mean(y)``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    obs = x.mean() - y.mean()
    pooled = np.concatenate([x, y])
    n = len(x)
    stats = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(pooled)
        stats[i] = p[:n].mean() - p[n:].mean()
    if alternative == "less":
        hits = np.sum(stats <= obs)
    elif alternative == "greater":
        hits = np.sum(stats >= obs)
    else:
        hits = np.sum(np.abs(stats) >= abs(obs))
    return float((hits + 1) / (n_perm + 1))


@dataclass
class ProbeReport:
    neighbor_distance: float
    random_distance: float
    p_less: float
    p_two_sided: float
    neighbor_distances: np.ndarray
    random_distances: np.ndarray
    pairs: list  # (query (clip, frame), neighbour (clip, frame))


def probe_items(clips, input_size, expansion=3.0, stride=1):
    """Torso-centred crops, joints and (clip, frame) keys for probe frames."""
    crops, joints, keys = [], [], []
    for c in clips:
        if c.joints is None:
            raise ValueError(f"probe clip {c.clip_id} has no joint annotations")
        for t in range(0, c.frame_count, stride):
            try:
                crop, _, _ = person_crop(c.frames[t], c.joints[t], expansion, input_size)
            except CropError:
                continue
            crops.append(crop[None])
            joints.append(c.joints[t])
            keys.append((c.clip_id, t))
    return np.stack(crops), np.array(joints), keys


def nn_probe(features_fn, clips, num_queries, rng, input_size=64, expansion=3.0, stride=1, n_perm=5000, items=None):
    """Retrieve FC6 nearest neighbours from other clips and compare pose layouts.

    ``features_fn`` maps ``(N, 1, S, S)`` crops to ``(N, D)`` features.
    """
    crops, joints, keys = items if items is not None else probe_items(clips, input_size, expansion, stride)
    feats = np.asarray(features_fn(crops), dtype=np.float64)
    clip_of = np.array([k[0] for k in keys])
    sq = (feats ** 2).sum(axis=1)
    queries = rng.choice(len(keys), size=min(num_queries, len(keys)), replace=False)
    nn_d, rand_d, pairs = [], [], []
    for q in queries:
        cand = np.flatnonzero(clip_of != clip_of[q])
        if len(cand) == 0:
            raise ValueError("probe needs frames from at least two clips")
        d = sq[cand] - 2 * feats[cand] @ feats[q] + sq[q]
        best = cand[int(np.argmin(d))]
        other = cand[int(rng.integers(len(cand)))]
        nn_d.append(layout_distance(joints[q], joints[best]))
        rand_d.append(layout_distance(joints[q], joints[other]))
        pairs.append((keys[q], keys[best]))
    nn_d, rand_d = np.array(nn_d), np.array(rand_d)
    return ProbeReport(float(nn_d.mean()), float(rand_d.mean()),
                       permutation_pvalue(nn_d, rand_d, rng, n_perm, "less"),
                       permutation_pvalue(nn_d, rand_d, rng, n_perm, "two-sided"),
                       nn_d, rand_d, pairs)
