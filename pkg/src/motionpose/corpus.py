"""On-disk video corpus: synthetic generation, ingestion, flow precomputation.

Layout::

    <root>/index.txt                    clip ids, one per line
    <root>/<clip>/frames/00000.pgm      8-bit binary PGM frames
    <root>/<clip>/flow/00000.flo1       flow from frame i to i+1
    <root>/<clip>/joints.txt            one line per frame: x1,y1,...,x9,y9
    <root>/<clip>/label.txt             integer action id
"""
from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import synth
from .flow import FlowFormatError, estimate_flow, read_flo1, write_flo1

log = logging.getLogger(__name__)

FRAME_RE = re.compile(r"^(\d+)\.pgm$")


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------- PGM


def write_pgm(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path, rgb):
    """Binary 8-bit PPM from an ``(H, W, 3)`` array in [0, 1] (or uint8)."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_pgm(path):
    """Binary 8-bit PGM -> uint8 array."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise CorpusError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise CorpusError(f"{path}: truncated image data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- joints


def format_joints(joints):
    return ",".join(f"{v:.4f}" for v in np.asarray(joints, dtype=np.float64).reshape(-1))


def parse_joints(path, clip_id="", k=synth.K):
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            vals = [float(v) for v in line.split(",")]
        except ValueError as exc:
            raise CorpusError(f"{clip_id}: joints line {lineno} (frame {lineno - 1}): {exc}") from None
        if len(vals) != 2 * k:
            raise CorpusError(
                f"{clip_id}: joints line {lineno} (frame {lineno - 1}) has {len(vals) / 2:g} points, expected {k}")
        out.append(np.array(vals).reshape(k, 2))
    return np.array(out)


# ---------------------------------------------------------------- clips


class VideoClip:
    """One clip; frames and flows load lazily, joints eagerly."""

    def __init__(self, root, clip_id, frame_count, frame_size, action_label=None, joints=None):
        self.root = Path(root)
        self.clip_id = clip_id
        self.frame_count = frame_count
        self.frame_size = frame_size  # (height, width)
        self.action_label = action_label
        self.joints = joints
        self._frames = None
        self._flows = None

    def __repr__(self):
        return f"VideoClip({self.clip_id!r}, frames={self.frame_count}, label={self.action_label})"

    @property
    def path(self):
        return self.root / self.clip_id

    def frame_path(self, i):
        return self.path / "frames" / f"{i:05d}.pgm"

    def flow_path(self, i):
        return self.path / "flow" / f"{i:05d}.flo1"

    @property
    def has_joints(self):
        return self.joints is not None

    @property
    def flow_paths(self):
        return [self.flow_path(i) for i in range(self.frame_count - 1)]

    @property
    def has_flows(self):
        return all(p.exists() for p in self.flow_paths)

    @property
    def frames(self):
        """``(F, H, W)`` float32 in [0, 1]."""
        if self._frames is None:
            self._frames = np.stack([read_pgm(self.frame_path(i)) for i in range(self.frame_count)]).astype(np.float32) / 255.0
        return self._frames

    @property
    def flows(self):
        """``(F-1, 2, H, W)`` float32 (u, v) stack."""
        if self._flows is None:
            missing = [p.name for p in self.flow_paths if not p.exists()]
            if missing:
                raise CorpusError(f"{self.clip_id}: missing flow files {missing[:3]}{'...' if len(missing) > 3 else ''}")
            fs = [read_flo1(p) for p in self.flow_paths]
            self._flows = np.stack([np.stack([f.u, f.v]) for f in fs])
        return self._flows

    def drop_cache(self):
        self._frames = self._flows = None


class Corpus:
    """Immutable index over a corpus directory."""

    def __init__(self, root, clips):
        self.root = Path(root)
        self._clips = {c.clip_id: c for c in clips}
        self.clip_ids = [c.clip_id for c in clips]

    def __len__(self):
        return len(self.clip_ids)

    def __iter__(self):
        return (self._clips[i] for i in self.clip_ids)

    def __contains__(self, clip_id):
        return clip_id in self._clips

    def load_clip(self, clip_id):
        try:
            return self._clips[clip_id]
        except KeyError:
            raise KeyError(f"clip {clip_id!r} not in corpus {self.root}") from None

    def subset(self, clip_ids):
        return Corpus(self.root, [self._clips[i] for i in clip_ids])

    def split(self, val_fraction=0.2):
        """Deterministic clip-level split by md5 of the clip id."""
        if not 0 <= val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        ranked = sorted(self.clip_ids, key=lambda c: hashlib.md5(c.encode()).hexdigest())
        n_val = int(np.ceil(val_fraction * len(ranked))) if val_fraction > 0 else 0
        n_val = min(n_val, max(len(ranked) - 1, 0))
        val = set(ranked[:n_val])
        return ([c for c in self.clip_ids if c not in val], [c for c in self.clip_ids if c in val])

    @property
    def num_classes(self):
        labels = [c.action_label for c in self if c.action_label is not None]
        return max(labels) + 1 if labels else 0


def load_clip(corpus, clip_id):
    return corpus.load_clip(clip_id)


def ingest_frames(root, k=synth.K):
    """Build a :class:`Corpus` from a directory of clip subdirectories.

    Clip order follows ``index.txt`` if present, otherwise sorted directory
    names.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"{root}: not a directory")
    index = root / "index.txt"
    if index.exists():
        ids = [l.strip() for l in index.read_text().splitlines() if l.strip()]
    else:
        ids = sorted(p.name for p in root.iterdir() if (p / "frames").is_dir())
    clips = []
    for cid in ids:
        fdir = root / cid / "frames"
        if not fdir.is_dir():
            raise CorpusError(f"{cid}: no frames directory")
        nums = sorted(int(m.group(1)) for m in (FRAME_RE.match(p.name) for p in fdir.iterdir()) if m)
        if not nums:
            raise CorpusError(f"{cid}: no frames")
        gaps = sorted(set(range(nums[-1] + 1)) - set(nums))
        if gaps:
            raise CorpusError(f"{cid}: non-contiguous frame numbering, missing {gaps}")
        size = read_pgm(fdir / f"{0:05d}.pgm").shape
        joints = label = None
        jpath = root / cid / "joints.txt"
        if jpath.exists():
            joints = parse_joints(jpath, cid, k)
            if len(joints) != len(nums):
                raise CorpusError(f"{cid}: {len(joints)} joint records for {len(nums)} frames")
        lpath = root / cid / "label.txt"
        if lpath.exists():
            try:
                label = int(lpath.read_text().strip())
            except ValueError:
                raise CorpusError(f"{cid}: label.txt is not an integer") from None
        clips.append(VideoClip(root, cid, len(nums), size, label, joints))
    return Corpus(root, clips)


# ---------------------------------------------------------------- generation


@dataclass
class CorpusConfig:
    num_clips: int = 40
    frames_per_clip: int = 30
    frame_size: int = 96
    actions: tuple = synth.DEFAULT_ACTIONS
    amplitude_jitter: float = 0.2
    frequency_jitter: float = 0.15
    position_jitter: float = 8.0

    def to_dict(self):
        d = asdict(self)
        d["actions"] = list(self.actions)
        return d


def _clip_params(cfg, rng, script):
    c = cfg.frame_size / 2
    return synth.ClipParams(
        phase=float(rng.uniform(0, 2 * np.pi)),
        amp_scale=float(rng.uniform(1 - cfg.amplitude_jitter, 1 + cfg.amplitude_jitter)),
        freq_scale=float(rng.uniform(1 - cfg.frequency_jitter, 1 + cfg.frequency_jitter)),
        root=(float(c + rng.uniform(-cfg.position_jitter, cfg.position_jitter)),
              float(c + 8 + rng.uniform(-cfg.position_jitter / 2, cfg.position_jitter / 2))),
        velocity_sign=float(rng.choice([-1.0, 1.0])),
    )


def synthesize_clip(cfg, script, rng):
    """Frames (F, S, S) in [0, 1] and joints (F, K, 2) for one clip."""
    size = cfg.frame_size
    for _ in range(100):
        params = _clip_params(cfg, rng, script)
        poses = [synth.forward_kinematics(script, params, t) for t in range(cfg.frames_per_clip)]
        pts = np.array([[p[n] for n in synth.BONE_INDEX] for p in poses])
        if pts.min() >= 2 and pts.max() <= size - 3:
            break
    else:  # pragma: no cover - jitter ranges are far from this
        raise CorpusError("could not place the figure inside the frame")
    bg = synth.smooth_noise(rng, size)
    frames = np.stack([synth.render_frame(bg, p) for p in poses])
    joints = np.array([[p[n] for n in synth.JOINT_NAMES] for p in poses])
    return frames, joints, params


def generate_corpus(out_dir, cfg=None, seed=0):
    """Write a synthetic corpus and return its :class:`Corpus` index."""
    cfg = cfg or CorpusConfig()
    unknown = [a for a in cfg.actions if a not in synth.ACTIONS]
    if unknown:
        raise CorpusError(f"unknown actions {unknown}; available: {list(synth.ACTIONS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(cfg.num_clips)
    ids = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        action = cfg.actions[i % len(cfg.actions)]
        frames, joints, _ = synthesize_clip(cfg, synth.ACTIONS[action], rng)
        cid = f"clip_{i:04d}"
        fdir = out / cid / "frames"
        fdir.mkdir(parents=True, exist_ok=True)
        for t, fr in enumerate(frames):
            write_pgm(fdir / f"{t:05d}.pgm", fr)
        (out / cid / "joints.txt").write_text("\n".join(format_joints(j) for j in joints) + "\n")
        (out / cid / "label.txt").write_text(f"{cfg.actions.index(action)}\n")
        ids.append(cid)
    (out / "index.txt").write_text("\n".join(ids) + "\n")
    return ingest_frames(out)


# ---------------------------------------------------------------- flows


@dataclass
class FlowParams:
    alpha: float = 15.0
    iterations: int = 100
    pyramid_levels: int = 3


@dataclass
class PrecomputeReport:
    written: int = 0
    skipped: int = 0
    warnings: list = field(default_factory=list)


def _clip_flows(args):
    clip_dir, frame_count, shape, params = args
    report = PrecomputeReport()
    (clip_dir / "flow").mkdir(exist_ok=True)
    prev = None
    for i in range(frame_count - 1):
        path = clip_dir / "flow" / f"{i:05d}.flo1"
        if path.exists():
            try:
                f = read_flo1(path)
                if (f.height, f.width) == tuple(shape):
                    report.skipped += 1
                    continue
                raise FlowFormatError(f"{path}: size {(f.height, f.width)} does not match frames {tuple(shape)}")
            except FlowFormatError as exc:
                report.warnings.append(f"recomputed corrupt flow file: {exc}")
        a = prev if prev is not None and prev[0] == i else (i, read_pgm(clip_dir / "frames" / f"{i:05d}.pgm") / 255.0)
        b = read_pgm(clip_dir / "frames" / f"{i + 1:05d}.pgm") / 255.0
        prev = (i + 1, b)
        f = estimate_flow(a[1], b, params.alpha, params.iterations, params.pyramid_levels)
        write_flo1(path, f)
        report.written += 1
    return report


def precompute_flows(corpus, params=None, workers=1):
    """Write ``frame_count - 1`` FLO1 files per clip; existing valid files are kept."""
    params = params or FlowParams()
    jobs = [(c.path, c.frame_count, c.frame_size, params) for c in corpus]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            reports = list(ex.map(_clip_flows, jobs))
    else:
        reports = [_clip_flows(j) for j in jobs]
    total = PrecomputeReport()
    for r in reports:
        total.written += r.written
        total.skipped += r.skipped
        total.warnings += r.warnings
    for w in total.warnings:
        log.warning(w)
    for c in corpus:
        c._flows = None
    return total
