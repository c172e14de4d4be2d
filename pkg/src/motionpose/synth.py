"""Articulated stick-figure model, periodic action scripts and rendering.

Angles are absolute directions in image coordinates (x right, y down), so
``-pi/2`` points up.  Each bone stores its rest angle relative to its
parent; the root is the hip midpoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JOINT_NAMES = ("nose", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hip", "r_hip")
K = len(JOINT_NAMES)
TORSO_PAIR = (JOINT_NAMES.index("l_shoulder"), JOINT_NAMES.index("r_hip"))
TORSO_BOX_JOINTS = tuple(JOINT_NAMES.index(n) for n in ("l_shoulder", "r_shoulder", "l_hip", "r_hip"))

HALF_PI = np.pi / 2


@dataclass(frozen=True)
class Bone:
    name: str
    parent: str  # "root" for bones hanging off the hip midpoint
    length: float
    rest: float  # relative to the parent's absolute angle (absolute for root children)


# The "left" side of a figure facing the camera is drawn on the image right.
BONES = (
    Bone("l_hip", "root", 7.0, 0.0),
    Bone("r_hip", "root", 7.0, np.pi),
    Bone("neck", "root", 24.0, -HALF_PI),
    Bone("nose", "neck", 9.0, 0.0),
    Bone("l_shoulder", "neck", 9.0, HALF_PI),
    Bone("r_shoulder", "neck", 9.0, -HALF_PI),
    Bone("l_elbow", "l_shoulder", 13.0, HALF_PI - 0.25),
    Bone("l_wrist", "l_elbow", 12.0, 0.0),
    Bone("r_elbow", "r_shoulder", 13.0, -HALF_PI + 0.25),
    Bone("r_wrist", "r_elbow", 12.0, 0.0),
    Bone("l_knee", "l_hip", 14.0, HALF_PI - 0.1),
    Bone("l_ankle", "l_knee", 13.0, 0.0),
    Bone("r_knee", "r_hip", 14.0, -HALF_PI + 0.1),
    Bone("r_ankle", "r_knee", 13.0, 0.0),
)
BONE_INDEX = {b.name: i for i, b in enumerate(BONES)}
SEGMENTS = (
    ("root", "neck"), ("neck", "l_shoulder"), ("neck", "r_shoulder"),
    ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"), ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("root", "l_hip"), ("root", "r_hip"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
    ("r_hip", "r_knee"), ("r_knee", "r_ankle"), ("neck", "nose"),
)
# annotated limbs for evaluation: (name, joint a, joint b)
LIMBS = (
    ("l_upper_arm", 1, 3), ("r_upper_arm", 2, 4),
    ("l_lower_arm", 3, 5), ("r_lower_arm", 4, 6),
)


@dataclass(frozen=True)
class Oscillation:
    amplitude: float  # radians (or pixels for the root)
    frequency: float  # cycles per frame
    phase: float = 0.0


@dataclass(frozen=True)
class ActionScript:
    """Per-bone angle offsets ``pose[b] + amp*sin(2*pi*f*t + phase)`` plus root motion."""

    action_id: int
    name: str
    pose: dict = field(default_factory=dict)  # static offsets added to the rest angle
    bones: dict = field(default_factory=dict)  # bone -> Oscillation
    root_bob: Oscillation | None = None  # vertical root oscillation (pixels)
    velocity: tuple = (0.0, 0.0)  # px / frame


def _actions():
    wave = ActionScript(
        0, "wave",
        # right arm raised sideways, forearm up; both joints swing in phase
        pose={"r_elbow": HALF_PI - 0.25, "r_wrist": 0.7},
        bones={"r_elbow": Oscillation(0.45, 0.1), "r_wrist": Oscillation(0.2, 0.1)},
    )
    squat = ActionScript(
        1, "squat",
        pose={"l_elbow": -HALF_PI + 0.25, "r_elbow": HALF_PI - 0.25, "l_knee": -0.3, "r_knee": 0.3,
              "l_ankle": 0.5, "r_ankle": -0.5},
        bones={"l_knee": Oscillation(0.35, 0.08, np.pi), "r_knee": Oscillation(0.35, 0.08, 0.0),
               "l_ankle": Oscillation(0.5, 0.08, 0.0), "r_ankle": Oscillation(0.5, 0.08, np.pi),
               "l_elbow": Oscillation(0.3, 0.08, np.pi), "r_elbow": Oscillation(0.3, 0.08, 0.0)},
        root_bob=Oscillation(6.0, 0.08, HALF_PI),
    )
    jacks = ActionScript(
        2, "jacks",
        pose={"l_elbow": -0.9, "r_elbow": 0.9, "l_knee": -0.25, "r_knee": 0.25},
        bones={"l_elbow": Oscillation(0.9, 0.09, 0.0), "r_elbow": Oscillation(0.9, 0.09, np.pi),
               "l_knee": Oscillation(0.2, 0.09, 0.0), "r_knee": Oscillation(0.2, 0.09, np.pi)},
        root_bob=Oscillation(2.0, 0.18, 0.0),
    )
    punch = ActionScript(
        3, "punch",
        pose={"l_elbow": -1.9, "r_elbow": 1.9, "l_wrist": -1.6, "r_wrist": 1.6},
        bones={"l_elbow": Oscillation(0.5, 0.07, 0.0), "r_elbow": Oscillation(0.5, 0.07, 0.0),
               "l_wrist": Oscillation(0.9, 0.07, 0.0), "r_wrist": Oscillation(0.9, 0.07, np.pi)},
        velocity=(0.35, 0.0),
    )
    return {a.name: a for a in (wave, squat, jacks, punch)}


ACTIONS = _actions()
DEFAULT_ACTIONS = tuple(ACTIONS)


@dataclass(frozen=True)
class ClipParams:
    """Per-clip jitter applied to an action script."""

    phase: float = 0.0
    amp_scale: float = 1.0
    freq_scale: float = 1.0
    root: tuple = (48.0, 56.0)
    velocity_sign: float = 1.0


def bone_angles(script, params, t):
    """Relative angle of every bone at (possibly fractional) time ``t``."""
    out = {}
    for b in BONES:
        a = b.rest + script.pose.get(b.name, 0.0)
        osc = script.bones.get(b.name)
        if osc is not None:
            a += params.amp_scale * osc.amplitude * np.sin(
                2 * np.pi * osc.frequency * params.freq_scale * t + osc.phase + params.phase)
        out[b.name] = a
    return out


def root_position(script, params, t):
    x, y = params.root
    vx, vy = script.velocity
    x += params.velocity_sign * vx * t
    y += vy * t
    if script.root_bob is not None:
        ob = script.root_bob
        y += params.amp_scale * ob.amplitude * np.sin(2 * np.pi * ob.frequency * params.freq_scale * t + ob.phase + params.phase)
    return x, y


def forward_kinematics(script, params, t):
    """Positions of the root and every bone end at time ``t`` as a dict."""
    rel = bone_angles(script, params, t)
    pos = {"root": np.array(root_position(script, params, t))}
    absang = {"root": 0.0}
    for b in BONES:  # parents precede children in BONES
        a = rel[b.name] + (absang[b.parent] if b.parent != "root" else 0.0)
        absang[b.name] = a
        pos[b.name] = pos[b.parent] + b.length * np.array([np.cos(a), np.sin(a)])
    return pos


def joints_at(script, params, t):
    pos = forward_kinematics(script, params, t)
    return np.array([pos[n] for n in JOINT_NAMES])


def smooth_noise(rng, size, sigma=1.5, mean=0.35, std=0.12):
    from scipy import ndimage

    n = ndimage.gaussian_filter(rng.random((size, size)), sigma, mode="wrap")
    n = (n - n.mean()) / (n.std() + 1e-12)
    return np.clip(mean + std * n, 0.0, 1.0)


def _segment_distance(px, py, a, b):
    d = b - a
    L2 = float(d @ d)
    if L2 == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def render_figure(pos, size, thickness=3.0, head_radius=4.5):
    """Anti-aliased coverage mask in [0, 1] for the skeleton at ``pos``."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cover = np.zeros((size, size))
    half = thickness / 2
    for a, b in SEGMENTS:
        d = _segment_distance(xs, ys, pos[a], pos[b])
        cover = np.maximum(cover, np.clip(half + 0.5 - d, 0.0, 1.0))
    head = pos["nose"]
    d = np.hypot(xs - head[0], ys - head[1])
    cover = np.maximum(cover, np.clip(head_radius + 0.5 - d, 0.0, 1.0))
    return cover


def render_frame(background, pos, figure_value=0.92):
    cover = render_figure(pos, background.shape[0])
    return background * (1 - cover) + figure_value * cover
