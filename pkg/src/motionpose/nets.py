"""Appearance / motion trunks, the fusion head, the pose and action networks.

Networks are plain lists of :class:`LayerSpec` evaluated against a
:class:`ParamSet`.  Parameter names carry the owning stream as a prefix
(``app.``, ``mot.``, ``fuse.``, ``pose.``, ``act.``); every network that
reuses the appearance trunk refers to the same ``app.*`` entries, which is
how weight sharing and transfer work.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace, asdict

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import ParamSet, ShapeError
from .tensor import Tensor


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    pool: tuple | None = None  # (kernel, stride)


@dataclass(frozen=True)
class ArchConfig:
    name: str
    stages: tuple
    fc6_dim: int
    input_size: int
    in_channels: int

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "vggm-paper": ArchConfig(
        "vggm-paper",
        (ConvStage(96, 7, 2, 0, (3, 2)), ConvStage(256, 5, 2, 1, (3, 2)), ConvStage(512, 3, 1, 1),
         ConvStage(512, 3, 1, 1), ConvStage(512, 3, 1, 1, (3, 2))),
        fc6_dim=4096, input_size=224, in_channels=3),
    "vggm-mini": ArchConfig(
        "vggm-mini",
        (ConvStage(16, 5, 2, 2, (2, 2)), ConvStage(32, 3, 2, 1, (2, 2)), ConvStage(64, 3, 1, 1),
         ConvStage(64, 3, 1, 1), ConvStage(64, 3, 1, 1, (2, 2))),
        fc6_dim=256, input_size=64, in_channels=1),
}
PRESETS["paper"] = PRESETS["vggm-paper"]
PRESETS["mini"] = PRESETS["vggm-mini"]

# pose-net scale presets: (input size, heatmap size)
POSE_SIZES = {"vggm-paper": (256, 60), "vggm-mini": (64, 16)}
ACTION_HIDDEN = {"vggm-paper": 2048, "vggm-mini": 128}


def get_arch(name_or_cfg):
    if isinstance(name_or_cfg, ArchConfig):
        return name_or_cfg
    try:
        return PRESETS[name_or_cfg]
    except KeyError:
        raise KeyError(f"unknown architecture preset {name_or_cfg!r}; choose from {sorted(PRESETS)}") from None


class Network:
    """A sequential stack of layer specs with shape inference."""

    def __init__(self, layers, input_shape, name=""):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.shapes = self._infer()

    def _infer(self):
        shapes = [self.input_shape]
        for spec in self.layers:
            try:
                shapes.append(spec.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"{self.name}: {exc}") from None
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    def param_layers(self):
        return [s for s in self.layers if s.parametric]

    def init(self, params, rng):
        for spec in self.param_layers():
            if spec.name not in params:
                L.init_layer(params, spec, rng)
        return params

    def __call__(self, params, x, upto=None, collect=False):
        """Forward a batch ``(N, *input_shape)``; ``upto`` stops after the named layer."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name}: expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise ValueError(f"{self.name}: non-finite input")
        acts = []
        for spec in self.layers:
            x = _apply(spec, params, x)
            if collect:
                acts.append((spec.name, x))
            if upto is not None and spec.name == upto:
                break
        return (x, acts) if collect else x

    def fingerprint_data(self):
        return {"input": list(self.input_shape), "layers": [s.to_dict() for s in self.layers]}


def _apply(spec, params, x):
    k = spec.kind
    if k == "relu":
        return T.relu(x)
    if k == "max-pool":
        return T.max_pool2d(x, spec.kernel, spec.stride)
    p = params[spec.name]
    if k == "conv2d":
        return T.conv2d(x, p["weight"], p["bias"], spec.stride, spec.pad)
    if k == "transposed-conv2d":
        return T.conv_transpose2d(x, p["weight"], p["bias"], spec.stride, spec.pad)
    if k == "fully-connected":
        if len(x.shape) != 2:
            x = T.flatten(x)
        return T.linear(x, p["weight"], p["bias"])
    raise ValueError(f"layer kind {k!r} is not a sequential layer")


def conv_trunk(cfg, in_channels, prefix, with_pool5=True):
    layers, c = [], in_channels
    for i, st in enumerate(cfg.stages, start=1):
        layers.append(L.conv(f"{prefix}.conv{i}", c, st.out_channels, st.kernel, st.stride, st.pad))
        layers.append(L.relu(f"{prefix}.relu{i}"))
        last = i == len(cfg.stages)
        if st.pool and (with_pool5 or not last):
            layers.append(L.pool(f"{prefix}.pool{i}", *st.pool))
        c = st.out_channels
    return layers


def _feature_net(cfg, in_channels, prefix, input_size=None):
    size = input_size or cfg.input_size
    trunk = conv_trunk(cfg, in_channels, prefix)
    shape = Network(trunk, (in_channels, size, size), prefix).output_shape
    flat = int(np.prod(shape))
    layers = trunk + [L.fc(f"{prefix}.fc6", flat, cfg.fc6_dim), L.relu(f"{prefix}.relu6")]
    return Network(layers, (in_channels, size, size), prefix)


def build_appearance_net(cfg, input_size=None):
    cfg = get_arch(cfg)
    return _feature_net(cfg, cfg.in_channels, "app", input_size)


def build_motion_net(cfg, flow_channels, delta=None):
    cfg = get_arch(cfg)
    if delta is not None and flow_channels != 2 * delta:
        raise ShapeError(f"motion net: {flow_channels} flow channels but frame gap {delta} needs {2 * delta}")
    if flow_channels < 2 or flow_channels % 2:
        raise ShapeError(f"motion net: flow channel count must be a positive even number, got {flow_channels}")
    return _feature_net(cfg, flow_channels, "mot")


# ---------------------------------------------------------------- joint model


class JointModel:
    """Two weight-shared appearance streams, one motion stream and a 2-way head."""

    def __init__(self, arch="vggm-mini", delta=4, rng=None, init=True):
        self.arch = get_arch(arch)
        self.delta = delta
        self.app = build_appearance_net(self.arch)
        self.mot = build_motion_net(self.arch, 2 * delta, delta)
        d = self.arch.fc6_dim
        self.fusion = [L.fc("fuse.fc7", 3 * d, d), L.relu("fuse.relu7"), L.fc("fuse.fc8", d, 2)]
        self.params = ParamSet()
        if init:
            rng = np.random.default_rng(0) if rng is None else rng
            self.app.init(self.params, rng)
            self.mot.init(self.params, rng)
            for spec in self.fusion:
                if spec.parametric:
                    L.init_layer(self.params, spec, rng)

    @property
    def fusion_dim(self):
        return 3 * self.arch.fc6_dim

    def fingerprint_data(self):
        return {"model": "joint", "app": self.app.fingerprint_data(), "mot": self.mot.fingerprint_data(),
                "fusion": [s.to_dict() for s in self.fusion]}

    def head(self, params, fused):
        x = fused
        for spec in self.fusion:
            x = _apply(spec, params, x)
        return x

    def forward_arrays(self, patch_a, patch_b, flows, app_index, flow_index, params=None):
        """Scores for triplets assembled by index from per-positive features."""
        params = params or self.params
        na = len(patch_a)
        feats = self.app(params, np.concatenate([patch_a, patch_b]))
        tfeat = self.mot(params, flows)
        a = T.gather_rows(feats, app_index)
        b = T.gather_rows(feats, np.asarray(app_index) + na)
        t = T.gather_rows(tfeat, flow_index)
        return self.head(params, T.concat([a, b, t], axis=1))

    def forward_batch(self, batch, params=None):
        return self.forward_arrays(batch.patch_a, batch.patch_b, batch.flows, batch.app_index, batch.flow_index, params)

    def appearance_features(self, patches, params=None, chunk=256):
        params = params or self.params
        out = [self.app(params, patches[i:i + chunk]).data for i in range(0, len(patches), chunk)]
        return np.concatenate(out)


def joint_forward(model, sample):
    """2-class scores ``(1, 2)`` for a single triplet."""
    for what, arr, net in (("appearance stream A", sample.patch_a, model.app),
                           ("appearance stream A'", sample.patch_b, model.app),
                           ("motion stream", sample.flow_block, model.mot)):
        if tuple(arr.shape) != net.input_shape:
            raise ShapeError(f"{what}: input {tuple(arr.shape)} does not match {net.input_shape}")
    return model.forward_arrays(sample.patch_a[None], sample.patch_b[None], sample.flow_block[None], [0], [0])


# ---------------------------------------------------------------- pose net


def solve_deconv(in_size, out_size):
    """(kernel, stride, pad) with ``(in-1)*stride - 2*pad + kernel == out``.

    The stride is the integer upsampling factor; the padding is the smallest
    one giving a kernel of at least twice the stride, so neighbouring input
    cells overlap in the output (14 -> 60 yields k=8, s=4, p=0).
    """
    for s in range(max(out_size // in_size, 1), 0, -1):
        for p in range(0, 4 * s + 1):
            k = out_size - (in_size - 1) * s + 2 * p
            if k >= 2 * s:
                return k, s, p
    raise ShapeError(f"cannot realise a {in_size} -> {out_size} transposed convolution")


class PoseNet:
    """conv1-5 of the appearance trunk, one deconvolution, per-joint 1x1 heads."""

    def __init__(self, arch="vggm-mini", num_joints=9, heatmap_size=None, input_size=None, rng=None, deconv_channels=None):
        self.arch = get_arch(arch)
        dflt_in, dflt_hm = POSE_SIZES.get(self.arch.name, (self.arch.input_size, self.arch.input_size // 4))
        self.input_size = input_size or dflt_in
        self.heatmap_size = heatmap_size or dflt_hm
        self.num_joints = num_joints
        trunk = conv_trunk(self.arch, self.arch.in_channels, "app", with_pool5=False)
        c5, m, _ = Network(trunk, (self.arch.in_channels, self.input_size, self.input_size), "pose").output_shape
        k, s, p = solve_deconv(m, self.heatmap_size)
        dc = deconv_channels or max(c5 // 2, num_joints)
        layers = trunk + [L.deconv("pose.deconv", c5, dc, k, s, p), L.relu("pose.relu_d"),
                          L.conv("pose.heat", dc, num_joints, 1)]
        self.net = Network(layers, (self.arch.in_channels, self.input_size, self.input_size), "pose")
        if self.net.output_shape != (num_joints, self.heatmap_size, self.heatmap_size):
            raise ShapeError(f"pose net output {self.net.output_shape} differs from requested heatmaps")
        self.params = ParamSet()
        if rng is not None:
            self.net.init(self.params, rng)

    @property
    def output_shape(self):
        return self.net.output_shape

    @property
    def trunk_names(self):
        return [s.name for s in self.net.param_layers() if s.name.startswith("app.")]

    def fingerprint_data(self):
        return {"model": "pose", "net": self.net.fingerprint_data()}

    def __call__(self, x, params=None):
        return self.net(params or self.params, x)


def build_pose_net(appearance=None, num_joints=9, heatmap_size=None, input_size=None, arch="vggm-mini", rng=None):
    """Pose network; conv1-5 copied from ``appearance`` (a ParamSet) when given."""
    rng = np.random.default_rng(0) if rng is None else rng
    net = PoseNet(arch, num_joints, heatmap_size, input_size)
    if appearance is not None:
        transfer(appearance, net.params, net.trunk_names, net.net)
    net.net.init(net.params, rng)
    return net


class ActionNet:
    """Appearance trunk through FC6, then FC(hidden) and FC(num_classes)."""

    def __init__(self, arch="vggm-mini", num_classes=4, hidden_dim=None):
        self.arch = get_arch(arch)
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim or ACTION_HIDDEN.get(self.arch.name, 2 * self.arch.fc6_dim)
        feat = build_appearance_net(self.arch)
        layers = feat.layers + [L.fc("act.fc7", self.arch.fc6_dim, self.hidden_dim), L.relu("act.relu7"),
                                L.fc("act.fc8", self.hidden_dim, num_classes)]
        self.net = Network(layers, feat.input_shape, "action")
        self.params = ParamSet()

    @property
    def trunk_names(self):
        return [s.name for s in self.net.param_layers() if s.name.startswith("app.")]

    @property
    def head_names(self):
        return ["act.fc7", "act.fc8"]

    def fingerprint_data(self):
        return {"model": "action", "net": self.net.fingerprint_data()}

    def __call__(self, x, params=None):
        return self.net(params or self.params, x)


def build_action_net(appearance=None, num_classes=4, hidden_dim=None, arch="vggm-mini", rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    net = ActionNet(arch, num_classes, hidden_dim)
    if appearance is not None:
        transfer(appearance, net.params, net.trunk_names, net.net)
    net.net.init(net.params, rng)
    return net


def transfer(source, dest, names, dest_net):
    """Copy layers ``names`` from ``source`` into ``dest`` after checking shapes."""
    specs = {s.name: s for s in dest_net.param_layers()}
    bad = []
    for n in names:
        want = specs[n].weight_shape()
        if n not in source:
            bad.append(f"{n}: missing in source")
        elif source[n]["weight"].shape != want:
            bad.append(f"{n}: source {source[n]['weight'].shape} vs target {want}")
    if bad:
        raise TransferError("incompatible checkpoint layers: " + "; ".join(bad))
    for n in names:
        dest.add(n, source[n]["weight"].data.copy(), source[n]["bias"].data.copy())


def fingerprint(model):
    blob = json.dumps(model.fingerprint_data(), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()[:16]
