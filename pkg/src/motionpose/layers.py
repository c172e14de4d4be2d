"""Layer specifications, parameter sets, SGD with momentum and gradient checks."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import DTYPE, ShapeError, Tensor

KINDS = (
    "conv2d",
    "transposed-conv2d",
    "max-pool",
    "relu",
    "fully-connected",
    "concat",
    "softmax-cross-entropy",
    "euclidean-loss",
)
PARAMETRIC = ("conv2d", "transposed-conv2d", "fully-connected")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def parametric(self):
        return self.kind in PARAMETRIC

    def to_dict(self):
        return asdict(self)

    def weight_shape(self):
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind == "transposed-conv2d":
            return (self.in_channels, self.out_channels, self.kernel, self.kernel)
        if self.kind == "fully-connected":
            return (self.out_channels, self.in_channels)
        return None

    def fan_in(self):
        if self.kind == "conv2d":
            return self.in_channels * self.kernel * self.kernel
        if self.kind == "transposed-conv2d":
            # each output pixel receives in_ch * (k/stride)^2 contributions on average
            return max(1, self.in_channels * self.kernel * self.kernel // (self.stride * self.stride))
        return self.in_channels

    def output_shape(self, in_shape):
        """Shape of one sample's output, ``in_shape`` excluding the batch axis."""
        k, s, p = self.kernel, self.stride, self.pad
        if self.kind in ("conv2d", "transposed-conv2d", "max-pool"):
            if len(in_shape) != 3:
                raise ShapeError(f"{self.name or self.kind}: expected (C, H, W) input, got {tuple(in_shape)}")
            c, h, w = in_shape
            if self.kind != "max-pool" and c != self.in_channels:
                raise ShapeError(f"{self.name or self.kind}: input has {c} channels, layer expects {self.in_channels}")
            if self.kind == "conv2d":
                oh, ow, c = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1, self.out_channels
            elif self.kind == "transposed-conv2d":
                oh, ow, c = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k, self.out_channels
            else:
                oh, ow = (h - k) // s + 1, (w - k) // s + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"{self.name or self.kind}: input {h}x{w} too small for kernel {k}, stride {s}, pad {p}")
            return (c, oh, ow)
        if self.kind == "fully-connected":
            n = int(np.prod(in_shape))
            if n != self.in_channels:
                raise ShapeError(f"{self.name or self.kind}: input has {n} features, layer expects {self.in_channels}")
            return (self.out_channels,)
        if self.kind == "relu":
            return tuple(in_shape)
        if self.kind in ("softmax-cross-entropy", "euclidean-loss"):
            return ()
        raise ShapeError("concat output shape depends on several inputs; use concat_shape")


def conv(name, in_ch, out_ch, kernel, stride=1, pad=0):
    return LayerSpec("conv2d", name, kernel, stride, pad, in_ch, out_ch)


def deconv(name, in_ch, out_ch, kernel, stride=1, pad=0):
    return LayerSpec("transposed-conv2d", name, kernel, stride, pad, in_ch, out_ch)


def fc(name, n_in, n_out):
    return LayerSpec("fully-connected", name, in_channels=n_in, out_channels=n_out)


def pool(name, kernel, stride):
    return LayerSpec("max-pool", name, kernel, stride)


def relu(name=""):
    return LayerSpec("relu", name)


class ParamSet:
    """Ordered ``layer name -> {"weight", "bias"}`` tensors with momentum buffers."""

    def __init__(self):
        self.layers = OrderedDict()
        self.velocity = {}

    def add(self, layer_name, weight, bias):
        if layer_name in self.layers:
            raise KeyError(f"layer {layer_name!r} already present")
        w = Tensor(weight, requires_grad=True, name=f"{layer_name}.weight")
        b = Tensor(bias, requires_grad=True, name=f"{layer_name}.bias")
        self.layers[layer_name] = {"weight": w, "bias": b}
        for t in (w, b):
            self.velocity[t.name] = np.zeros(t.shape, dtype=DTYPE)

    def __contains__(self, layer_name):
        return layer_name in self.layers

    def __getitem__(self, layer_name):
        return self.layers[layer_name]

    def named_tensors(self):
        for lname, entry in self.layers.items():
            yield f"{lname}.weight", entry["weight"]
            yield f"{lname}.bias", entry["bias"]

    def state(self):
        return OrderedDict((n, t.data) for n, t in self.named_tensors())

    def load_state(self, state, strict=True):
        own = dict(self.named_tensors())
        missing = [n for n in own if n not in state]
        if strict and missing:
            raise KeyError(f"missing tensors: {missing}")
        for n, arr in state.items():
            if n not in own:
                if strict:
                    raise KeyError(f"unexpected tensor {n!r}")
                continue
            if tuple(arr.shape) != own[n].shape:
                raise ShapeError(f"{n}: stored shape {tuple(arr.shape)} vs expected {own[n].shape}")
            own[n].data = np.array(arr, dtype=DTYPE, copy=True)

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.grad = None

    def num_parameters(self):
        return sum(t.size for _, t in self.named_tensors())


def init_layer(params, spec, rng):
    """Add He-normal weights and zero biases for a parametric layer."""
    shape = spec.weight_shape()
    std = np.sqrt(2.0 / spec.fan_in())
    w = (rng.standard_normal(shape) * std).astype(DTYPE)
    nb = spec.out_channels
    params.add(spec.name, w, np.zeros(nb, dtype=DTYPE))


def forward(spec, params, x, target=None):
    """Apply one layer.  ``x`` is a Tensor (a list of Tensors for concat).

    ``target`` carries integer labels for softmax-cross-entropy and the
    regression target for euclidean-loss.
    """
    xs = x if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"{spec.name or spec.kind}: non-finite values in input")
    if spec.parametric:
        if spec.name not in params:
            raise KeyError(f"parameters for layer {spec.name!r} not found")
        w, b = params[spec.name]["weight"], params[spec.name]["bias"]
        if w.shape != spec.weight_shape():
            raise ShapeError(f"{spec.name}: weight shape {w.shape} vs spec {spec.weight_shape()}")
    k = spec.kind
    if k == "conv2d":
        return T.conv2d(x, w, b, spec.stride, spec.pad)
    if k == "transposed-conv2d":
        return T.conv_transpose2d(x, w, b, spec.stride, spec.pad)
    if k == "fully-connected":
        if len(x.shape) != 2:
            x = T.flatten(x)
        return T.linear(x, w, b)
    if k == "max-pool":
        return T.max_pool2d(x, spec.kernel, spec.stride)
    if k == "relu":
        return T.relu(x)
    if k == "concat":
        return T.concat(xs, axis=1)
    if k == "softmax-cross-entropy":
        return T.softmax_cross_entropy(x, target)
    return T.euclidean_loss(x, target)


def sgd_momentum_step(params, lr, momentum, only=None):
    """``v <- momentum*v + grad; p <- p - lr*v``, then clear gradients.

    ``only`` restricts the update to the named layers (frozen layers keep
    their values and velocities).
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    chosen = [(n, t) for n, t in params.named_tensors() if only is None or n.rsplit(".", 1)[0] in only]
    for n, t in chosen:
        if t.grad is None:
            raise ValueError(f"no gradient for parameter {n!r}")
    lr, momentum = DTYPE(lr), DTYPE(momentum)
    for n, t in chosen:
        v = params.velocity[n]
        v *= momentum
        v += t.grad
        t.data = t.data - lr * v
        t.grad = None
    params.zero_grad()
    return params


def _loss_through(spec, params, inputs, target, proj):
    out = forward(spec, params, inputs if spec.kind == "concat" else inputs[0], target=target)
    if out.data.ndim == 0 or out.size == 1:
        return out
    return T.sum_all(_mul_const(out, proj))


def _mul_const(x, c):
    c = np.asarray(c, dtype=DTYPE)
    return T._make(x.data * c, (x,), lambda g: (g * c,))


def finite_difference_check(spec, inputs, epsilon=1e-3, params=None, target=None, rng=None):
    """Max relative error between backprop and central-difference gradients.

    Non-scalar layer outputs are reduced with a fixed random projection.  The
    analytic side runs in float32; the numeric side re-evaluates the layer in
    float64 so the reference is not dominated by float32 rounding of the
    perturbed outputs.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [np.asarray(a, dtype=DTYPE) for a in (inputs if isinstance(inputs, (list, tuple)) else [inputs])]
    if params is None:
        params = ParamSet()
        if spec.parametric:
            init_layer(params, spec, rng)
            params[spec.name]["bias"].data = rng.standard_normal(spec.out_channels).astype(DTYPE) * 0.1
    tin = [Tensor(a, requires_grad=True) for a in inputs]
    out = forward(spec, params, tin if spec.kind == "concat" else tin[0], target=target)
    proj = rng.standard_normal(out.shape).astype(DTYPE) if out.size > 1 else None
    params.zero_grad()
    loss = _loss_through(spec, params, tin, target, proj)
    loss.backward()

    checked = [(t.data, t.grad if t.grad is not None else np.zeros_like(t.data)) for t in tin]
    if spec.parametric:
        checked += [(params[spec.name][k].data, params[spec.name][k].grad) for k in ("weight", "bias")]

    # float64 copies are perturbed so the step is exactly +-epsilon
    wide = [np.array(a, dtype=np.float64) for a, _ in checked]
    n_in = len(inputs)

    def f64_loss():
        with _float64_arithmetic():
            p64 = ParamSet()
            if spec.parametric:
                p64.layers[spec.name] = {"weight": Tensor(wide[n_in]), "bias": Tensor(wide[n_in + 1])}
            return float(_loss_through(spec, p64, [Tensor(a) for a in wide[:n_in]], target, proj).data)

    worst = 0.0
    for arr, (_, grad) in zip(wide, checked):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = f64_loss()
            flat[i] = orig - epsilon
            lm = f64_loss()
            flat[i] = orig
            num = (lp - lm) / (2 * epsilon)
            ana = float(gflat[i])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


class _float64_arithmetic:
    """Temporarily switch the tensor module's working dtype to float64."""

    def __enter__(self):
        self._saved = T.DTYPE
        T.DTYPE = np.float64
        return self

    def __exit__(self, *exc):
        T.DTYPE = self._saved
        return False
