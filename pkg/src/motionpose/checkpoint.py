"""Binary checkpoint files.

Layout (little-endian)::

    b"MPCK" | u16 version | 16-byte architecture fingerprint | u32 tensor count
    per tensor: u32 name length | utf-8 name | u32 rank | rank * u32 dims | f32 data
    b"HIST" | u32 record count | records of (u32 iter, f32 loss, f32 val_acc)
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import fingerprint

MAGIC = b"MPCK"
HIST = b"HIST"
VERSION = 1


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


class FingerprintError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    fingerprint: bytes
    tensors: OrderedDict
    history: list = field(default_factory=list)  # (iteration, loss, val_acc)
    version: int = VERSION

    def restore_into(self, model):
        """Load tensors into ``model.params`` after verifying the fingerprint."""
        own = OrderedDict((n, t.data.shape) for n, t in model.params.named_tensors())
        if fingerprint(model) != self.fingerprint:
            raise FingerprintError("architecture fingerprint mismatch:\n" + shape_diff(self.tensors, own))
        if not model.params.layers:
            # freshly built, uninitialised model: take the stored tensors as they are
            model.params = self.layer_params()
        else:
            model.params.load_state(self.tensors)
        return model

    def layer_params(self):
        """Tensors regrouped as a :class:`ParamSet` (for transfer)."""
        from .layers import ParamSet

        ps = ParamSet()
        names = OrderedDict()
        for n in self.tensors:
            names.setdefault(n.rsplit(".", 1)[0], None)
        for lname in names:
            ps.add(lname, self.tensors[f"{lname}.weight"].copy(), self.tensors[f"{lname}.bias"].copy())
        return ps


def shape_diff(stored, expected):
    lines = []
    for n in sorted(set(stored) | set(expected)):
        a = tuple(stored[n].shape) if n in stored else None
        b = tuple(expected[n]) if n in expected else None
        if a != b:
            lines.append(f"  {n}: checkpoint {a if a is not None else '-'} vs model {b if b is not None else '-'}")
    return "\n".join(lines) or "  (same tensor shapes, different layer hyperparameters)"


def from_model(model, history=()):
    return Checkpoint(fingerprint(model), OrderedDict((n, t.data.copy()) for n, t in model.params.named_tensors()),
                      list(history))


def encode(ckpt):
    out = [MAGIC, struct.pack("<H", ckpt.version), ckpt.fingerprint, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    out.append(HIST + struct.pack("<I", len(ckpt.history)))
    for it, loss, acc in ckpt.history:
        out.append(struct.pack("<Iff", int(it), float(loss), float(acc)))
    return b"".join(out)


def decode(raw, source="<bytes>"):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise IntegrityError(f"{source}: truncated checkpoint (needed {n} bytes at offset {pos})")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    fp = take(16)
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if take(4) != HIST:
        raise IntegrityError(f"{source}: history marker missing")
    (nrec,) = struct.unpack("<I", take(4))
    history = [struct.unpack("<Iff", take(12)) for _ in range(nrec)]
    if pos != len(raw):
        raise IntegrityError(f"{source}: {len(raw) - pos} trailing bytes")
    return Checkpoint(fp, tensors, [(int(i), float(l), float(a)) for i, l, a in history], version)


def save_checkpoint(model_or_ckpt, path, history=None):
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else from_model(model_or_ckpt, history or ())
    if history is not None and isinstance(model_or_ckpt, Checkpoint):
        ckpt = Checkpoint(ckpt.fingerprint, ckpt.tensors, list(history), ckpt.version)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return ckpt


def load_checkpoint(path, model=None):
    """Read a checkpoint; with ``model`` given, also restore it (fingerprint checked)."""
    ckpt = decode(Path(path).read_bytes(), str(path))
    if model is not None:
        ckpt.restore_into(model)
    return ckpt
