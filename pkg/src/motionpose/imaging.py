"""Person-centred cropping and rescaling shared by pose training and probes."""
import numpy as np
from scipy import ndimage

from .synth import TORSO_BOX_JOINTS


class CropError(ValueError):
    pass


def torso_box(joints):
    pts = np.asarray(joints)[list(TORSO_BOX_JOINTS)]
    (x0, y0), (x1, y1) = pts.min(axis=0), pts.max(axis=0)
    return x0, y0, x1, y1


def expanded_torso_square(joints, expansion):
    """Square (x0, y0, side) centred on the torso box, side = expansion * longest box side."""
    x0, y0, x1, y1 = torso_box(joints)
    side = expansion * max(x1 - x0, y1 - y0, 1.0)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    return cx - side / 2, cy - side / 2, side


def crop_resize(image, x0, y0, side, out_size):
    """Bilinear resampling: crop pixel ``i`` samples image coordinate ``x0 + i * side / out_size``."""
    c = np.arange(out_size) * (side / out_size)
    yy, xx = np.meshgrid(y0 + c, x0 + c, indexing="ij")
    return ndimage.map_coordinates(np.asarray(image, dtype=np.float64), [yy, xx], order=1, mode="nearest").astype(np.float32)


def person_crop(image, joints, expansion, out_size, grow=1.25, max_tries=8):
    """Crop around the torso; the box grows until every joint lies inside.

    Returns ``(crop, joints_in_crop, (x0, y0, scale))`` where image
    coordinates are ``x0 + scale * crop_coordinates``.
    """
    joints = np.asarray(joints, dtype=np.float64)
    e = expansion
    for _ in range(max_tries):
        x0, y0, side = expanded_torso_square(joints, e)
        local = (joints - [x0, y0]) * (out_size / side)
        if local.min() >= 0 and local.max() < out_size:
            return crop_resize(image, x0, y0, side, out_size), local, (x0, y0, side / out_size)
        e *= grow
    raise CropError("joints do not fit any torso-centred crop")


def to_image_coords(points, transform):
    x0, y0, scale = transform
    return np.asarray(points) * scale + [x0, y0]
