"""Dense stand-in for the sparse 3D convolution backbone, and the image encoder."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..nn import Module, param
from ..tensor import Tensor
from .pointcloud import FeatureVolume

STRIDES = (1, 2, 4, 8)


class ConvLayer(Module):
    def __init__(self, rng: np.random.Generator, nd: int, cin: int, cout: int, stride: int, k: int = 3):
        fan = k ** nd * cin
        bound = np.sqrt(6.0 / fan)
        self.weight = param(rng.uniform(-bound, bound, size=(fan, cout)))
        self.bias = param(np.zeros(cout))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv(x, self.weight, self.bias, stride=self.stride, padding=1)


def encode_voxels(volume: FeatureVolume) -> Tensor:
    """Per-voxel input: point-mean offset from the voxel center (in voxel units), reflectance, occupancy."""
    spec = volume.spec
    feats = volume.data.data
    ext = tuple(spec.extents)
    centers = spec.centers().reshape(ext + (3,))
    occ = volume.mask[..., None].astype(np.float64)
    offs = (feats[..., :3] - centers) / np.asarray(spec.voxel_size) * occ
    return Tensor(np.concatenate([offs, feats[..., 3:4] * occ, occ], axis=-1))


class Backbone(Module):
    """Four 3x3x3 convolutions at strides 1, 2, 4, 8 relative to the input grid."""

    in_channels = 5

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64, 64)):
        if len(widths) != 4:
            raise ValueError("backbone needs four stage widths")
        chans = (self.in_channels,) + tuple(widths)
        self.stages = [ConvLayer(rng, 3, chans[i], chans[i + 1], 1 if i == 0 else 2) for i in range(4)]
        self.widths = tuple(widths)

    def __call__(self, base: FeatureVolume) -> list[FeatureVolume]:
        return downsample_stages(base, self)


def downsample_stages(base: FeatureVolume, params: Backbone) -> list[FeatureVolume]:
    """Run the backbone, returning volumes at strides 1, 2, 4 and 8."""
    ext = tuple(base.spec.extents)
    if any(e % 8 for e in ext):
        raise ValueError(f"grid extents {ext} must be divisible by 8")
    x = encode_voxels(base) if base.channels == 4 else base.data
    mask = base.mask
    out = []
    for stride, layer in zip(STRIDES, params.stages):
        x = T.relu(layer(x))
        spec = base.spec.coarsen(stride)
        m = mask.reshape(spec.extents[0], stride, spec.extents[1], stride, spec.extents[2], stride).any(axis=(1, 3, 5))
        out.append(FeatureVolume(spec, x, m))
    return out


class ImageEncoder(Module):
    """Three 3x3 convolutions with strides 2, 2, 1: total stride 4."""

    def __init__(self, rng: np.random.Generator, c_out: int = 16, hidden: int = 16):
        self.layers = [ConvLayer(rng, 2, 3, hidden, 2), ConvLayer(rng, 2, hidden, hidden, 2),
                       ConvLayer(rng, 2, hidden, c_out, 1)]

    def __call__(self, image: Tensor) -> Tensor:
        return image_features(image, self)


def image_features(image: Tensor, params: ImageEncoder) -> Tensor:
    """Dense ``(H/4, W/4, C_I)`` feature map of an ``(H, W, 3)`` image."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=np.float64))
    h, w = image.shape[:2]
    if h % 4 or w % 4 or image.shape[2] != 3:
        raise ValueError(f"image shape {image.shape} must be (H, W, 3) with H, W divisible by 4")
    x = image
    for i, layer in enumerate(params.layers):
        x = layer(x)
        if i < len(params.layers) - 1:
            x = T.relu(x)
    return x
