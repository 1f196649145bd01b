"""Small convolutional backbones that turn an image pair into raw parameters.

Both networks read a channel-stacked pair (B,H,W,2) and register their
weights in a ParamStore under a caller-chosen prefix.  Initialization draws
from one seeded generator in layer order (weights first, biases stay zero),
and every final head starts at exactly zero so an untrained network emits
the zero algebra element.
"""

from __future__ import annotations

import numpy as np

from . import tape as tp
from .params import ParamStore
from .tape import DiffTensor

LEAKY_SLOPE = 0.1


def pack_pair(a, b) -> DiffTensor:
    """Stack two (B,H,W) images into the (B,H,W,2) backbone input."""
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"pack_pair: expected matching (B,H,W) images, got {a.shape} and {b.shape}")
    bsz, h, w = a.shape
    return tp.concat([tp.reshape(a, (bsz, h, w, 1)), tp.reshape(b, (bsz, h, w, 1))], axis=3)


def downsample_images(x, factor: int) -> DiffTensor:
    """Average-pool (B,H,W) images down by a power-of-two factor."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"downsample_images: factor must be a power of two, got {factor}")
    if x.ndim != 3:
        raise ValueError(f"downsample_images: expected (B,H,W), got {x.shape}")
    bsz, h, w = x.shape
    y = tp.reshape(x, (bsz, h, w, 1))
    while factor > 1:
        y = tp.avg_pool2(y)
        factor //= 2
    return tp.reshape(y, y.shape[:3])


def upsample2(x) -> DiffTensor:
    """Nearest-neighbor 2x upsampling of (B,H,W,C) via duplication."""
    b, h, w, c = x.shape
    y = tp.reshape(x, (b, h, 1, w, 1, c))
    y = tp.concat([y, y], axis=2)
    y = tp.concat([y, y], axis=4)
    return tp.reshape(y, (b, 2 * h, 2 * w, c))


def _conv_init(rng, kh, kw, ci, co):
    return rng.standard_normal((kh, kw, ci, co)) * np.sqrt(2.0 / (kh * kw * ci))


class ConvMatrixNet:
    """Four stride-2 convolutions, global average pooling, and a dense head.

    Channels run 2 -> 16 -> 32 -> 64 -> 128; the head maps the pooled
    feature vector to ``out_dim`` raw parameters and starts at zero.
    """

    CHANNELS = (16, 32, 64, 128)

    def __init__(self, store: ParamStore, prefix: str, out_dim: int, seed: int):
        self.store = store
        self.prefix = prefix
        self.out_dim = int(out_dim)
        rng = np.random.default_rng(seed)
        ci = 2
        for i, co in enumerate(self.CHANNELS, start=1):
            store.add(f"{prefix}.conv{i}.w", _conv_init(rng, 3, 3, ci, co))
            store.add(f"{prefix}.conv{i}.b", np.zeros(co))
            ci = co
        store.add(f"{prefix}.head.w", np.zeros((ci, self.out_dim)))
        store.add(f"{prefix}.head.b", np.zeros(self.out_dim))

    def param_names(self) -> list[str]:
        names = []
        for i in range(1, len(self.CHANNELS) + 1):
            names += [f"{self.prefix}.conv{i}.w", f"{self.prefix}.conv{i}.b"]
        return names + [f"{self.prefix}.head.w", f"{self.prefix}.head.b"]

    def __call__(self, leaves: dict[str, DiffTensor], pack) -> DiffTensor:
        if pack.ndim != 4 or pack.shape[3] != 2:
            raise ValueError(f"conv_matrix_net: expected (B,H,W,2), got {pack.shape}")
        p = leaves
        x = pack
        for i in range(1, len(self.CHANNELS) + 1):
            x = tp.conv2d(x, p[f"{self.prefix}.conv{i}.w"], stride=2)
            x = tp.leaky_relu(x + p[f"{self.prefix}.conv{i}.b"], LEAKY_SLOPE)
        feat = tp.tmean(x, axis=(1, 2))
        return tp.matmul(feat, p[f"{self.prefix}.head.w"]) + p[f"{self.prefix}.head.b"]


class SmallUnet:
    """Three-level encoder-decoder emitting one value per pixel and channel.

    Encoder channels 16/32/64 with 2x average-pool downsampling; the decoder
    upsamples by duplication, concatenates the skip, and convolves back down.
    The 1x1 output head starts at zero.
    """

    ENC = (16, 32, 64)

    def __init__(self, store: ParamStore, prefix: str, out_channels: int, seed: int):
        self.store = store
        self.prefix = prefix
        self.out_channels = int(out_channels)
        rng = np.random.default_rng(seed)
        e1, e2, e3 = self.ENC
        spec = [
            ("enc1", 3, 2, e1),
            ("enc2", 3, e1, e2),
            ("enc3", 3, e2, e3),
            ("dec2", 3, e3 + e2, e2),
            ("dec1", 3, e2 + e1, e1),
        ]
        for name, k, ci, co in spec:
            store.add(f"{prefix}.{name}.w", _conv_init(rng, k, k, ci, co))
            store.add(f"{prefix}.{name}.b", np.zeros(co))
        store.add(f"{prefix}.head.w", np.zeros((1, 1, e1, self.out_channels)))
        store.add(f"{prefix}.head.b", np.zeros(self.out_channels))

    def param_names(self) -> list[str]:
        names = []
        for layer in ("enc1", "enc2", "enc3", "dec2", "dec1", "head"):
            names += [f"{self.prefix}.{layer}.w", f"{self.prefix}.{layer}.b"]
        return names

    def __call__(self, leaves: dict[str, DiffTensor], pack) -> DiffTensor:
        if pack.ndim != 4 or pack.shape[3] != 2:
            raise ValueError(f"small_unet: expected (B,H,W,2), got {pack.shape}")
        if pack.shape[1] % 4 or pack.shape[2] % 4:
            raise ValueError(f"small_unet: H and W must be divisible by 4, got {pack.shape}")
        p = leaves

        def block(x, layer, stride=1):
            y = tp.conv2d(x, p[f"{self.prefix}.{layer}.w"], stride=stride)
            return tp.leaky_relu(y + p[f"{self.prefix}.{layer}.b"], LEAKY_SLOPE)

        f1 = block(pack, "enc1")
        f2 = block(tp.avg_pool2(f1), "enc2")
        f3 = block(tp.avg_pool2(f2), "enc3")
        d2 = block(tp.concat([upsample2(f3), f2], axis=3), "dec2")
        d1 = block(tp.concat([upsample2(d2), f1], axis=3), "dec1")
        return tp.conv2d(d1, p[f"{self.prefix}.head.w"]) + p[f"{self.prefix}.head.b"]


BACKBONE_KINDS = {"conv_matrix_net": ConvMatrixNet, "small_unet": SmallUnet}
