"""Toy segmentation network and accuracy predictor.

The segmentation model is a three-conv stack with a per-pixel channel
softmax; its second ReLU activation is tapped and average-pooled into a
16-dim feature embedding. The accuracy predictor consumes the input image
concatenated with the segmentation probabilities and regresses one value in
[0, 1] per foreground class. The two networks share no parameters, so
training one can never move the other.
"""

from __future__ import annotations

import struct

import numpy as np

from .nn import (ChannelSoftmax, Conv2D, Dense, GlobalAvgPool, Network, ReLU,
                 Sigmoid, build_layer)

FEATURE_DIM = 16

CHECKPOINT_MAGIC = b"PAALNN1\x00"

_LAYER_TAGS = {
    "conv2d": 1,
    "dense": 2,
    "relu": 3,
    "sigmoid": 4,
    "channel_softmax": 5,
    "global_avg_pool": 6,
}
_TAG_KINDS = {tag: kind for kind, tag in _LAYER_TAGS.items()}


class CheckpointError(ValueError):
    """Malformed model checkpoint file."""


def build_seg_model(in_channels: int = 1, num_classes: int = 4,
                    seed: int = 0) -> Network:
    """Segmentation net: conv(in->8)+ReLU, conv(8->16)+ReLU (tapped), conv(16->C), softmax."""
    rng = np.random.default_rng([seed, 0x5E6])
    layers = [
        Conv2D(in_channels, 8, rng=rng),
        ReLU(),
        Conv2D(8, FEATURE_DIM, rng=rng),
        ReLU(),
        Conv2D(FEATURE_DIM, num_classes, rng=rng),
        ChannelSoftmax(),
    ]
    return Network(layers, taps={"feature": 3})


def build_ap_model(in_channels: int = 1, num_classes: int = 4,
                   seed: int = 0) -> Network:
    """Accuracy predictor: conv((in+C)->8)+ReLU, global pool, dense(8->C-1), sigmoid."""
    rng = np.random.default_rng([seed, 0xA9])
    num_fg = num_classes - 1
    layers = [
        Conv2D(in_channels + num_classes, 8, rng=rng),
        ReLU(),
        GlobalAvgPool(),
        Dense(8, num_fg, rng=rng),
        Sigmoid(),
    ]
    return Network(layers)


def normalize_images(images: np.ndarray) -> np.ndarray:
    """u8 images (B, H, W) or (B, C, H, W) -> float32 in [0, 1] with a channel axis."""
    imgs = np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[:, None, :, :]
    return imgs.astype(np.float32) / 255.0


def seg_forward(seg: Network, images: np.ndarray,
                train: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel class probabilities plus the pooled 16-dim feature embedding."""
    acts = seg.forward(images, train=train)
    probs = acts[-1]
    features = seg.tapped(acts, "feature").mean(axis=(2, 3))
    return probs, features


def concat_channels(images: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Stack image channels (scaled to [0,1]) in front of probability channels."""
    if images.ndim != 4 or probs.ndim != 4:
        raise ValueError("concat_channels expects (B, C, H, W) arrays")
    if images.shape[0] != probs.shape[0] or images.shape[2:] != probs.shape[2:]:
        raise ValueError(
            f"image batch/spatial dims {images.shape} do not match probs {probs.shape}")
    return np.concatenate([images, probs], axis=1)


def ap_forward(ap: Network, images: np.ndarray, probs: np.ndarray,
               train: bool = False) -> np.ndarray:
    """Predicted per-foreground-class accuracy in [0, 1].

    ``probs`` is consumed as a constant: no gradient path back into the
    segmentation model exists.
    """
    x = concat_channels(images, probs)
    return ap.forward(x, train=train)[-1]


def save_checkpoint(net: Network, path) -> None:
    """Write layer specs and raw float32 parameters (documented binary format)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            kind, extents = layer.spec()
            fh.write(struct.pack("<II", _LAYER_TAGS[kind], len(extents)))
            for e in extents:
                fh.write(struct.pack("<I", e))
        for layer in net.layers:
            for p in layer.params():
                fh.write(np.ascontiguousarray(
                    p.value, dtype="<f4").tobytes())


def load_checkpoint(path, taps: dict[str, int] | None = None) -> Network:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (n_layers,) = take("<I")
    layers = []
    for _ in range(n_layers):
        tag, n_ext = take("<II")
        if tag not in _TAG_KINDS:
            raise CheckpointError(f"unknown layer tag {tag}")
        extents = take(f"<{n_ext}I") if n_ext else ()
        layers.append(build_layer(_TAG_KINDS[tag], extents))
    for layer in layers:
        for p in layer.params():
            count = p.value.size
            size = count * 4
            if off + size > len(data):
                raise CheckpointError("truncated checkpoint")
            buf = np.frombuffer(data, dtype="<f4", count=count, offset=off)
            p.value = buf.reshape(p.value.shape).astype(np.float32)
            p.grad = np.zeros_like(p.value)
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
            off += size
    if off != len(data):
        raise CheckpointError("trailing bytes after parameters")
    return Network(layers, taps=taps)
