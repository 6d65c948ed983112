"""
Synthetic data and a tiny stand-in network for smoke runs and tests.

The demo network is a fixed (untrained) convolutional graph that scores dark
smooth regions as foreground.  It has the published model's interface
(NCHW float input, two-class logits) so the whole pipeline can be exercised
without the real weights.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .infer import IMAGENET_MEAN, IMAGENET_STD, ModelConfig
from .onnxwire import Node, encode_model


def build_demo_model(
    path,
    width: int = 650,
    height: int = 515,
    dynamic: bool = False,
    channels: int = 3,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    cutoff: float = 0.5,
    gain: float = 20.0,
    write_sidecar: bool = True,
) -> Path:
    """Write the demo ONNX graph (and a ``<name>.json`` sidecar) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mean = np.resize(np.asarray(mean, dtype=np.float64), channels)
    std = np.resize(np.asarray(std, dtype=np.float64), channels)
    # undo the input normalisation, average the channels back to gray and
    # centre on the cutoff so the blur's zero padding sits on the decision level
    w_gray = (std / channels).reshape(1, channels, 1, 1)
    b_gray = np.array([mean.sum() / channels - cutoff])
    w_blur = np.full((1, 1, 5, 5), 1.0 / 25.0)
    # background logit 0, foreground logit gain * (cutoff - gray)
    w_cls = np.array([0.0, -gain]).reshape(2, 1, 1, 1)
    b_cls = np.array([0.0, 0.0])
    h_dim = "height" if dynamic else height
    w_dim = "width" if dynamic else width
    blob = encode_model(
        nodes=[
            Node("Conv", ["image", "w_gray", "b_gray"], ["gray"], {"kernel_shape": [1, 1]}),
            Node("Conv", ["gray", "w_blur"], ["smooth"], {"kernel_shape": [5, 5], "pads": [2, 2, 2, 2]}),
            Node("Conv", ["smooth", "w_cls", "b_cls"], ["logits"], {"kernel_shape": [1, 1]}),
        ],
        initializers={
            "w_gray": w_gray,
            "b_gray": b_gray,
            "w_blur": w_blur,
            "w_cls": w_cls,
            "b_cls": b_cls,
        },
        inputs={"image": [1, channels, h_dim, w_dim]},
        outputs={"logits": [1, 2, h_dim, w_dim]},
        name="demo_spheroid_net",
    )
    path.write_bytes(blob)
    if write_sidecar:
        cfg = ModelConfig(
            input_width=width,
            input_height=height,
            channel_count=channels,
            mean=tuple(mean.tolist()),
            std=tuple(std.tolist()),
        )
        d = json.loads(cfg.to_json())
        d.pop("model_path")
        path.with_suffix(".json").write_text(json.dumps(d, indent=2))
    return path


def synthetic_spheroid(
    width: int = 1300,
    height: int = 1030,
    center: Optional[Tuple[float, float]] = None,
    radius: float = 120.0,
    dark: int = 1100,
    bright: int = 1500,
    noise: float = 10.0,
    bit_depth: int = 16,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """A dark disk on a brighter field plus Gaussian noise.

    Returns ``(pixels, truth)`` where ``truth`` is the exact disk mask.
    """
    rng = np.random.default_rng(seed)
    cx, cy = center if center is not None else (width / 2.0, height / 2.0)
    yy, xx = np.mgrid[:height, :width]
    truth = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    img = np.where(truth, dark, bright).astype(np.float64)
    img += rng.normal(0.0, noise, img.shape)
    top = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    return np.clip(np.rint(img), 0, top).astype(dtype), truth
