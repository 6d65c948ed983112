"""
Exchange-format (ONNX) model inference and heatmap post-processing.

The network sees a downscaled, normalised, channel-replicated copy of the
8-bit frame and returns per-class scores.  Post-processing happens at model
resolution: threshold, split into components, follow each outer border.
Only the border chains are mapped back to the original grid, where they are
filled again to give the final mask.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .geometry import (
    PolygonChain,
    SpheroidMeasure,
    label_components,
    measure,
    rasterize,
    scale_chain,
    trace_border,
)
from .imgio import GrayImage, resize
from .onnxwire import read_signature

__all__ = [
    "InvalidConfig",
    "SignatureMismatch",
    "ModelConfig",
    "ProbabilityMap",
    "ModelSession",
    "Segmentation",
    "load_model",
    "predict_heatmap",
    "to_probabilities",
    "heatmap_to_chains",
    "segment_heatmap",
    "segment",
]

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

# ImageNet statistics, the usual convention for pretrained encoder backbones
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class InvalidConfig(ValueError):
    pass


class SignatureMismatch(ValueError):
    """Model inputs/outputs do not match the declared configuration."""


@dataclass
class ModelConfig:
    model_path: str = ""
    input_width: int = 650
    input_height: int = 515
    resize_factor: float = 0.5
    channel_count: int = 3
    mean: Tuple[float, ...] = IMAGENET_MEAN
    std: Tuple[float, ...] = IMAGENET_STD
    foreground_channel_index: int = 1
    threshold: float = 0.5
    # "auto" detects logits; "logits" / "probabilities" force the choice
    output_kind: str = "auto"
    deterministic: bool = True
    # "auto" prefers onnxruntime and falls back to OpenCV's DNN module
    backend: str = "auto"

    def __post_init__(self):
        self.mean = tuple(float(m) for m in np.atleast_1d(self.mean))
        self.std = tuple(float(s) for s in np.atleast_1d(self.std))
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise InvalidConfig(f"threshold must be in (0, 1), got {self.threshold}")
        if self.input_width <= 0 or self.input_height <= 0:
            raise InvalidConfig("input dimensions must be positive")
        if self.channel_count not in (1, 3):
            raise InvalidConfig(f"channel_count must be 1 or 3, got {self.channel_count}")
        if not 0.0 < float(self.resize_factor) <= 1.0:
            raise InvalidConfig("resize_factor must be in (0, 1]")
        for name in ("mean", "std"):
            vals = getattr(self, name)
            if len(vals) not in (1, self.channel_count):
                raise InvalidConfig(f"{name} needs 1 or {self.channel_count} entries")
        if any(s <= 0 for s in self.std):
            raise InvalidConfig("std entries must be positive")
        if self.output_kind not in ("auto", "logits", "probabilities"):
            raise InvalidConfig(f"unknown output_kind {self.output_kind!r}")
        if self.backend not in ("auto", "onnxruntime", "opencv"):
            raise InvalidConfig(f"unknown backend {self.backend!r}")
        if self.foreground_channel_index < 0:
            raise InvalidConfig("foreground_channel_index must be >= 0")

    @property
    def factor(self) -> Fraction:
        return Fraction(self.resize_factor).limit_denominator(10_000)

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)

    @classmethod
    def for_model(cls, model_path: PathLike, sidecar: Optional[PathLike] = None, **overrides) -> "ModelConfig":
        """Config for ``model_path``, read from its JSON sidecar when present.

        Looked up in order: ``sidecar``, ``<model>.json``, ``model.json`` in the
        model's directory.  Missing sidecar means defaults.
        """
        model_path = Path(model_path)
        candidates = [Path(sidecar)] if sidecar else [
            model_path.with_suffix(".json"),
            model_path.parent / "model.json",
        ]
        data: dict = {}
        for c in candidates:
            if c.is_file():
                data = json.loads(c.read_text())
                break
        else:
            if sidecar:
                raise FileNotFoundError(f"config sidecar not found: {sidecar}")
        data = {k: v for k, v in data.items() if k != "model_path"}
        return cls.from_dict(data, model_path=str(model_path), **overrides)

    def to_json(self) -> str:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return json.dumps(d, indent=2)


@dataclass(frozen=True)
class ProbabilityMap:
    probs: np.ndarray  # (height, width) float64 in [0, 1]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("probability map must be 2-D")
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("probabilities must be finite and within [0, 1]")
        object.__setattr__(self, "probs", p)

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def height(self) -> int:
        return self.probs.shape[0]


class ModelSession:
    """A loaded network bound to its configuration.

    Not safe for concurrent use; give each worker its own session.
    """

    def __init__(self, config: ModelConfig, backend: str, runner: Callable[[np.ndarray], np.ndarray]):
        self.config = config
        self.backend = backend
        self._run = runner

    def run(self, tensor: np.ndarray) -> np.ndarray:
        return np.asarray(self._run(tensor))


@dataclass
class Segmentation:
    mask: np.ndarray  # original resolution
    chains: List[PolygonChain]  # original resolution, largest component first
    measure: Optional[SpheroidMeasure]
    heatmap: Optional[ProbabilityMap] = field(default=None, repr=False)


def _fixed(dim) -> Optional[int]:
    return dim if isinstance(dim, int) and dim > 0 else None


def _check_signature(config: ModelConfig, path: Path) -> str:
    try:
        inputs, _ = read_signature(path)
    except (ValueError, IndexError) as exc:
        raise SignatureMismatch(f"{path}: not a readable ONNX model ({exc})") from exc
    if len(inputs) != 1:
        raise SignatureMismatch(f"expected one model input, found {len(inputs)}")
    shape = list(inputs[0].shape)
    if len(shape) != 4:
        raise SignatureMismatch(f"expected NCHW input, got shape {shape}")
    _, c, h, w = shape
    if _fixed(c) is not None and c != config.channel_count:
        raise SignatureMismatch(
            f"model expects {c} input channels, config declares {config.channel_count}"
        )
    if _fixed(h) is not None and h != config.input_height:
        raise SignatureMismatch(f"model input height {h} != config {config.input_height}")
    if _fixed(w) is not None and w != config.input_width:
        raise SignatureMismatch(f"model input width {w} != config {config.input_width}")
    return inputs[0].name


def _ort_runner(path: Path, config: ModelConfig, input_name: str):
    import onnxruntime as ort

    opts = ort.SessionOptions()
    if config.deterministic:
        opts.intra_op_num_threads = 1
        opts.inter_op_num_threads = 1
        opts.execution_mode = ort.ExecutionMode.ORT_SEQUENTIAL
    opts.log_severity_level = 3
    sess = ort.InferenceSession(str(path), sess_options=opts, providers=["CPUExecutionProvider"])
    return lambda x: sess.run(None, {input_name: x})[0]


def _opencv_runner(path: Path, config: ModelConfig):
    import cv2

    if config.deterministic:
        cv2.setNumThreads(1)
    net = cv2.dnn.readNetFromONNX(str(path))

    def run(x: np.ndarray) -> np.ndarray:
        net.setInput(x)
        return net.forward().copy()

    return run


def _pick_backend(requested: str) -> str:
    if requested != "auto":
        return requested
    try:
        import onnxruntime  # noqa: F401
    except ImportError:
        return "opencv"
    return "onnxruntime"


def load_model(config: ModelConfig) -> ModelSession:
    """Open the model, check its input signature and run one probe pass so
    a mismatch surfaces before real inference."""
    config.validate()
    path = Path(config.model_path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    input_name = _check_signature(config, path)
    backend = _pick_backend(config.backend)
    if backend == "onnxruntime":
        runner = _ort_runner(path, config, input_name)
    else:
        runner = _opencv_runner(path, config)
    session = ModelSession(config, backend, runner)
    probe = np.zeros((1, config.channel_count, config.input_height, config.input_width), np.float32)
    try:
        out = session.run(probe)
    except Exception as exc:  # backend-specific error types
        raise SignatureMismatch(f"probe inference failed: {exc}") from exc
    if out.ndim not in (3, 4):
        raise SignatureMismatch(f"unexpected model output shape {out.shape}")
    log.debug("loaded %s with %s backend", path, backend)
    return session


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def to_probabilities(scores: np.ndarray, foreground: int = 1, kind: str = "auto") -> np.ndarray:
    """Foreground probability plane from a ``(K, H, W)`` score stack.

    With ``kind="auto"`` the stack is treated as already normalised when every
    value lies in ``[0, 1]`` and the class sums are 1 within 1e-3; otherwise a
    softmax (sigmoid for ``K == 1``) is applied.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    if not np.isfinite(s).all():
        raise RuntimeError("model produced non-finite outputs")
    k = s.shape[0]
    if k == 1:
        if kind == "logits" or (kind == "auto" and (s.min() < 0 or s.max() > 1)):
            return 1.0 / (1.0 + np.exp(-s[0]))
        return np.clip(s[0], 0.0, 1.0)
    if foreground >= k:
        raise SignatureMismatch(f"foreground channel {foreground} but model emits {k} classes")
    if kind == "auto":
        in_range = s.min() >= 0.0 and s.max() <= 1.0
        normalised = in_range and np.abs(s.sum(axis=0) - 1.0).max() <= 1e-3
        kind = "probabilities" if normalised else "logits"
    if kind == "logits":
        s = _softmax(s, axis=0)
    return np.clip(s[foreground], 0.0, 1.0)


def _input_tensor(img: GrayImage, config: ModelConfig) -> np.ndarray:
    x = img.pixels.astype(np.float32) / 255.0
    mean = np.resize(np.asarray(config.mean, dtype=np.float32), config.channel_count)
    std = np.resize(np.asarray(config.std, dtype=np.float32), config.channel_count)
    planes = [(x - mean[c]) / std[c] for c in range(config.channel_count)]
    return np.stack(planes)[None].astype(np.float32)


def predict_heatmap(session: ModelSession, img: GrayImage) -> ProbabilityMap:
    """Foreground probabilities at model resolution for an 8-bit frame."""
    cfg = session.config
    if img.bit_depth != 8:
        raise ValueError("predict_heatmap expects an 8-bit frame; apply to_8bit first")
    small = resize(img, cfg.factor)
    if (small.width, small.height) != (cfg.input_width, cfg.input_height):
        raise SignatureMismatch(
            f"{img.width}x{img.height} at factor {cfg.factor} gives "
            f"{small.width}x{small.height}, model expects {cfg.input_width}x{cfg.input_height}"
        )
    out = session.run(_input_tensor(small, cfg))
    if out.ndim == 4:
        out = out[0]
    elif out.ndim != 3:
        raise SignatureMismatch(f"unexpected model output shape {out.shape}")
    probs = to_probabilities(out, cfg.foreground_channel_index, cfg.output_kind)
    if probs.shape != (small.height, small.width):
        raise SignatureMismatch(f"output plane {probs.shape} != input {small.shape}")
    return ProbabilityMap(probs)


def heatmap_to_chains(heatmap: ProbabilityMap, threshold: float = 0.5) -> Tuple[np.ndarray, List[PolygonChain]]:
    """Binary map (``p >= threshold``) and one outer border per component,
    largest component first."""
    binary = heatmap.probs >= threshold
    labels, order, _ = label_components(binary)
    chains = [trace_border(labels == i) for i in order]
    return binary, chains


def segment_heatmap(
    heatmap: ProbabilityMap,
    original_size: Tuple[int, int],
    resize_factor=0.5,
    threshold: float = 0.5,
    scale_um_per_px: float = 2.04,
) -> Segmentation:
    """Turn a model-resolution heatmap into contours and a mask on the
    original ``(width, height)`` grid."""
    width, height = original_size
    _, chains = heatmap_to_chains(heatmap, threshold)
    up = 1 / Fraction(resize_factor).limit_denominator(10_000)
    mask = np.zeros((height, width), dtype=bool)
    out_chains = []
    for chain in chains:
        c = scale_chain(chain, up)
        v = c.vertices.copy()
        np.clip(v[:, 0], 0, width - 1, out=v[:, 0])
        np.clip(v[:, 1], 0, height - 1, out=v[:, 1])
        c = PolygonChain(v)
        out_chains.append(c)
        mask |= rasterize(c, width, height)
    meas = measure(mask, scale_um_per_px) if mask.any() else None
    return Segmentation(mask=mask, chains=out_chains, measure=meas, heatmap=heatmap)


def segment(session: ModelSession, img: GrayImage) -> Segmentation:
    """Full pipeline for one 8-bit frame at its original resolution."""
    cfg = session.config
    heat = predict_heatmap(session, img)
    return segment_heatmap(
        heat,
        (img.width, img.height),
        resize_factor=cfg.factor,
        threshold=cfg.threshold,
        scale_um_per_px=img.scale_um_per_px,
    )
