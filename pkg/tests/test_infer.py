import json
from fractions import Fraction

import numpy as np
import pytest
from scipy import ndimage

from oracles import disk
from spheroidseg.demo import build_demo_model, synthetic_spheroid
from spheroidseg.geometry import fill_holes, trace_border
from spheroidseg.imgio import GrayImage, resize, resize_mask, to_8bit
from spheroidseg.infer import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    InvalidConfig,
    ModelConfig,
    ProbabilityMap,
    SignatureMismatch,
    heatmap_to_chains,
    load_model,
    predict_heatmap,
    segment,
    segment_heatmap,
    to_probabilities,
)


@pytest.fixture(scope="module")
def session(demo_model):
    return load_model(ModelConfig.for_model(demo_model))


@pytest.fixture(scope="module")
def frame():
    px, truth = synthetic_spheroid(seed=3)
    return to_8bit(GrayImage(px, 16)), truth


# ---------------------------------------------------------------- config
def test_config_defaults():
    cfg = ModelConfig()
    assert (cfg.input_width, cfg.input_height, cfg.channel_count, cfg.threshold) == (650, 515, 3, 0.5)
    assert cfg.factor == Fraction(1, 2)
    assert cfg.mean == IMAGENET_MEAN and cfg.std == IMAGENET_STD


@pytest.mark.parametrize(
    "kw",
    [
        {"threshold": 1.5},
        {"threshold": 0.0},
        {"input_width": 0},
        {"channel_count": 2},
        {"resize_factor": 1.5},
        {"std": (0.0, 1.0, 1.0)},
        {"mean": (0.1, 0.2)},
        {"output_kind": "softmax"},
        {"backend": "tensorrt"},
    ],
)
def test_config_rejects(kw):
    with pytest.raises(InvalidConfig):
        ModelConfig(**kw)


def test_config_sidecar_lookup(tmp_path):
    model = tmp_path / "net.onnx"
    model.write_bytes(b"")
    assert ModelConfig.for_model(model).threshold == 0.5
    (tmp_path / "model.json").write_text(json.dumps({"threshold": 0.4}))
    assert ModelConfig.for_model(model).threshold == 0.4
    (tmp_path / "net.json").write_text(json.dumps({"threshold": 0.3, "mean": [0.5], "std": [0.25]}))
    cfg = ModelConfig.for_model(model, threshold=0.6)
    assert cfg.threshold == 0.6 and cfg.mean == (0.5,)
    (tmp_path / "bad.json").write_text(json.dumps({"thresh": 0.3}))
    with pytest.raises(InvalidConfig):
        ModelConfig.for_model(model, sidecar=tmp_path / "bad.json")
    with pytest.raises(FileNotFoundError):
        ModelConfig.for_model(model, sidecar=tmp_path / "none.json")


def test_config_json_round_trip():
    cfg = ModelConfig(model_path="m.onnx", threshold=0.7, mean=(0.5,), std=(0.2,))
    assert ModelConfig.from_dict(json.loads(cfg.to_json())) == cfg


# ---------------------------------------------------------------- loading
def test_load_demo_session(session):
    assert session.backend in ("onnxruntime", "opencv")
    out = session.run(np.zeros((1, 3, 515, 650), np.float32))
    assert out.shape == (1, 2, 515, 650)


def test_missing_model(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(ModelConfig(model_path=str(tmp_path / "absent.onnx")))


def test_channel_mismatch(tmp_path):
    path = build_demo_model(tmp_path / "gray.onnx", channels=1, write_sidecar=False)
    with pytest.raises(SignatureMismatch):
        load_model(ModelConfig(model_path=str(path), channel_count=3))
    assert load_model(ModelConfig(model_path=str(path), channel_count=1, mean=(0.5,), std=(0.25,)))


def test_size_mismatch(tmp_path):
    path = build_demo_model(tmp_path / "small.onnx", width=64, height=48, write_sidecar=False)
    with pytest.raises(SignatureMismatch):
        load_model(ModelConfig(model_path=str(path)))


def test_not_a_model(tmp_path):
    p = tmp_path / "junk.onnx"
    p.write_bytes(b"\xff\xff\xff\xff garbage")
    with pytest.raises(SignatureMismatch):
        load_model(ModelConfig(model_path=str(p)))


def test_dynamic_dims_accepted(tmp_path):
    path = build_demo_model(tmp_path / "dyn.onnx", dynamic=True, write_sidecar=False)
    sess = load_model(ModelConfig(model_path=str(path), input_width=100, input_height=80, resize_factor=1.0))
    img = GrayImage(np.full((80, 100), 200, np.uint8))
    assert predict_heatmap(sess, img).probs.shape == (80, 100)


def test_onnxruntime_backend(demo_model, frame):
    pytest.importorskip("onnxruntime")
    sess = load_model(ModelConfig.for_model(demo_model, backend="onnxruntime"))
    cv = load_model(ModelConfig.for_model(demo_model, backend="opencv"))
    img, _ = frame
    a = predict_heatmap(sess, img).probs
    b = predict_heatmap(cv, img).probs
    assert np.abs(a - b).max() < 1e-5


# ---------------------------------------------------------------- heatmap
def demo_reference(img8, cfg, cutoff=0.5, gain=20.0):
    """The demo graph written out in numpy (float64)."""
    x = img8.astype(np.float64) / 255.0
    mean = np.resize(np.asarray(cfg.mean), cfg.channel_count)
    std = np.resize(np.asarray(cfg.std), cfg.channel_count)
    planes = [(x - m) / s for m, s in zip(mean, std)]
    gray = sum(p * s + m for p, m, s in zip(planes, mean, std)) / cfg.channel_count - cutoff
    smooth = ndimage.correlate(gray, np.full((5, 5), 1 / 25), mode="constant", cval=0.0)
    logit_fg = -gain * smooth
    return 1.0 / (1.0 + np.exp(-logit_fg))  # softmax of (0, l) is sigmoid(l)


def test_heatmap_matches_numpy_graph(session, frame):
    img, _ = frame
    heat = predict_heatmap(session, img)
    small = resize(img, Fraction(1, 2)).pixels
    ref = demo_reference(small, session.config)
    assert heat.probs.shape == (515, 650)
    assert np.abs(heat.probs - ref).max() < 1e-4


def test_heatmap_deterministic(session, frame):
    img, _ = frame
    a = predict_heatmap(session, img).probs
    b = predict_heatmap(session, img).probs
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_heatmap_rejects_bad_input(session):
    with pytest.raises(ValueError):
        predict_heatmap(session, GrayImage(np.zeros((1030, 1300), np.uint16), 16))
    with pytest.raises(SignatureMismatch):
        predict_heatmap(session, GrayImage(np.zeros((100, 100), np.uint8)))


def test_to_probabilities_softmax_normalised(rng):
    logits = rng.normal(0, 5, (2, 7, 9))
    p = to_probabilities(logits, 1)
    p0 = to_probabilities(logits, 0)
    assert np.allclose(p + p0, 1.0, atol=1e-12)
    assert np.allclose(p, 1 / (1 + np.exp(logits[0] - logits[1])), atol=1e-12)


def test_to_probabilities_detection(rng):
    probs = rng.random((1, 4, 4))
    stack = np.concatenate([1 - probs, probs])
    assert np.array_equal(to_probabilities(stack, 1), probs[0])
    # in range but sums off by more than 1e-3: treated as logits
    off = stack * 0.99
    assert not np.allclose(to_probabilities(off, 1), off[1])
    assert np.allclose(to_probabilities(stack, 1, "logits"), 1 / (1 + np.exp(stack[0] - stack[1])))
    single = rng.normal(0, 3, (1, 4, 4))
    assert np.allclose(to_probabilities(single, 0), 1 / (1 + np.exp(-single[0])))
    with pytest.raises(SignatureMismatch):
        to_probabilities(stack, 2)
    with pytest.raises(RuntimeError):
        to_probabilities(np.full((2, 2, 2), np.nan), 1)


def test_probability_map_bounds():
    with pytest.raises(ValueError):
        ProbabilityMap(np.array([[1.2]]))
    with pytest.raises(ValueError):
        ProbabilityMap(np.zeros(3))


# ---------------------------------------------------------------- post-processing
def test_threshold_is_inclusive():
    p = np.full((5, 5), 0.1)
    p[2, 2] = 0.5
    binary, chains = heatmap_to_chains(ProbabilityMap(p), 0.5)
    assert binary[2, 2] and binary.sum() == 1 and len(chains) == 1


def test_threshold_monotone(rng):
    p = ProbabilityMap(ndimage.gaussian_filter(rng.random((40, 40)), 2))
    masks = [heatmap_to_chains(p, t)[0] for t in (0.3, 0.45, 0.5, 0.55, 0.7)]
    for lo, hi in zip(masks, masks[1:]):
        assert not (hi & ~lo).any()


def test_disk_heatmap():
    d = disk(60, 15)
    heat = ProbabilityMap(np.where(d, 0.9, 0.1))
    seg = segment_heatmap(heat, (60, 60), resize_factor=1, scale_um_per_px=1.0)
    assert np.array_equal(seg.mask, d) and len(seg.chains) == 1
    assert seg.measure.area_px == d.sum()


def test_two_blob_heatmap():
    p = np.zeros((60, 80))
    p[5:25, 5:25] = 0.8  # area 400
    p[40:50, 60:70] = 0.8  # area 100
    seg = segment_heatmap(ProbabilityMap(p), (80, 60), resize_factor=1, scale_um_per_px=1.0)
    assert len(seg.chains) == 2
    assert seg.measure.area_px == 400
    assert seg.chains[0] == trace_border(p >= 0.5)


def test_empty_heatmap():
    seg = segment_heatmap(ProbabilityMap(np.zeros((10, 12))), (24, 20))
    assert seg.chains == [] and seg.measure is None and not seg.mask.any()


def test_upscaled_mask_matches_nearest_within_band(rng):
    for _ in range(5):
        field = ndimage.gaussian_filter(rng.random((60, 80)), 4)
        thr = np.quantile(field, 0.7)
        p = ProbabilityMap((field >= thr) * 0.8 + 0.1)
        seg = segment_heatmap(p, (160, 120), resize_factor=0.5, scale_um_per_px=1.0)
        # chains describe outer borders only, so holes come out filled
        binary = fill_holes(p.probs >= 0.5)
        near = resize_mask(binary, 160, 120)
        diff = seg.mask ^ near
        # every disagreement lies within 1 px of the nearest-neighbour boundary
        edge = near ^ ndimage.binary_erosion(near, border_value=0)
        edge |= ndimage.binary_dilation(near) & ~near
        band = ndimage.binary_dilation(edge, iterations=1)
        assert not (diff & ~band).any()
        total_perimeter = sum(len(c) for c in seg.chains)
        assert diff.sum() <= 2 * total_perimeter


def test_segment_demo_frame(session, frame):
    img, truth = frame
    seg = segment(session, img)
    assert seg.mask.shape == (1030, 1300)
    iou = (seg.mask & truth).sum() / (seg.mask | truth).sum()
    assert iou > 0.95
    assert seg.measure is not None and 0.9 < seg.measure.circularity < 1.1
