import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from spheroidseg.demo import build_demo_model, synthetic_spheroid  # noqa: E402
from spheroidseg.imgio import GrayImage, save_image, save_mask  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def demo_model(tmp_path_factory):
    return build_demo_model(tmp_path_factory.mktemp("model") / "demo.onnx")


def write_sample_dataset(root, n=4, width=1300, height=1030, days=(1, 4, 8), masks=True):
    """Synthetic 16-bit frames named ``s<k>_d<day>.png`` plus truth masks,
    cycling through ``days`` per spheroid."""
    img_dir, mask_dir = root / "images", root / "masks"
    for i in range(n):
        sid, day = f"s{i // len(days)}", days[i % len(days)]
        radius = min(width, height) * (0.12 + 0.03 * (i % len(days)))
        center = (width * (0.4 + 0.05 * (i % 3)), height * (0.45 + 0.04 * (i % 2)))
        px, truth = synthetic_spheroid(width, height, center=center, radius=radius, seed=i)
        save_image(GrayImage(px, 16), img_dir / f"{sid}_d{day}.png")
        if masks:
            save_mask(truth, mask_dir / f"{sid}_d{day}.png")
    return img_dir, mask_dir


@pytest.fixture(scope="session")
def small_model(tmp_path_factory):
    """Demo network at 160x120 input, i.e. 320x240 frames at half resolution."""
    return build_demo_model(tmp_path_factory.mktemp("small") / "small.onnx", width=160, height=120)


@pytest.fixture(scope="session")
def report():
    def _report(number, title, ok, detail=""):
        # ok=None marks a criterion that could not run (missing assets)
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
