import numpy as np
import pytest

from spsmask.config import PipelineConfig
from spsmask.pipeline import init_weights, weights_from_tensors
from spsmask.tensor import FeaturePyramid, RoiDetection


def constructed_weights(config, rng, scale=0.3):
    """Weights drawn tensor-by-tensor in the test, loaded through the weight-file path."""
    template = init_weights(config, zero=True).tensors()
    tensors = {}
    for name, arr in template.items():
        if name.endswith(".dilation"):
            tensors[name] = arr
            continue
        fan_in = arr.shape[1] * (9 if arr.ndim == 4 else 1) if arr.ndim > 1 else 1
        tensors[name] = rng.uniform(-scale, scale, size=arr.shape) * (2.0 / np.sqrt(fan_in))
    return weights_from_tensors(tensors, config)


def small_scene(rng, n_rois, f, image=(128, 128)):
    pyramid = FeaturePyramid.random(image, f, rng)
    rois = []
    for _ in range(n_rois):
        x1, y1 = rng.uniform(0, image[1] / 2), rng.uniform(0, image[0] / 2)
        bw, bh = rng.uniform(10, image[1] / 2), rng.uniform(10, image[0] / 2)
        rois.append(RoiDetection((x1, y1, x1 + bw, y1 + bh), float(rng.uniform()), rng.standard_normal(f)))
    return pyramid, rois


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return PipelineConfig(top_k=None, module="sfm", feature_size=16, backbone_channels=16)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
