"""Shared fixtures: the YOLOv3 fixture network, toy networks with generated
weights, and the acceptance-criteria summary printed after the run."""

import re
import struct
from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from convwatt.netdef import infer_shapes, parse_config

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def yolov3_text() -> str:
    return (
        resources.files("convwatt").joinpath("data/yolov3.cfg").read_text()
    )


@pytest.fixture(scope="session")
def yolov3_net(yolov3_text):
    return infer_shapes(parse_config(yolov3_text))


TOY_CFG = """
[net]
width=8
height=8
channels=3

[convolutional]
batch_normalize=1
filters=8
size=3
stride=1
pad=1
activation=leaky

[convolutional]
filters=8
size=1
stride=1
activation=linear

[shortcut]
from=-2

[convolutional]
batch_normalize=1
filters=4
size=3
stride=2
pad=1
activation=leaky

[upsample]
stride=2

[route]
layers=-1,-5

[yolo]
mask=0,1
anchors=10,14, 23,27
classes=1
num=2
"""


@pytest.fixture(scope="session")
def toy_net():
    return infer_shapes(parse_config(TOY_CFG))


def weights_blob(net, seed: int = 0, kernel_scale: float | None = None) -> bytes:
    """Serialize random parameters for every conv layer of net.

    Layout matches the Darknet weights format: 3 i32 header fields, a u64
    image counter, then per conv biases, batch-norm arrays when the layer
    declares them, and the fp32 kernel. Deterministic in seed.
    """
    rng = np.random.default_rng(seed)
    if any(layer.in_shape is None for layer in net.layers):
        net = infer_shapes(net)
    parts = [struct.pack("<3i", 0, 2, 0), struct.pack("<Q", 0)]
    for layer in net.layers:
        if layer.kind != "convolutional":
            continue
        spec = layer.conv
        f = spec.filters
        fan_in = layer.in_shape.c * spec.kernel * spec.kernel
        parts.append((rng.standard_normal(f) * 0.5).astype("<f4").tobytes())
        if spec.batch_normalize:
            parts.append(rng.uniform(0.5, 1.5, f).astype("<f4").tobytes())
            parts.append((rng.standard_normal(f) * 0.2).astype("<f4").tobytes())
            parts.append(rng.uniform(0.5, 2.0, f).astype("<f4").tobytes())
        n = f * fan_in
        scale = kernel_scale if kernel_scale is not None else fan_in ** -0.5
        parts.append((rng.standard_normal(n) * scale).astype("<f4").tobytes())
    return b"".join(parts)


@pytest.fixture(scope="session")
def toy_weights_bytes(toy_net) -> bytes:
    return weights_blob(toy_net, seed=11)


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion, printed after the test run.

_DETAILS: dict[int, str] = {}
_OUTCOMES: dict[int, str] = {}
_CRITERION_RE = re.compile(r"test_criterion_(\d+)")


@pytest.fixture
def acceptance(request):
    """Recorder for a measured detail string shown in the summary line."""
    match = _CRITERION_RE.search(request.node.name)
    number = int(match.group(1)) if match else 0

    def record(detail: str):
        _DETAILS[number] = detail

    return record


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    match = _CRITERION_RE.search(report.nodeid)
    if match:
        _OUTCOMES[int(match.group(1))] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        status = "PASS" if _OUTCOMES[number] == "passed" else "FAIL"
        detail = _DETAILS.get(number)
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {number:2d}: {status}{suffix}")
