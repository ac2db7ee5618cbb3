import sys

import numpy as np
import pytest

from chunkflow.datagen import build_dataset, build_videos
from chunkflow.numerics import VectorFieldNet, make_rng


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture(scope="session")
def tiny_dataset():
    """One video per class cell, 24 frames of 8x8, chunk length 4: 36 pairs of d = 256."""
    videos = build_videos(7, 24, 8, 8, 1)
    return build_dataset(videos, 4)


@pytest.fixture
def small_net(rng):
    return VectorFieldNet.init(6, (9, 7), 4, rng)


def naive_forward(net, x, t):
    """Scalar-loop reference for the MLP forward pass."""
    from chunkflow.numerics import time_embed
    h = list(np.concatenate([x, time_embed(t, net.time_width)]))
    last = len(net.weights) - 1
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += h[i] * w[i, j]
            out.append(s if li == last else np.tanh(s))
        h = out
    return np.array(h)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines at the end of the run."""
    lines = getattr(sys.modules.get("test_acceptance"), "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
