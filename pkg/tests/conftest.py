"""Pytest configuration and fixtures for NeuroDodge tests"""

import sys
from pathlib import Path
from typing import AsyncGenerator, List

import httpx
import numpy as np
import pytest

# Make the package importable when running from a checkout
sys.path.insert(0, str(Path(__file__).parent.parent))

from neurododge.events import EventStream, validate_stream
from neurododge.harness import LabeledStream
from neurododge.main import create_app
from neurododge.models import LayerKind, LayerSpec, ObjectKind, SceneConfig
from neurododge.snn import Network, SpikeRecord, build_network
from tests.fixtures.test_data import TINY_INPUT_SHAPE, TINY_T


def tiny_layers() -> List[LayerSpec]:
    """AvgP(2) -> Conv(2->4) -> AvgP(2) -> FC(64->2) on a 16x16 sensor"""
    return [
        LayerSpec(kind=LayerKind.AVG_POOL, in_channels=2, out_channels=2, kernel_size=2, stride=2, fixed=True),
        LayerSpec(kind=LayerKind.CONV, in_channels=2, out_channels=4, kernel_size=3, padding=1),
        LayerSpec(kind=LayerKind.AVG_POOL, in_channels=4, out_channels=4, kernel_size=2, stride=2, fixed=True),
        LayerSpec(kind=LayerKind.FC, in_channels=64, out_channels=2),
    ]


def make_tiny_network(seed: int = 1, T: int = TINY_T, init_gain: float = 3.0) -> Network:
    return build_network(tiny_layers(), T=T, seed=seed, input_shape=TINY_INPUT_SHAPE, init_gain=init_gain)


def random_stream(seed: int, n: int, width: int = 16, height: int = 16, window_us: int = TINY_T * 1000) -> EventStream:
    """Uniform random events, duplicates allowed"""
    rng = np.random.default_rng(seed)
    t = rng.integers(0, window_us, size=n)
    x = rng.integers(0, width, size=n)
    y = rng.integers(0, height, size=n)
    p = rng.integers(0, 2, size=n)
    return validate_stream(np.stack([t, x, y, p], axis=1), width, height, window_us / 1000.0)


def moving_bar_stream(width: int = 16, height: int = 16, window_us: int = TINY_T * 1000,
                      rightwards: bool = True) -> EventStream:
    """A vertical ON/OFF edge pair sweeping across the sensor"""
    rows = []
    steps = width - 2
    for i in range(steps):
        col = i + 1 if rightwards else width - 2 - i
        t = i * window_us // steps
        for y in range(height // 4, 3 * height // 4):
            rows.append((t, col, y, 1))
            rows.append((t, col - 1 if rightwards else col + 1, y, 0))
    return validate_stream(rows, width, height, window_us / 1000.0)


def reset_free_response(x: np.ndarray, dc: float, dv: float) -> np.ndarray:
    """Run the neuron recursion without reset on an input sequence (leading axis is time)"""
    C, U = np.zeros(x.shape[1:]), np.zeros(x.shape[1:])
    out = np.zeros(x.shape)
    for t in range(x.shape[0]):
        C = dc * C + x[t]
        U = dv * U + C
        out[t] = U
    return out


def object_share(stream: EventStream, object_mask: np.ndarray, subset: EventStream) -> float:
    """Fraction of the subset's events that the renderer tagged as object events"""
    tags = {tuple(e): bool(m) for e, m in zip(stream.coords(), object_mask)}
    return float(np.mean([tags[tuple(e)] for e in subset.coords()]))


@pytest.fixture
def tiny_network() -> Network:
    """Small conv network on a 16x16 sensor"""
    return make_tiny_network()


@pytest.fixture
def tiny_stream() -> EventStream:
    """A few hundred random events on the tiny sensor"""
    return random_stream(seed=3, n=300)


@pytest.fixture
def disk_scene() -> SceneConfig:
    """A bright disk crossing the full-size sensor from the left"""
    return SceneConfig(kind=ObjectKind.DISK, start=(40.0, 64.0), end=(88.0, 64.0), radius=6.0,
                       direction=0, noise_rate=0.0, seed=7)


@pytest.fixture
def tiny_dataset() -> List[LabeledStream]:
    """Bars sweeping left-to-right (label 0) and right-to-left (label 1)"""
    samples = []
    for i in range(4):
        samples.append(LabeledStream(moving_bar_stream(rightwards=True), 0))
        samples.append(LabeledStream(moving_bar_stream(rightwards=False), 1))
    return samples


@pytest.fixture
async def api_client(tiny_network) -> AsyncGenerator[httpx.AsyncClient, None]:
    """HTTP client bound to an in-process service holding the tiny network"""
    app = create_app(tiny_network)
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://test",
                                 timeout=30.0) as client:
        yield client


# Utility functions for tests
def assert_valid_stream(stream: EventStream):
    """Assert the stream invariants: in bounds, binary polarity, sorted, inside the window"""
    assert np.all((stream.x >= 0) & (stream.x < stream.width))
    assert np.all((stream.y >= 0) & (stream.y < stream.height))
    assert np.all((stream.p == 0) | (stream.p == 1))
    assert np.all(np.diff(stream.t) >= 0)
    assert np.all((stream.t >= 0) & (stream.t < stream.window_us))


def assert_records_equal(a: SpikeRecord, b: SpikeRecord):
    """Assert two records carry bit-identical spikes, counts and synaptic work"""
    assert len(a.spikes) == len(b.spikes)
    for layer, (sa, sb) in enumerate(zip(a.spikes, b.spikes)):
        assert sa.shape == sb.shape, f"layer {layer} shape"
        assert np.array_equal(sa, sb), f"layer {layer} spikes differ"
    assert np.array_equal(a.counts, b.counts)
    assert a.synaptic_events == b.synaptic_events


def assert_binary(array: np.ndarray):
    """Assert every entry is 0 or 1"""
    assert np.all((array == 0) | (array == 1))
