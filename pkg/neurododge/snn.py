"""Dual-state LIF dynamics and the layered network with its dense forward pass.

Per layer and step (inputs O from the layer below at the same step):

    C' = delta_curr * C + W O_in
    U' = delta_volt * U * (1 - O_prev) + C'
    O  = U' >= u_th

Weights are kept on a fixed-point grid (integer multiples of 2**-22, |w| < 4)
so every synaptic sum is exact in float64 whatever the summation order; the
dense path here and the event-driven path in ``neurododge.sparse`` therefore
produce bit-identical spikes.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from neurododge.errors import ConfigError, ShapeError
from neurododge.events import EventField
from neurododge.models import LayerKind, LayerSpec, NeuronParams

logger = logging.getLogger(__name__)

GRID_BITS = 22
GRID = 2.0 ** -GRID_BITS
WEIGHT_LIMIT = 2 ** 24 - 1  # in grid units; float32 holds these exactly
INIT_GAIN = 3.0
INPUT_SHAPE = (2, 128, 128)

Shape = Tuple[int, ...]


def snap_weights(w: np.ndarray) -> np.ndarray:
    """Round onto the weight grid, clipping to (-4, 4)"""
    units = np.clip(np.round(np.asarray(w, dtype=np.float64) / GRID), -WEIGHT_LIMIT, WEIGHT_LIMIT)
    return units * GRID


def default_layers() -> List[LayerSpec]:
    """AvgP(4) -> Conv(2->16) -> AvgP(2) -> Conv(16->32) -> AvgP(2) -> FC(2048->512) -> FC(512->2)"""
    return [
        LayerSpec(kind=LayerKind.AVG_POOL, in_channels=2, out_channels=2, kernel_size=4, stride=4, fixed=True),
        LayerSpec(kind=LayerKind.CONV, in_channels=2, out_channels=16, kernel_size=3, padding=1),
        LayerSpec(kind=LayerKind.AVG_POOL, in_channels=16, out_channels=16, kernel_size=2, stride=2, fixed=True),
        LayerSpec(kind=LayerKind.CONV, in_channels=16, out_channels=32, kernel_size=3, padding=1),
        LayerSpec(kind=LayerKind.AVG_POOL, in_channels=32, out_channels=32, kernel_size=2, stride=2, fixed=True),
        LayerSpec(kind=LayerKind.FC, in_channels=2048, out_channels=512),
        LayerSpec(kind=LayerKind.FC, in_channels=512, out_channels=2),
    ]


# --- neuron state ---------------------------------------------------------

@dataclass
class LayerState:
    C: np.ndarray
    U: np.ndarray
    O_prev: np.ndarray
    last_update: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, shape: Shape, track_updates: bool = False) -> "LayerState":
        last = np.full(shape, -1, dtype=np.int64) if track_updates else None
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), last)


def lif_step(state: LayerState, weighted_input: np.ndarray, params: NeuronParams) -> Tuple[LayerState, np.ndarray]:
    """One step of the dual-state update; the threshold test is inclusive"""
    if np.shape(weighted_input) != np.shape(state.C):
        raise ShapeError(f"Input shape {np.shape(weighted_input)} does not match state {np.shape(state.C)}")
    C = params.delta_curr * state.C + weighted_input
    U = params.delta_volt * state.U * (1.0 - state.O_prev) + C
    spikes = (U >= params.u_th).astype(np.float64)
    return LayerState(C, U, spikes, state.last_update), spikes


def decay_steps(C: np.ndarray, U: np.ndarray, O: np.ndarray, k: int, params: NeuronParams) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form state after k zero-input steps, assuming no spike on the way"""
    dc, dv = params.delta_curr, params.delta_volt
    if k <= 0:
        return np.asarray(C, dtype=np.float64), np.asarray(U, dtype=np.float64)
    if math.isclose(dc, dv):
        carry = k * dc ** k
    else:
        carry = dc * (dv ** k - dc ** k) / (dv - dc)
    return dc ** k * C, dv ** k * U * (1.0 - O) + carry * C


def reachable_voltage(C: np.ndarray, U: np.ndarray, O: np.ndarray, params: NeuronParams) -> np.ndarray:
    """Upper bound on U over any run of zero-input steps from (C, U, O)"""
    dc = params.delta_curr
    gain = math.inf if dc >= 1.0 else dc / (1.0 - dc)
    with np.errstate(invalid="ignore"):
        carry = np.where(C > 0, C * gain, 0.0)
    return np.maximum(U * (1.0 - O), 0.0) + carry


# --- network --------------------------------------------------------------

@dataclass(frozen=True)
class QuantizationInfo:
    sigma: float
    scales: Tuple[float, ...]
    mantissas: Tuple[np.ndarray, ...]  # int8, W_q = mantissa * sigma
    clamped: Tuple[int, ...] = ()


@dataclass(frozen=True)
class Network:
    layers: Tuple[LayerSpec, ...]
    weights: Tuple[np.ndarray, ...]
    params: Tuple[NeuronParams, ...]
    T: int
    input_shape: Shape = INPUT_SHAPE
    quantization: Optional[QuantizationInfo] = None
    shapes: Tuple[Shape, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"T must be at least 1, got {self.T}")
        if not (len(self.layers) == len(self.weights) == len(self.params)):
            raise ShapeError("Layers, weights and params differ in length")
        shapes = layer_shapes(self.layers, self.input_shape)
        for spec, w in zip(self.layers, self.weights):
            if w.shape != weight_shape(spec):
                raise ShapeError(f"{spec.kind.value} weight has shape {w.shape}, expected {weight_shape(spec)}")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def quantized(self) -> bool:
        return self.quantization is not None

    @property
    def output_channels(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def with_weights(self, weights: Sequence[np.ndarray], quantization: Optional[QuantizationInfo] = None) -> "Network":
        return replace(self, weights=tuple(snap_weights(w) for w in weights), quantization=quantization)


def output_shape(spec: LayerSpec, in_shape: Shape) -> Shape:
    k, p = spec.kernel_size, spec.padding
    if spec.kind == LayerKind.FC:
        if int(np.prod(in_shape)) != spec.in_channels:
            raise ShapeError(f"FC expects {spec.in_channels} inputs, previous layer gives {int(np.prod(in_shape))}")
        return (spec.out_channels,)
    if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
        raise ShapeError(f"{spec.kind.value} expects {spec.in_channels} channels, got shape {in_shape}")
    c, h, w = in_shape
    if spec.kind == LayerKind.AVG_POOL:
        if h % k or w % k:
            raise ShapeError(f"Pooling {k} does not divide {h}x{w}")
        return (c, h // k, w // k)
    oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"Convolution {k} with padding {p} does not fit {h}x{w}")
    return (spec.out_channels, oh, ow)


def layer_shapes(layers: Sequence[LayerSpec], input_shape: Shape) -> List[Shape]:
    shapes, shape = [], tuple(input_shape)
    for spec in layers:
        shape = output_shape(spec, shape)
        shapes.append(shape)
    return shapes


def weight_shape(spec: LayerSpec) -> Shape:
    k = spec.kernel_size
    if spec.kind == LayerKind.AVG_POOL:
        return (k, k)
    if spec.kind == LayerKind.CONV:
        return (spec.out_channels, spec.in_channels, k, k)
    return (spec.out_channels, spec.in_channels)


def fan_in(spec: LayerSpec) -> int:
    k = spec.kernel_size
    if spec.kind == LayerKind.FC:
        return spec.in_channels
    if spec.kind == LayerKind.CONV:
        return spec.in_channels * k * k
    return k * k


def fan_out(spec: LayerSpec) -> int:
    """Synapses leaving one presynaptic neuron (interior positions for convolutions)"""
    if spec.kind == LayerKind.FC:
        return spec.out_channels
    if spec.kind == LayerKind.CONV:
        return spec.out_channels * spec.kernel_size ** 2
    return 1


def build_network(
    specs: Optional[Sequence[LayerSpec]] = None,
    T: int = 50,
    params: Union[NeuronParams, Sequence[NeuronParams], None] = None,
    seed: int = 0,
    input_shape: Shape = INPUT_SHAPE,
    init_gain: float = INIT_GAIN,
) -> Network:
    """Uniform +-gain*sqrt(6/fan_in) init for trainable layers, 1/k^2 for pooling"""
    specs = tuple(specs) if specs is not None else tuple(default_layers())
    if params is None:
        params = NeuronParams()
    if isinstance(params, NeuronParams):
        params = [params] * len(specs)
    if len(params) != len(specs):
        raise ConfigError("One NeuronParams per layer is required")
    layer_shapes(specs, input_shape)
    rng = np.random.default_rng(seed)
    weights = []
    for spec in specs:
        shape = weight_shape(spec)
        if spec.fixed:
            weights.append(np.full(shape, 1.0 / spec.kernel_size ** 2))
        else:
            bound = init_gain * math.sqrt(6.0 / fan_in(spec))
            weights.append(rng.uniform(-bound, bound, size=shape))
    net = Network(layers=specs, weights=tuple(snap_weights(w) for w in weights), params=tuple(params),
                  T=T, input_shape=tuple(input_shape))
    logger.info(f"Built network: {len(specs)} layers, T={T}, shapes={list(net.shapes)}")
    return net


# --- synaptic operators (leading axis is time) ----------------------------

def synaptic_input(spec: LayerSpec, w: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Weighted input a[t] = W s[t] for every step at once"""
    T = s.shape[0]
    k, p = spec.kernel_size, spec.padding
    if spec.kind == LayerKind.FC:
        return s.reshape(T, -1) @ w.T
    if spec.kind == LayerKind.AVG_POOL:
        _, c, h, wd = s.shape
        blocks = s.reshape(T, c, h // k, k, wd // k, k)
        return np.einsum("tcyixj,ij->tcyx", blocks, w)
    padded = np.pad(s, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.moveaxis(out, 3, 1)


def synaptic_input_adjoint(spec: LayerSpec, w: np.ndarray, d: np.ndarray, in_shape: Shape) -> np.ndarray:
    """Transpose of ``synaptic_input``: maps d(L)/d(a) back onto the presynaptic spikes"""
    T = d.shape[0]
    k, p = spec.kernel_size, spec.padding
    if spec.kind == LayerKind.FC:
        return (d.reshape(T, -1) @ w).reshape((T,) + tuple(in_shape))
    if spec.kind == LayerKind.AVG_POOL:
        spread = np.repeat(np.repeat(d, k, axis=2), k, axis=3)
        return spread * np.tile(w, (in_shape[1] // k, in_shape[2] // k))
    q = k - 1 - p
    padded = np.pad(d, ((0, 0), (0, 0), (q, q), (q, q)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    out = np.tensordot(windows, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return np.moveaxis(out, 3, 1)


def weight_grad(spec: LayerSpec, d: np.ndarray, s_prev: np.ndarray) -> np.ndarray:
    """Sum over steps of d[t] s_prev[t]^T in the layer's weight layout; zero for fixed layers"""
    if spec.fixed:
        return np.zeros(weight_shape(spec))
    T = d.shape[0]
    if spec.kind == LayerKind.FC:
        return d.reshape(T, -1).T @ s_prev.reshape(T, -1)
    k, p = spec.kernel_size, spec.padding
    padded = np.pad(s_prev, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    return np.tensordot(d, windows, axes=([0, 2, 3], [0, 2, 3]))


# --- dense forward --------------------------------------------------------

@dataclass
class SpikeRecord:
    input: np.ndarray                      # T x 2 x H x W binary input
    spikes: List[np.ndarray]               # per layer, T x (layer shape), uint8
    counts: np.ndarray                     # output spikes per channel
    synaptic_events: int = 0
    traces: Optional[List[np.ndarray]] = None  # per layer membrane voltage, training only
    neuron_updates: Optional[List[int]] = None

    @property
    def T(self) -> int:
        return int(self.input.shape[0])


def integrate(a: np.ndarray, params: NeuronParams, record_traces: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Run the neuron recursion over the time axis of a precomputed weighted input"""
    state = LayerState.zeros(a.shape[1:])
    spikes = np.zeros(a.shape, dtype=np.uint8)
    traces = np.zeros(a.shape) if record_traces else None
    for t in range(a.shape[0]):
        state, out = lif_step(state, a[t], params)
        spikes[t] = out
        if record_traces:
            traces[t] = state.U
    return spikes, traces


def forward_frames(net: Network, frames: np.ndarray, train: bool = False) -> SpikeRecord:
    """Dense forward over an arbitrary T x C x H x W input tensor"""
    if frames.shape[0] != net.T or tuple(frames.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"Input {frames.shape} does not match T={net.T}, input {net.input_shape}")
    s = frames.astype(np.float64)
    spikes, traces, synaptic = [], [] if train else None, 0
    for spec, w, params in zip(net.layers, net.weights, net.params):
        synaptic += int(s.sum()) * fan_out(spec)
        a = synaptic_input(spec, w, s)
        out, U = integrate(a, params, record_traces=train)
        spikes.append(out)
        if train:
            traces.append(U)
        s = out.astype(np.float64)
    counts = spikes[-1].reshape(net.T, -1).sum(axis=0).astype(np.int64)
    return SpikeRecord(input=np.asarray(frames, dtype=np.uint8), spikes=spikes, counts=counts,
                       synaptic_events=synaptic, traces=traces)


def forward_sync(net: Network, field: EventField, train: bool = False) -> SpikeRecord:
    """Step the network through the event field slices; traces are kept only when training"""
    if field.T != net.T:
        raise ShapeError(f"Event field has T={field.T}, network expects T={net.T}")
    return forward_frames(net, field.data, train=train)
