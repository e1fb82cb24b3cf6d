"""Event-driven forward pass.

Only neurons that receive input at a step, or whose state could still reach
threshold without further input, are stepped. A neuron left untouched for a
while is brought up to date with zero-input steps just before its next
update, using the same ``lif_step`` the dense path uses, so both paths agree
bit for bit.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from neurododge.errors import ShapeError
from neurododge.events import EventStream, event_bins, to_event_field
from neurododge.models import LayerKind, LayerSpec, NeuronParams
from neurododge.snn import LayerState, Network, SpikeRecord, fan_out, lif_step, reachable_voltage

logger = logging.getLogger(__name__)

# Slack on the skip test so rounding in the bound never hides a spike
SKIP_MARGIN = 1e-9


@dataclass
class _Layer:
    spec: LayerSpec
    w: np.ndarray
    params: NeuronParams
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    state: LayerState
    live: np.ndarray

    @classmethod
    def create(cls, spec, w, params, in_shape, out_shape) -> "_Layer":
        n = int(np.prod(out_shape))
        return cls(spec, w, params, tuple(in_shape), tuple(out_shape),
                   LayerState.zeros((n,), track_updates=True), np.zeros(n, dtype=bool))

    def scatter(self, src: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Postsynaptic flat indices (sorted, unique) and their summed input from spiking ``src``"""
        spec, w = self.spec, self.w
        if spec.kind == LayerKind.FC:
            return np.arange(spec.out_channels), w[:, src].sum(axis=1)
        c, y, x = np.unravel_index(src, self.in_shape)
        _, oh, ow = self.out_shape
        k = spec.kernel_size
        if spec.kind == LayerKind.AVG_POOL:
            post = (c * oh + y // k) * ow + x // k
            vals = w[y % k, x % k]
        else:
            p = spec.padding
            o, i, j = np.meshgrid(np.arange(spec.out_channels), np.arange(k), np.arange(k), indexing="ij")
            Y = y[:, None, None, None] - i[None] + p
            X = x[:, None, None, None] - j[None] + p
            O = np.broadcast_to(o[None], Y.shape)
            vals = w[O, c[:, None, None, None], i[None], j[None]]
            ok = (Y >= 0) & (Y < oh) & (X >= 0) & (X < ow)
            post = ((O * oh + Y) * ow + X)[ok]
            vals = vals[ok]
        post, inverse = np.unique(post, return_inverse=True)
        return post, np.bincount(inverse.reshape(-1), weights=vals, minlength=len(post))

    def step(self, t: int, post: np.ndarray, a: np.ndarray) -> Tuple[np.ndarray, int]:
        """Advance the touched and live neurons to step t; returns the flat indices that fired"""
        st = self.state
        upd = np.union1d(post, np.flatnonzero(self.live))
        if upd.size == 0:
            return upd, 0
        current = np.zeros(upd.size)
        current[np.searchsorted(upd, post)] = a

        C, U, O = st.C[upd], st.U[upd], st.O_prev[upd]
        lag = t - 1 - st.last_update[upd]
        for j in range(int(lag.max())):
            stale = lag > j
            caught, _ = lif_step(LayerState(C[stale], U[stale], O[stale]), np.zeros(int(stale.sum())), self.params)
            C[stale], U[stale], O[stale] = caught.C, caught.U, caught.O_prev

        new, spikes = lif_step(LayerState(C, U, O), current, self.params)
        st.C[upd], st.U[upd], st.O_prev[upd] = new.C, new.U, new.O_prev
        st.last_update[upd] = t
        self.live[upd] = reachable_voltage(new.C, new.U, new.O_prev, self.params) >= self.params.u_th - SKIP_MARGIN
        return upd[spikes > 0], int(upd.size)


def forward_async(net: Network, stream: EventStream) -> SpikeRecord:
    """Sparse forward; the record equals ``forward_sync(net, to_event_field(stream, net.T))``"""
    c_in, h, w = net.input_shape
    if c_in != 2 or (stream.height, stream.width) != (h, w):
        raise ShapeError(f"Stream is {stream.width}x{stream.height}, network expects {w}x{h}")
    T = net.T
    in_shapes = [tuple(net.input_shape)] + list(net.shapes[:-1])
    layers = [_Layer.create(*args) for args in zip(net.layers, net.weights, net.params, in_shapes, net.shapes)]
    spikes = [np.zeros((T, int(np.prod(shape))), dtype=np.uint8) for shape in net.shapes]
    updates: List[int] = [0] * len(layers)
    synaptic = 0

    flat = (stream.p.astype(np.int64) * h + stream.y) * w + stream.x
    bins = event_bins(stream.t, stream.window_us, T)
    bounds = np.searchsorted(bins, np.arange(T + 1), side="left")

    for t in range(T):
        src = np.unique(flat[bounds[t]:bounds[t + 1]])
        for i, layer in enumerate(layers):
            if src.size:
                synaptic += int(src.size) * fan_out(layer.spec)
                post, a = layer.scatter(src)
            else:
                post, a = np.zeros(0, dtype=np.int64), np.zeros(0)
            src, n = layer.step(t, post, a)
            updates[i] += n
            spikes[i][t, src] = 1

    out = [s.reshape((T,) + tuple(shape)) for s, shape in zip(spikes, net.shapes)]
    counts = out[-1].reshape(T, -1).sum(axis=0).astype(np.int64)
    logger.debug(f"Async forward: {len(stream)} events, updates per layer {updates}")
    return SpikeRecord(input=to_event_field(stream, T).data, spikes=out, counts=counts,
                       synaptic_events=synaptic, neuron_updates=updates)
