"""Offline training: spike-count loss, response kernels, surrogate gradient and the fit loop.

The forward pass keeps the reset; the backward pass treats each layer as the
reset-free linear filter u = eps_volt * (W s), so per layer

    d[n] = sum_{m >= n} e[m] f'(u[m]) eps_volt[m - n]
    dL/dW = sum_n d[n] s_prev[n]^T
    e_prev[n] = W^T d[n]
"""

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.linalg import toeplitz

from neurododge.errors import ConfigError, NumericError, ShapeError, TrainingModeError
from neurododge.events import EventStream, to_event_field
from neurododge.kep import apply_kep
from neurododge.models import LossSpec, NeuronParams, Optimizer, SurrogateSpec, TrainConfig
from neurododge.snn import (
    Network, SpikeRecord, forward_sync, integrate, snap_weights, synaptic_input, synaptic_input_adjoint, weight_grad,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# desired spikes (true channel, other channels) per time window
WINDOW_LOSS_SPECS: Dict[int, Tuple[int, int]] = {30: (25, 5), 50: (30, 10), 100: (70, 10)}


def loss_spec_for_window(T: int, M: int = 2) -> LossSpec:
    """Desired counts for the standard windows; other T scale the 50-step pair"""
    if T in WINDOW_LOSS_SPECS:
        n_dt, n_df = WINDOW_LOSS_SPECS[T]
    else:
        n_dt, n_df = max(2, round(0.6 * T)), max(1, round(0.2 * T))
    try:
        return LossSpec(n_dt=n_dt, n_df=n_df, T=T, M=M)
    except ValidationError as e:
        raise ConfigError(f"No loss spec for T={T}: {e}") from e


def desired_counts(true_channel: int, spec: LossSpec) -> np.ndarray:
    if not 0 <= true_channel < spec.M:
        raise ConfigError(f"Channel {true_channel} outside [0, {spec.M})")
    D = np.full(spec.M, float(spec.n_df))
    D[true_channel] = spec.n_dt
    return D


def spike_count_loss(counts: Sequence[float], true_channel: int, spec: LossSpec) -> float:
    """0.5 * sum(((D - S) / T)^2)"""
    S = np.asarray(counts, dtype=np.float64)
    if S.shape != (spec.M,):
        raise ShapeError(f"Expected {spec.M} channel counts, got shape {S.shape}")
    D = desired_counts(true_channel, spec)
    return float(0.5 * np.sum(((D - S) / spec.T) ** 2))


@dataclass(frozen=True)
class ResponseKernels:
    eps_curr: np.ndarray
    eps_volt: np.ndarray


def response_kernels(delta_curr: float, delta_volt: float, T: int) -> ResponseKernels:
    eps_curr = np.zeros(T)
    eps_volt = np.zeros(T)
    eps_curr[0] = eps_volt[0] = 1.0
    for t in range(1, T):
        eps_curr[t] = delta_curr * eps_curr[t - 1]
        eps_volt[t] = delta_volt * eps_volt[t - 1] + eps_curr[t]
    return ResponseKernels(eps_curr, eps_volt)


def surrogate_grad(u, spec: Optional[SurrogateSpec] = None, u_th: float = 0.8):
    """Spike-escape derivative, peaking at tau_n / (tau_d * u_th) on the threshold"""
    spec = spec or SurrogateSpec()
    th = spec.u_th if spec.u_th is not None else u_th
    width = spec.tau_d * th
    return spec.tau_n / width * np.exp(-np.abs(np.asarray(u, dtype=np.float64) - th) / width)


@dataclass
class Gradients:
    weights: List[np.ndarray]
    loss: float = 0.0

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.weights, other.weights)], self.loss + other.loss)

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([g * factor for g in self.weights], self.loss * factor)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.weights)


def backward(
    net: Network,
    record: SpikeRecord,
    true_channel: int,
    loss_spec: LossSpec,
    surrogate_spec: Optional[SurrogateSpec] = None,
) -> Gradients:
    if record.traces is None:
        raise TrainingModeError("Record has no membrane traces; run the forward pass with train=True")
    if loss_spec.T != net.T or loss_spec.M != net.output_channels:
        raise ShapeError(f"Loss spec (T={loss_spec.T}, M={loss_spec.M}) does not fit the network")
    T = net.T
    loss = spike_count_loss(record.counts, true_channel, loss_spec)
    grads = [np.zeros_like(w) for w in net.weights]
    seed = -(desired_counts(true_channel, loss_spec) - record.counts) / T ** 2
    if not np.any(seed):
        return Gradients(grads, loss)

    e = np.broadcast_to(seed.reshape(net.shapes[-1]), (T,) + tuple(net.shapes[-1])).copy()
    for l in range(len(net.layers) - 1, -1, -1):
        spec, w, params = net.layers[l], net.weights[l], net.params[l]
        kernel = response_kernels(params.delta_curr, params.delta_volt, T).eps_volt
        E = toeplitz(kernel, np.zeros(T))  # E[m, n] = eps_volt[m - n], m >= n
        g = e * surrogate_grad(record.traces[l], surrogate_spec, params.u_th)
        d = np.tensordot(E.T, g, axes=([1], [0]))
        s_prev = record.input if l == 0 else record.spikes[l - 1]
        grads[l] = weight_grad(spec, d, s_prev.astype(np.float64))
        if l > 0:
            e = synaptic_input_adjoint(spec, w, d, net.shapes[l - 1])
    return Gradients(grads, loss)


# --- optimizers -----------------------------------------------------------

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_network(cls, net: Network) -> "AdamState":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(w) for w in net.weights])


def adam_update(param, grad, m, v, step: int, lr: float = 0.001,
                beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One bias-corrected Adam update; returns (param, m, v)"""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad ** 2
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def sgd_adam_step(
    net: Network,
    grads: Gradients,
    state: Optional[AdamState] = None,
    lr: float = 0.001,
    optimizer: Optimizer = Optimizer.ADAM,
) -> Tuple[Network, Optional[AdamState]]:
    """Update every trainable layer and snap the result back onto the weight grid"""
    if len(grads.weights) != len(net.weights):
        raise ShapeError("Gradients do not match the network")
    if optimizer == Optimizer.ADAM and state is None:
        state = AdamState.for_network(net)
    if state is not None:
        state.step += 1
    weights = []
    for i, (spec, w, g) in enumerate(zip(net.layers, net.weights, grads.weights)):
        if g.shape != w.shape:
            raise ShapeError(f"Layer {i} gradient {g.shape} vs weight {w.shape}")
        if spec.fixed:
            weights.append(w)
        elif optimizer == Optimizer.SGD:
            weights.append(w - lr * g)
        else:
            new, state.m[i], state.v[i] = adam_update(w, g, state.m[i], state.v[i], state.step, lr)
            weights.append(new)
    if not all(np.all(np.isfinite(w)) for w in weights):
        raise NumericError("Non-finite weights after the optimizer step")
    return net.with_weights(weights), state


# --- gain calibration -----------------------------------------------------

HIDDEN_TARGET_RATE = 0.15   # spikes per step for hidden neurons that receive input
OUTPUT_DRIVE_SPREAD = 0.05  # std of the output layer's per-step input before the offset
CALIBRATION_STEPS = 16
LOG2_GAIN_RANGE = (-12.0, 12.0)


def _stacked_input(spec, w: np.ndarray, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """T x B x (layer shape) weighted input for a batch of per-sample spike tensors"""
    return np.stack([synaptic_input(spec, w, s) for s in inputs], axis=1)


def _rate(a: np.ndarray, params: NeuronParams, active: np.ndarray) -> float:
    spikes, _ = integrate(a, params)
    return float(spikes[:, active].mean())


def _balance_gain(a: np.ndarray, params: NeuronParams, target: float) -> float:
    """Layer gain putting neurons that receive input at ``target`` spikes per step"""
    active = np.any(a != 0, axis=0)
    if not active.any():
        return 1.0
    lo, hi = LOG2_GAIN_RANGE
    for _ in range(CALIBRATION_STEPS):
        mid = 0.5 * (lo + hi)
        if _rate(a * 2.0 ** mid, params, active) < target:
            lo = mid
        else:
            hi = mid
    return 2.0 ** (0.5 * (lo + hi))


def _balance_offsets(a: np.ndarray, unit: np.ndarray, params: NeuronParams, target: float) -> np.ndarray:
    """Per-channel weight offset bringing every output channel to ``target`` spikes per step.

    ``unit`` is the input each neuron would get with all weights equal to one,
    so an offset d adds ``d * unit`` to the drive; the rate grows with d.
    """
    T, B, C = a.shape[:3]
    reach = float(unit.mean())
    if reach <= 0:
        return np.zeros(C)
    lo, hi = np.full(C, -1.0 / reach), np.full(C, 1.0 / reach)
    bcast = (C,) + (1,) * (a.ndim - 3)
    for _ in range(CALIBRATION_STEPS):
        mid = 0.5 * (lo + hi)
        spikes, _ = integrate(a + mid.reshape(bcast) * unit, params)
        rates = spikes.reshape(T, B, C, -1).mean(axis=(0, 1, 3))
        low = rates < target
        lo, hi = np.where(low, mid, lo), np.where(low, hi, mid)
    return 0.5 * (lo + hi)


def calibrate_network(
    net: Network,
    dataset: Sequence[Tuple[EventStream, int]],
    loss_spec: Optional[LossSpec] = None,
    config: Optional[TrainConfig] = None,
) -> Network:
    """Rescale the trainable layers on a few scenes so training starts near threshold.

    Layers are balanced bottom-up. A hidden layer is scaled until its
    neurons that receive input fire at ``HIDDEN_TARGET_RATE``. The output
    layer is scaled to a small drive spread, then each channel's weights are
    offset until it averages the loss spec's mean desired count. Fixed
    layers keep their weights.
    """
    if net.quantized:
        raise TrainingModeError("Calibrate the float network before quantizing it")
    if not dataset:
        raise ConfigError("Calibration needs at least one scene")
    config = config or TrainConfig(T=net.T)
    loss_spec = loss_spec or _resolve_loss_spec(net, config)
    fields, _ = _prepare(dataset, net.T, config)
    inputs = [f.data for f in fields]
    out_target = float(desired_counts(0, loss_spec).mean()) / net.T
    last = len(net.layers) - 1
    weights, notes = list(net.weights), []
    for l, (spec, params) in enumerate(zip(net.layers, net.params)):
        a = _stacked_input(spec, weights[l], inputs)
        if not spec.fixed and l < last:
            gain = _balance_gain(a, params, HIDDEN_TARGET_RATE)
            weights[l] = snap_weights(weights[l] * gain)
            notes.append(f"{spec.kind.value}[{l}] x{gain:.4g}")
        elif not spec.fixed:
            spread = float(a.std())
            gain = OUTPUT_DRIVE_SPREAD / spread if spread > 0 else 1.0
            unit = _stacked_input(spec, np.ones_like(weights[l]), inputs)
            offsets = _balance_offsets(a * gain, unit, params, out_target)
            weights[l] = snap_weights(weights[l] * gain + offsets.reshape((-1,) + (1,) * (weights[l].ndim - 1)))
            notes.append(f"{spec.kind.value}[{l}] x{gain:.4g} +{np.round(offsets, 6).tolist()}")
        if not spec.fixed:
            a = _stacked_input(spec, weights[l], inputs)
        spikes, _ = integrate(a, params)
        inputs = list(np.moveaxis(spikes, 1, 0))
    logger.info(f"Calibrated on {len(fields)} scenes: {', '.join(notes)}")
    return net.with_weights(weights)


# --- training loop --------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    eval_accuracy: Optional[float] = None


@dataclass
class TrainingHistory:
    epochs: List[EpochStats] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [e.loss for e in self.epochs]

    @property
    def accuracies(self) -> List[float]:
        return [e.accuracy for e in self.epochs]


def _resolve_loss_spec(net: Network, config: TrainConfig) -> LossSpec:
    if config.n_dt is not None:
        return LossSpec(n_dt=config.n_dt, n_df=config.n_df, T=net.T, M=net.output_channels)
    return loss_spec_for_window(net.T, net.output_channels)


def _prepare(dataset: Sequence[Tuple[EventStream, int]], T: int, config: TrainConfig):
    fields, labels = [], []
    for stream, label in dataset:
        if config.kep and len(stream):
            stream = apply_kep(stream, config.kep_config).key
        fields.append(to_event_field(stream, T))
        labels.append(int(label))
    return fields, np.asarray(labels)


def accuracy(net: Network, samples: Sequence[Tuple[EventStream, int]], config: Optional[TrainConfig] = None) -> float:
    config = config or TrainConfig(T=net.T)
    fields, labels = _prepare(samples, net.T, config)
    hits = [int(np.argmax(forward_sync(net, f).counts)) == y for f, y in zip(fields, labels)]
    return float(np.mean(hits)) if hits else 0.0


def fit(
    net: Network,
    dataset: Sequence[Tuple[EventStream, int]],
    epochs: Optional[int] = None,
    loss_spec: Optional[LossSpec] = None,
    config: Optional[TrainConfig] = None,
    surrogate_spec: Optional[SurrogateSpec] = None,
    eval_set: Optional[Sequence[Tuple[EventStream, int]]] = None,
) -> Tuple[Network, TrainingHistory]:
    """Mini-batch training on ``(stream, label)`` pairs; deterministic for a given seed"""
    config = config or TrainConfig(T=net.T)
    epochs = epochs if epochs is not None else config.epochs
    if not dataset:
        raise ConfigError("Training needs a non-empty dataset")
    loss_spec = loss_spec or _resolve_loss_spec(net, config)
    fields, labels = _prepare(dataset, net.T, config)
    if labels.min() < 0 or labels.max() >= loss_spec.M:
        raise ConfigError(f"Labels must lie in [0, {loss_spec.M})")

    rng = np.random.default_rng(config.seed)
    state = AdamState.for_network(net) if config.optimizer == Optimizer.ADAM else None
    history = TrainingHistory()
    logger.info(f"Training on {len(fields)} samples for {epochs} epochs "
                f"(T={net.T}, loss spec {loss_spec.n_dt}/{loss_spec.n_df}, {config.optimizer.value})")
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(fields))
        total, hits = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = np.sort(order[start:start + config.batch_size])
            acc = None
            for i in batch:
                record = forward_sync(net, fields[i], train=True)
                g = backward(net, record, int(labels[i]), loss_spec, surrogate_spec)
                if not math.isfinite(g.loss) or not g.is_finite():
                    raise NumericError(f"Non-finite loss at epoch {epoch}, sample {int(i)}")
                hits += int(np.argmax(record.counts)) == labels[i]
                acc = g if acc is None else acc + g
            total += acc.loss
            net, state = sgd_adam_step(net, acc.scaled(1.0 / len(batch)), state, config.lr, config.optimizer)
            logger.debug(f"Epoch {epoch} batch {start // config.batch_size}: loss {acc.loss / len(batch):.5f}")
        stats = EpochStats(epoch=epoch, loss=total / len(fields), accuracy=hits / len(fields))
        if eval_set:
            stats.eval_accuracy = accuracy(net, eval_set, config)
        history.epochs.append(stats)
        logger.info(f"Epoch {epoch}/{epochs}: loss {stats.loss:.5f}, accuracy {stats.accuracy:.3f}"
                    + (f", held-out {stats.eval_accuracy:.3f}" if stats.eval_accuracy is not None else ""))
    return net, history


# --- config file ----------------------------------------------------------

_LIST_KEYS = {"dataset"}
_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")


def parse_train_config(text: str) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; list values are comma-separated"""
    values: Dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        match = _LINE.match(line)
        if not match:
            raise ConfigError(f"Line {n}: expected 'key = value', got {raw.strip()!r}")
        key, value = match.groups()
        if key in values:
            raise ConfigError(f"Line {n}: duplicate key {key!r}")
        values[key] = [v.strip() for v in value.split(",") if v.strip()] if key in _LIST_KEYS else value
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid training config: {e}") from e


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    return parse_train_config(Path(path).read_text())
