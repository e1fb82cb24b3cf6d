"""Deployment emulation: 8-bit weight quantization, AER address sequences and action decoding.

An event (x, y, p) maps to the flat address ``A = 2 * x * l_H + 2 * y + p``
with ``l_H`` the sensor height. Events are grouped into frames by time step,
the step index acting as the time flag that separates injections. The
processor hierarchy is viewed as ``core = A // 1024`` and ``neuron = A % 1024``.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from neurododge.errors import ConfigError, EventDataError, FormatError, ShapeError
from neurododge.events import Event, EventStream, event_bins
from neurododge.models import DodgeAction
from neurododge.snn import Network, QuantizationInfo, SpikeRecord, snap_weights
from neurododge.sparse import forward_async

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 2.0
INT8_MIN, INT8_MAX = -128, 127
NEURONS_PER_CORE = 1024
DODGE_ALPHA = 2.0

AERSEQ1_MAGIC = b"AERSEQ1"
AERSEQ1_HEADER = struct.Struct("<7sHHHH")
AERSEQ1_FRAME = struct.Struct("<HI")


# --- quantization ---------------------------------------------------------

def quantize_array(w: np.ndarray, sigma: float = DEFAULT_SIGMA) -> Tuple[np.ndarray, np.ndarray]:
    """round(w / sigma) * sigma, half away from zero, clamped to [-128 sigma, 127 sigma].

    Returns the quantized values and the mask of clamped elements.
    """
    if sigma <= 0:
        raise ConfigError(f"Quantization interval must be positive, got {sigma}")
    w = np.asarray(w, dtype=np.float64)
    units = np.sign(w) * np.floor(np.abs(w) / sigma + 0.5)
    clamped = (units < INT8_MIN) | (units > INT8_MAX)
    return np.clip(units, INT8_MIN, INT8_MAX) * sigma, clamped


@dataclass(frozen=True)
class QuantizationReport:
    sigma: float
    scales: Tuple[float, ...]
    max_errors: Tuple[float, ...]   # largest |W s - W_q| per layer, before clamping
    clamped: Tuple[int, ...]

    @property
    def total_clamped(self) -> int:
        return int(sum(self.clamped))


def quantize_with_report(net: Network, sigma: float = DEFAULT_SIGMA, rescale: bool = True) -> Tuple[Network, QuantizationReport]:
    scales, mantissas, errors, clamped, weights = [], [], [], [], []
    for spec, w in zip(net.layers, net.weights):
        if spec.fixed:
            scales.append(1.0)
            mantissas.append(np.zeros(0, dtype=np.int8))
            errors.append(0.0)
            clamped.append(0)
            weights.append(w)
            continue
        peak = float(np.max(np.abs(w))) if w.size else 0.0
        scale = INT8_MAX * sigma / peak if rescale and peak > 0 else 1.0
        scaled = w * scale
        w_q, mask = quantize_array(scaled, sigma)
        unclamped = np.sign(scaled) * np.floor(np.abs(scaled) / sigma + 0.5) * sigma
        mantissa = np.round(w_q / sigma).astype(np.int8)
        scales.append(scale)
        mantissas.append(mantissa)
        errors.append(float(np.max(np.abs(scaled - unclamped))) if w.size else 0.0)
        clamped.append(int(mask.sum()))
        weights.append(mantissa.astype(np.float64) * sigma / scale)
        if mask.any():
            logger.warning(f"{spec.kind.value} layer: {int(mask.sum())} weights clamped to the int8 range")
    info = QuantizationInfo(sigma=sigma, scales=tuple(scales), mantissas=tuple(mantissas), clamped=tuple(clamped))
    report = QuantizationReport(sigma=sigma, scales=tuple(scales), max_errors=tuple(errors), clamped=tuple(clamped))
    return net.with_weights([snap_weights(w) for w in weights], quantization=info), report


def quantize_weights(net: Network, sigma: float = DEFAULT_SIGMA, rescale: bool = True) -> Network:
    """Map every trainable layer onto sigma-spaced 8-bit integers.

    With ``rescale`` each layer is first scaled by ``127 sigma / max|W|`` (254 / max|W|
    at sigma = 2); the effective weights are ``W_q / scale``, equivalent to
    integer weights against a threshold multiplied by the same scale.
    """
    quantized, report = quantize_with_report(net, sigma, rescale)
    logger.info(f"Quantized network: sigma={sigma}, scales={[round(s, 3) for s in report.scales]}, "
                f"clamped={report.total_clamped}")
    return quantized


# --- addresses ------------------------------------------------------------

def encode_address(event: Event, l_H: int = 128, width: int = 128) -> int:
    """Flat address of one event on a width x l_H sensor; off-sensor events are rejected"""
    t, x, y, p = event
    if p not in (0, 1):
        raise EventDataError(f"Polarity {p} not in {{0, 1}}")
    if not (0 <= x < width and 0 <= y < l_H):
        raise EventDataError(f"Event ({x}, {y}) outside the {width}x{l_H} grid")
    return 2 * x * l_H + 2 * y + p


def address_view(A) -> Tuple:
    """(core, neuron) for flat address A"""
    return np.divmod(A, NEURONS_PER_CORE) if isinstance(A, np.ndarray) else divmod(int(A), NEURONS_PER_CORE)


@dataclass(frozen=True, eq=False)
class AddressSequence:
    """Time-flagged frames of ascending addresses for a width x height sensor"""
    frames: Tuple[Tuple[int, np.ndarray], ...]
    width: int
    height: int
    T: int

    def __post_init__(self):
        frames = tuple((int(step), np.asarray(addrs, dtype=np.int64)) for step, addrs in self.frames)
        limit = 2 * self.width * self.height
        previous = -1
        for step, addrs in frames:
            if step <= previous or step >= self.T:
                raise EventDataError(f"Frame step {step} out of order or beyond T={self.T}")
            if addrs.size and (np.any(np.diff(addrs) <= 0) or addrs[0] < 0 or addrs[-1] >= limit):
                raise EventDataError(f"Frame {step}: addresses must be ascending and below {limit}")
            previous = step
        object.__setattr__(self, "frames", frames)

    @property
    def l_H(self) -> int:
        return self.height

    @property
    def steps(self) -> List[int]:
        return [step for step, _ in self.frames]

    def __len__(self) -> int:
        return sum(len(a) for _, a in self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AddressSequence):
            return NotImplemented
        return (
            (self.width, self.height, self.T) == (other.width, other.height, other.T)
            and self.steps == other.steps
            and all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.frames, other.frames))
        )

    def __repr__(self) -> str:
        return f"AddressSequence(frames={len(self.frames)}, addresses={len(self)}, T={self.T})"


def encode_sequence(stream: EventStream, T: int) -> AddressSequence:
    """Bin like ``to_event_field`` and collapse duplicate (step, address) pairs"""
    if T < 1:
        raise ConfigError(f"T must be at least 1, got {T}")
    if len(stream) == 0:
        return AddressSequence((), stream.width, stream.height, T)
    span = 2 * stream.width * stream.height
    addrs = 2 * stream.x.astype(np.int64) * stream.height + 2 * stream.y + stream.p
    keys = np.unique(event_bins(stream.t, stream.window_us, T) * span + addrs)
    steps, flat = np.divmod(keys, span)
    cuts = np.flatnonzero(np.diff(steps)) + 1
    frames = tuple((int(s[0]), a) for s, a in zip(np.split(steps, cuts), np.split(flat, cuts)))
    return AddressSequence(frames, stream.width, stream.height, T)


def decode_sequence(seq: AddressSequence, window_us: Optional[int] = None) -> EventStream:
    """Events at the first microsecond of their step; ``window_us`` defaults to 1 ms per step"""
    window_us = window_us if window_us is not None else seq.T * 1000
    if window_us < seq.T:
        raise ConfigError(f"Window of {window_us} us cannot hold {seq.T} steps")
    if not seq.frames:
        return EventStream.empty(seq.width, seq.height, window_us)
    limit = 2 * seq.width * seq.height
    t = np.concatenate([np.full(len(a), -(-step * window_us // seq.T)) for step, a in seq.frames])
    A = np.concatenate([a for _, a in seq.frames])
    if A.size and (A.min() < 0 or A.max() >= limit):
        raise EventDataError(f"Address outside [0, {limit})")
    x, rest = np.divmod(A, 2 * seq.height)
    y, p = np.divmod(rest, 2)
    return EventStream(t, x, y, p, width=seq.width, height=seq.height, window_us=window_us)


# --- AERSEQ1 --------------------------------------------------------------

def sequence_to_bytes(seq: AddressSequence) -> bytes:
    parts = [AERSEQ1_HEADER.pack(AERSEQ1_MAGIC, seq.width, seq.height, seq.T, len(seq.frames))]
    for step, addrs in seq.frames:
        parts.append(AERSEQ1_FRAME.pack(step, len(addrs)))
        parts.append(np.ascontiguousarray(addrs, dtype="<u4").tobytes())
    return b"".join(parts)


def sequence_from_bytes(blob: bytes) -> AddressSequence:
    if len(blob) < AERSEQ1_HEADER.size:
        raise FormatError("Truncated AERSEQ1 header", offset=len(blob))
    magic, width, height, T, n_frames = AERSEQ1_HEADER.unpack_from(blob, 0)
    if magic != AERSEQ1_MAGIC:
        raise FormatError(f"Bad magic {magic!r}", offset=0)
    pos, frames = AERSEQ1_HEADER.size, []
    for _ in range(n_frames):
        if pos + AERSEQ1_FRAME.size > len(blob):
            raise FormatError("Truncated frame header", offset=pos)
        step, count = AERSEQ1_FRAME.unpack_from(blob, pos)
        pos += AERSEQ1_FRAME.size
        if pos + 4 * count > len(blob):
            raise FormatError(f"Frame {step} declares {count} addresses past the end", offset=pos)
        frames.append((step, np.frombuffer(blob, dtype="<u4", count=count, offset=pos).astype(np.int64)))
        pos += 4 * count
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes", offset=pos)
    try:
        return AddressSequence(tuple(frames), width, height, T)
    except EventDataError as e:
        raise FormatError(str(e), offset=AERSEQ1_HEADER.size) from e


def write_sequence(seq: AddressSequence, path: Union[str, Path]) -> None:
    Path(path).write_bytes(sequence_to_bytes(seq))


def read_sequence(path: Union[str, Path]) -> AddressSequence:
    return sequence_from_bytes(Path(path).read_bytes())


# --- actions --------------------------------------------------------------

def approach_channel(counts: Sequence[int]) -> int:
    """Channel with the most spikes; ties go to the lowest index"""
    counts = np.asarray(counts)
    if counts.size == 0:
        raise ShapeError("No output channels to decode")
    return int(np.argmax(counts))


def decode_action(counts: Sequence[int], n_dt: int, alpha: float = DODGE_ALPHA) -> DodgeAction:
    """Approach direction by argmax, speed alpha * N_r / N_DT (uncapped)"""
    if n_dt <= 0:
        raise ConfigError(f"N_DT must be positive, got {n_dt}")
    channel = approach_channel(counts)
    values = [int(c) for c in counts]
    return DodgeAction(direction=channel, speed=alpha * values[channel] / n_dt, counts=values)


def infer_sequence(net: Network, seq: AddressSequence, window_us: Optional[int] = None) -> SpikeRecord:
    """Run the network straight from an injected address sequence"""
    if seq.T != net.T:
        raise ShapeError(f"Sequence has T={seq.T}, network expects T={net.T}")
    return forward_async(net, decode_sequence(seq, window_us))
