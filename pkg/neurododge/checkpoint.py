"""SNN1 network checkpoints.

Layout (little-endian)::

    header  : magic "SNN1", n_layers u16, T u16, flags u16 (bit 0 = quantized),
              in_c u16, in_h u16, in_w u16
    layer   : kind u8, fixed u8, in u16, out u16, kernel u16, padding u16,
              stride u16, delta_curr f64, delta_volt f64, u_th f64,
              ndim u8, dims u32 * ndim, then either
                f32 weights (row-major)                       flag clear
                sigma f64, scale f64, int8 mantissas          flag set

A quantized layer's effective weights are ``mantissa * sigma / scale``.
Pooling layers are stored as f32 in both cases.
"""

import logging
import struct
from pathlib import Path
from typing import List, Union

import numpy as np

from neurododge.errors import FormatError
from neurododge.models import LayerKind, LayerSpec, NeuronParams
from neurododge.snn import Network, QuantizationInfo, snap_weights

logger = logging.getLogger(__name__)

SNN1_MAGIC = b"SNN1"
HEADER = struct.Struct("<4sHHHHHH")
LAYER = struct.Struct("<BBHHHHHddd")
QUANT = struct.Struct("<dd")
FLAG_QUANTIZED = 0x1
KIND_CODES = {LayerKind.AVG_POOL: 0, LayerKind.CONV: 1, LayerKind.FC: 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


def network_to_bytes(net: Network) -> bytes:
    flags = FLAG_QUANTIZED if net.quantized else 0
    parts = [HEADER.pack(SNN1_MAGIC, len(net.layers), net.T, flags, *net.input_shape)]
    q = net.quantization
    for i, (spec, w, params) in enumerate(zip(net.layers, net.weights, net.params)):
        parts.append(LAYER.pack(KIND_CODES[spec.kind], int(spec.fixed), spec.in_channels, spec.out_channels,
                                spec.kernel_size, spec.padding, spec.stride,
                                params.delta_curr, params.delta_volt, params.u_th))
        parts.append(struct.pack(f"<B{w.ndim}I", w.ndim, *w.shape))
        if q is not None and not spec.fixed:
            parts.append(QUANT.pack(q.sigma, q.scales[i]))
            parts.append(np.ascontiguousarray(q.mantissas[i], dtype=np.int8).tobytes())
        else:
            parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def unpack(self, fmt: Union[str, struct.Struct], what: str) -> tuple:
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        if self.pos + s.size > len(self.blob):
            raise FormatError(f"Truncated {what}", offset=self.pos)
        values = s.unpack_from(self.blob, self.pos)
        self.pos += s.size
        return values

    def array(self, dtype: str, shape: tuple, what: str) -> np.ndarray:
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if self.pos + n > len(self.blob):
            raise FormatError(f"Truncated {what}", offset=self.pos)
        data = np.frombuffer(self.blob, dtype=dtype, count=int(np.prod(shape)), offset=self.pos).reshape(shape)
        self.pos += n
        return data


def network_from_bytes(blob: bytes) -> Network:
    r = _Reader(blob)
    magic, n_layers, T, flags, *input_shape = r.unpack(HEADER, "header")
    if magic != SNN1_MAGIC:
        raise FormatError(f"Bad magic {magic!r}", offset=0)
    quantized = bool(flags & FLAG_QUANTIZED)
    specs: List[LayerSpec] = []
    weights, params = [], []
    sigmas, scales, mantissas = set(), [], []
    for i in range(n_layers):
        start = r.pos
        kind, fixed, c_in, c_out, k, pad, stride, dc, dv, th = r.unpack(LAYER, f"layer {i}")
        if kind not in CODE_KINDS:
            raise FormatError(f"Unknown layer kind {kind}", offset=start)
        try:
            specs.append(LayerSpec(kind=CODE_KINDS[kind], in_channels=c_in, out_channels=c_out, kernel_size=k,
                                   padding=pad, stride=stride, fixed=bool(fixed)))
            params.append(NeuronParams(delta_curr=dc, delta_volt=dv, u_th=th))
        except ValueError as e:
            raise FormatError(f"Invalid layer {i}: {e}", offset=start) from e
        (ndim,) = r.unpack("<B", f"layer {i} weight rank")
        shape = r.unpack(f"<{ndim}I", f"layer {i} weight shape")
        if quantized and not fixed:
            sigma, scale = r.unpack(QUANT, f"layer {i} quantization")
            m = r.array("i1", shape, f"layer {i} weights").copy()
            sigmas.add(sigma)
            scales.append(scale)
            mantissas.append(m)
            weights.append(m.astype(np.float64) * sigma / scale)
        else:
            weights.append(r.array("<f4", shape, f"layer {i} weights").astype(np.float64))
            scales.append(1.0)
            mantissas.append(np.zeros(0, dtype=np.int8))
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes", offset=r.pos)
    if len(sigmas) > 1:
        raise FormatError("Layers disagree on the quantization step", offset=HEADER.size)
    quantization = None
    if quantized:
        quantization = QuantizationInfo(sigma=sigmas.pop() if sigmas else 2.0, scales=tuple(scales),
                                        mantissas=tuple(mantissas))
    try:
        return Network(layers=tuple(specs), weights=tuple(snap_weights(w) for w in weights), params=tuple(params),
                       T=T, input_shape=tuple(input_shape), quantization=quantization)
    except ValueError as e:
        raise FormatError(f"Inconsistent network: {e}", offset=HEADER.size) from e


def save_network(net: Network, path: Union[str, Path]) -> None:
    Path(path).write_bytes(network_to_bytes(net))
    logger.info(f"Checkpoint written to {path} ({len(net.layers)} layers, T={net.T}, quantized={net.quantized})")


def load_network(path: Union[str, Path]) -> Network:
    return network_from_bytes(Path(path).read_bytes())
