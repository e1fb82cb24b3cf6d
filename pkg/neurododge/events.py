"""Event data model, binning, noise injection and the EVS1 / CSV file formats"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from neurododge.errors import ConfigError, EventDataError, FormatError

logger = logging.getLogger(__name__)

EVS1_MAGIC = b"EVS1"
EVS1_HEADER = struct.Struct("<4sHHII")
EVS1_RECORD = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2")])
POLARITY_BIT = 0x8000
CSV_COLUMNS = ["t_us", "x", "y", "p"]


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-sorted events with resolution and window metadata.

    Columns are read-only numpy arrays; ``window_us`` is the capture window
    in microseconds and every timestamp is strictly below it.
    """
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int = 128
    height: int = 128
    window_us: int = 50_000

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(self.t, np.int64))
        object.__setattr__(self, "x", _frozen(self.x, np.int32))
        object.__setattr__(self, "y", _frozen(self.y, np.int32))
        object.__setattr__(self, "p", _frozen(self.p, np.int8))
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise EventDataError("Event columns differ in length")

    @classmethod
    def empty(cls, width: int = 128, height: int = 128, window_us: int = 50_000) -> "EventStream":
        z = np.zeros(0)
        return cls(z, z, z, z, width=width, height=height, window_us=window_us)

    @property
    def window_ms(self) -> float:
        return self.window_us / 1000.0

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            (self.width, self.height, self.window_us) == (other.width, other.height, other.window_us)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self) -> str:
        return f"EventStream(n={len(self)}, {self.width}x{self.height}, window_us={self.window_us})"

    def select(self, index: np.ndarray) -> "EventStream":
        """Subset by boolean mask or ascending index array; order is preserved"""
        index = np.asarray(index)
        return EventStream(self.t[index], self.x[index], self.y[index], self.p[index],
                           width=self.width, height=self.height, window_us=self.window_us)

    def slice_time(self, t0: int, t1: int) -> "EventStream":
        """Events with t0 <= t < t1"""
        lo, hi = np.searchsorted(self.t, [t0, t1], side="left")
        return self.select(np.arange(lo, hi))

    def coords(self) -> np.ndarray:
        """(N, 4) int64 array of t, x, y, p"""
        return np.stack([self.t, self.x, self.y, self.p], axis=1).astype(np.int64)


@dataclass(frozen=True)
class EventField:
    """Binary T x 2 x H x W tensor; slice t is the network input at step t"""
    data: np.ndarray

    @property
    def T(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)


def window_to_us(window_ms: float) -> int:
    return int(round(window_ms * 1000))


def _integral_records(values: np.ndarray) -> np.ndarray:
    """int64 copy of an (N, 4) array; fractional, non-finite or non-numeric fields are errors"""
    if values.dtype.kind in "biu":
        return values.astype(np.int64)
    try:
        as_float = values.astype(np.float64)
    except (TypeError, ValueError):
        raise EventDataError("Event fields must be numeric")
    with np.errstate(invalid="ignore"):
        bad = (~np.isfinite(as_float) | (as_float % 1 != 0)).any(axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise EventDataError(f"Event {i} {tuple(values[i].tolist())}: non-integer field", index=i)
    return as_float.astype(np.int64)


def validate_stream(events: Iterable, width: int = 128, height: int = 128, window_ms: float = 50.0) -> EventStream:
    """Build a checked stream from raw ``(t, x, y, p)`` records.

    The result is stably sorted by t. The first offending record (in input
    order) is reported through ``EventDataError.index``.
    """
    window_us = window_to_us(window_ms)
    if width < 1 or height < 1 or window_us < 1:
        raise ConfigError("Resolution and window must be positive")
    records = list(events)
    try:
        values = np.asarray(records)
    except ValueError:
        raise EventDataError("Events must be (t, x, y, p) records")
    if values.size == 0:
        return EventStream.empty(width, height, window_us)
    if values.ndim != 2 or values.shape[1] != 4:
        raise EventDataError("Events must be (t, x, y, p) records")
    raw = _integral_records(values)
    t, x, y, p = raw.T
    checks = [
        (t < 0, "t negative"),
        (t >= window_us, "t beyond window"),
        ((x < 0) | (x >= width), "x out of bounds"),
        ((y < 0) | (y >= height), "y out of bounds"),
        ((p != 0) & (p != 1), "polarity not in {0, 1}"),
    ]
    bad = np.zeros(len(t), dtype=bool)
    for mask, _ in checks:
        bad |= mask
    if bad.any():
        i = int(np.argmax(bad))
        reason = next(msg for mask, msg in checks if mask[i])
        raise EventDataError(f"Event {i} {tuple(int(v) for v in raw[i])}: {reason}", index=i)
    order = np.argsort(t, kind="stable")
    return EventStream(t[order], x[order], y[order], p[order], width=width, height=height, window_us=window_us)


def event_bins(t_us: np.ndarray, window_us: int, T: int) -> np.ndarray:
    """Step index floor(t / (window / T)), clamped to T - 1 at the right edge"""
    bins = (np.asarray(t_us, dtype=np.int64) * T) // int(window_us)
    return np.minimum(bins, T - 1)


def to_event_field(stream: EventStream, T: int) -> EventField:
    if T <= 0:
        raise ConfigError(f"Bin count must be positive, got {T}")
    data = np.zeros((T, 2, stream.height, stream.width), dtype=np.uint8)
    if len(stream):
        bins = event_bins(stream.t, stream.window_us, T)
        data[bins, stream.p, stream.y, stream.x] = 1
    return EventField(data)


def event_frame(stream: EventStream) -> np.ndarray:
    """Whole window accumulated into one binary 2 x H x W frame"""
    frame = np.zeros((2, stream.height, stream.width), dtype=np.uint8)
    if len(stream):
        frame[stream.p, stream.y, stream.x] = 1
    return frame


def merge_streams(base: EventStream, extra: EventStream) -> Tuple[EventStream, np.ndarray]:
    """Stable merge by t; ties keep ``base`` first. Returns the mask of ``extra`` events."""
    t = np.concatenate([base.t, extra.t])
    order = np.argsort(t, kind="stable")
    from_extra = np.concatenate([np.zeros(len(base), bool), np.ones(len(extra), bool)])[order]
    merged = EventStream(
        t[order],
        np.concatenate([base.x, extra.x])[order],
        np.concatenate([base.y, extra.y])[order],
        np.concatenate([base.p, extra.p])[order],
        width=base.width, height=base.height, window_us=base.window_us,
    )
    return merged, from_extra


def noise_events(rate: float, width: int, height: int, window_us: int, rng: np.random.Generator) -> EventStream:
    """Uniform-in-space, Poisson-in-time background events of random polarity"""
    if rate < 0:
        raise ConfigError(f"Noise rate must be non-negative, got {rate}")
    expected = rate * width * height * window_us * 1e-6
    n = int(rng.poisson(expected)) if expected > 0 else 0
    t = np.sort(rng.integers(0, window_us, size=n))
    x = rng.integers(0, width, size=n)
    y = rng.integers(0, height, size=n)
    p = rng.integers(0, 2, size=n)
    return EventStream(t, x, y, p, width=width, height=height, window_us=window_us)


def inject_noise(stream: EventStream, rate: float, seed: int = 0) -> EventStream:
    """Superimpose background noise; the original events survive unchanged and in order"""
    if rate == 0:
        return stream
    rng = np.random.default_rng(seed)
    noise = noise_events(rate, stream.width, stream.height, stream.window_us, rng)
    merged, _ = merge_streams(stream, noise)
    logger.debug(f"Injected {len(noise)} noise events at rate {rate}")
    return merged


# --- file formats ---------------------------------------------------------

def encode_evs1(stream: EventStream) -> bytes:
    if stream.width > POLARITY_BIT:
        raise ConfigError("EVS1 stores x in 15 bits")
    header = EVS1_HEADER.pack(EVS1_MAGIC, stream.width, stream.height, stream.window_us, len(stream))
    records = np.empty(len(stream), dtype=EVS1_RECORD)
    records["t"] = stream.t
    records["x"] = stream.x.astype(np.uint16) | (stream.p.astype(np.uint16) << 15)
    records["y"] = stream.y
    return header + records.tobytes()


def decode_evs1(blob: bytes) -> EventStream:
    if len(blob) < EVS1_HEADER.size:
        raise FormatError("Truncated EVS1 header", offset=len(blob))
    magic, width, height, window_us, count = EVS1_HEADER.unpack_from(blob, 0)
    if magic != EVS1_MAGIC:
        raise FormatError(f"Bad magic {magic!r}", offset=0)
    if width == 0 or height == 0 or window_us == 0:
        raise FormatError("Resolution and window must be positive", offset=4)
    payload = len(blob) - EVS1_HEADER.size
    expected = count * EVS1_RECORD.itemsize
    if payload != expected:
        offset = EVS1_HEADER.size + (min(payload, expected) // EVS1_RECORD.itemsize) * EVS1_RECORD.itemsize
        raise FormatError(f"Expected {count} records, payload holds {payload} bytes", offset=offset)
    records = np.frombuffer(blob, dtype=EVS1_RECORD, count=count, offset=EVS1_HEADER.size)
    t = records["t"].astype(np.int64)
    x = (records["x"] & (POLARITY_BIT - 1)).astype(np.int64)
    p = (records["x"] >> 15).astype(np.int64)
    y = records["y"].astype(np.int64)
    if np.any(np.diff(t) < 0):
        i = int(np.argmax(np.diff(t) < 0)) + 1
        raise FormatError("Records not sorted by t", offset=EVS1_HEADER.size + i * EVS1_RECORD.itemsize, index=i)
    try:
        return validate_stream(np.stack([t, x, y, p], axis=1), width, height, window_us / 1000.0)
    except EventDataError as e:
        raise FormatError(str(e), offset=EVS1_HEADER.size + e.index * EVS1_RECORD.itemsize, index=e.index) from e


def encode_csv(stream: EventStream) -> str:
    df = pd.DataFrame({"t_us": stream.t, "x": stream.x, "y": stream.y, "p": stream.p}, columns=CSV_COLUMNS)
    return f"# {stream.width},{stream.height},{stream.window_us}\n" + df.to_csv(index=False)


def decode_csv(text: str) -> EventStream:
    lines = text.splitlines(keepends=True)
    offsets = np.cumsum([0] + [len(line.encode()) for line in lines])
    if not lines or not lines[0].startswith("#"):
        raise FormatError("Missing '# width,height,window_us' header", offset=0)
    try:
        width, height, window_us = (int(v) for v in lines[0].lstrip("#").split(","))
    except ValueError:
        raise FormatError("Malformed '# width,height,window_us' header", offset=0)
    data_rows = [
        (i, line) for i, line in enumerate(lines[1:], start=1)
        if line.strip() and not line.startswith("#") and not line.startswith("t_us")
    ]
    if not data_rows:
        return EventStream.empty(width, height, window_us)
    # a record with the wrong number of fields becomes an all-missing row
    fields = [[v.strip() for v in line.rstrip("\r\n").split(",")] for _, line in data_rows]
    df = pd.DataFrame([f if len(f) == len(CSV_COLUMNS) else [None] * len(CSV_COLUMNS) for f in fields],
                      columns=CSV_COLUMNS, dtype=object)
    values = df.apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1).to_numpy()
    with np.errstate(invalid="ignore"):
        bad |= (values.to_numpy() % 1 != 0).any(axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise FormatError(f"Malformed record on line {data_rows[row][0] + 1}", offset=int(offsets[data_rows[row][0]]))
    raw = values.to_numpy().astype(np.int64)
    try:
        return validate_stream(raw, width, height, window_us / 1000.0)
    except EventDataError as e:
        line_no = data_rows[e.index][0]
        raise FormatError(f"{e} on line {line_no + 1}", offset=int(offsets[line_no]), index=e.index) from e


def write_stream(stream: EventStream, path: Union[str, Path]) -> None:
    """EVS1 unless the path ends in ``.csv``"""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        path.write_text(encode_csv(stream))
    else:
        path.write_bytes(encode_evs1(stream))


def read_stream(path: Union[str, Path]) -> EventStream:
    blob = Path(path).read_bytes()
    if blob[:4] == EVS1_MAGIC:
        return decode_evs1(blob)
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("Neither EVS1 nor CSV", offset=0)
    return decode_csv(text)
