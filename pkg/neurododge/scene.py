"""Synthetic event streams from the contrast-threshold camera model.

Each pixel keeps a log-intensity reference. Whenever the rendered log
intensity moves a full threshold away from the reference an event of the
matching polarity is emitted and the reference steps by one threshold.
The intensity is sampled every ``render_step_us`` and crossing times are
interpolated linearly between samples.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from neurododge.errors import ConfigError
from neurododge.events import EventStream, merge_streams, noise_events, window_to_us
from neurododge.models import ObjectKind, SceneConfig

logger = logging.getLogger(__name__)

# Tolerance on |dL| / threshold so exact multiples count as crossings
CROSSING_EPS = 1e-9


@dataclass(frozen=True)
class SceneResult:
    stream: EventStream
    label: int
    object_mask: np.ndarray  # True where the event came from the object, False for noise


def _coverage(kind: ObjectKind, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    """Anti-aliased footprint in [0, 1]; zero beyond half a pixel outside the edge"""
    if kind == ObjectKind.DISK:
        dist = np.hypot(xs - cx, ys - cy)
        return np.clip(r + 0.5 - dist, 0.0, 1.0)
    # tall blob: ellipse twice as high as wide, edge distance measured along x
    dist = np.hypot((xs - cx) / r, (ys - cy) / (2.0 * r))
    return np.clip((1.0 - dist) * r + 0.5, 0.0, 1.0)


def _extent(kind: ObjectKind, r: float) -> Tuple[float, float]:
    return (r + 1.0, r + 1.0) if kind == ObjectKind.DISK else (r + 1.0, 2.0 * r + 1.0)


def _visible(kind: ObjectKind, cx: float, cy: float, r: float, width: int, height: int) -> bool:
    ex, ey = _extent(kind, r)
    return cx + ex > 0 and cx - ex < width - 1 and cy + ey > 0 and cy - ey < height - 1


def render_scene(config: SceneConfig) -> SceneResult:
    """Render the configured approach and tag every event as object or noise"""
    width, height = config.width, config.height
    window_us = window_to_us(config.window_ms)
    r0 = config.radius
    r1 = config.end_radius if config.end_radius is not None else config.radius
    (x0, y0), (x1, y1) = config.start, config.end
    if not (_visible(config.kind, x0, y0, r0, width, height) and _visible(config.kind, x1, y1, r1, width, height)):
        raise ConfigError(f"Trajectory {config.start} -> {config.end} leaves the {width}x{height} frame")

    ex, ey = _extent(config.kind, max(r0, r1))
    xa = int(max(0, np.floor(min(x0, x1) - ex)))
    xb = int(min(width - 1, np.ceil(max(x0, x1) + ex)))
    ya = int(max(0, np.floor(min(y0, y1) - ey)))
    yb = int(min(height - 1, np.ceil(max(y0, y1) + ey)))
    ys, xs = np.mgrid[ya:yb + 1, xa:xb + 1].astype(np.float64)

    def log_intensity(t_us: float) -> np.ndarray:
        s = t_us / window_us
        cx, cy, r = x0 + s * (x1 - x0), y0 + s * (y1 - y0), r0 + s * (r1 - r0)
        return config.contrast * _coverage(config.kind, xs, ys, cx, cy, r)

    theta = config.threshold
    sample_times = np.append(np.arange(0, window_us, config.render_step_us), window_us)
    reference = log_intensity(0.0)
    previous = reference
    chunks = []
    for t_prev, t_next in zip(sample_times[:-1], sample_times[1:]):
        current = log_intensity(float(t_next))
        diff = current - reference
        n = np.floor(np.abs(diff) / theta + CROSSING_EPS).astype(np.int64)
        if n.any():
            iy, ix = np.nonzero(n)
            sign = np.sign(diff[iy, ix])
            start, stop = previous[iy, ix], current[iy, ix]
            ref = reference[iy, ix]
            span = np.where(stop != start, stop - start, 1.0)
            for j in range(1, int(n.max()) + 1):
                sel = n[iy, ix] >= j
                level = ref[sel] + sign[sel] * j * theta
                frac = np.clip((level - start[sel]) / span[sel], 0.0, 1.0)
                t = np.floor(t_prev + frac * (t_next - t_prev)).astype(np.int64)
                chunks.append(np.stack([
                    np.minimum(t, window_us - 1),
                    ix[sel] + xa,
                    iy[sel] + ya,
                    (sign[sel] > 0).astype(np.int64),
                ], axis=1))
            reference = reference + np.sign(diff) * n * theta
        previous = current

    if chunks:
        rows = np.concatenate(chunks)
        rows = rows[np.argsort(rows[:, 0], kind="stable")]
        obj = EventStream(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], width=width, height=height, window_us=window_us)
    else:
        obj = EventStream.empty(width, height, window_us)

    rng = np.random.default_rng(config.seed)
    noise = noise_events(config.noise_rate, width, height, window_us, rng)
    stream, from_noise = merge_streams(obj, noise)
    logger.debug(f"Rendered {config.kind.value} scene: {len(obj)} object events, {len(noise)} noise events")
    return SceneResult(stream=stream, label=config.direction, object_mask=~from_noise)


def generate_scene(config: SceneConfig) -> Tuple[EventStream, int]:
    result = render_scene(config)
    return result.stream, result.label
