"""Key-Event-Point filtering.

Stage one keeps the events within ``radius`` of the spatio-temporal centroid
(the main stream). Stage two draws random subsets of the size given by
``key_count`` and keeps the one whose cell histogram is closest, in KL
divergence, to the main stream's (the key stream). Coordinates are
normalized to the unit cube: x / (width - 1), y / (height - 1), t / window.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import rel_entr

from neurododge.errors import EventDataError, ShapeError
from neurododge.events import EventStream
from neurododge.models import KepConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterCenter:
    x: float
    y: float
    t: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.t])


@dataclass(frozen=True)
class ProbabilityGrid:
    K: int
    counts: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class KepResult:
    raw: EventStream
    main: EventStream
    key: EventStream
    kl: float
    candidate_kls: Tuple[float, ...] = ()


def normalized_coords(stream: EventStream) -> np.ndarray:
    """(N, 3) array of x, y, t in [0, 1]"""
    return np.stack([
        stream.x / max(stream.width - 1, 1),
        stream.y / max(stream.height - 1, 1),
        stream.t / stream.window_us,
    ], axis=1).astype(np.float64)


def _require_events(stream: EventStream, what: str) -> None:
    if len(stream) == 0:
        raise EventDataError(f"{what} needs a non-empty stream")


def cluster_center(stream: EventStream) -> ClusterCenter:
    """Mean of the normalized coordinates, the least-squares optimal center; polarity is ignored"""
    _require_events(stream, "cluster_center")
    cx, cy, ct = normalized_coords(stream).mean(axis=0)
    return ClusterCenter(float(cx), float(cy), float(ct))


def extract_main(stream: EventStream, config: Optional[KepConfig] = None) -> EventStream:
    config = config or KepConfig()
    _require_events(stream, "extract_main")
    center = cluster_center(stream).as_array()
    dist = np.linalg.norm(normalized_coords(stream) - center, axis=1)
    return stream.select(dist <= config.radius)


def key_count(M: int, lambda1: float = 300.0, lambda2: float = 600.0) -> int:
    """Key-stream size: M below 500, then saturating towards lambda1 / lambda2"""
    if M < 0:
        raise ValueError(f"M must be non-negative, got {M}")
    if M < 500:
        return int(M)
    lam = lambda1 if M < 1000 else lambda2
    if M == lam:
        return int(M)
    value = math.floor(0.5 * lam * (1.0 + math.exp(1.0 / (M - lam))))
    return int(min(value, M))


def _cell_counts(coords: np.ndarray, K: int) -> np.ndarray:
    cells = np.clip(np.floor(coords * K).astype(np.int64), 0, K - 1)
    flat = (cells[:, 0] * K + cells[:, 1]) * K + cells[:, 2]
    return np.bincount(flat, minlength=K ** 3).astype(np.float64)


def _grid(counts: np.ndarray, K: int) -> ProbabilityGrid:
    total = counts.sum()
    probs = counts / total if total > 0 else np.zeros_like(counts)
    return ProbabilityGrid(K=K, counts=counts, probs=probs)


def histogram_prob(stream: EventStream, K: int = 20) -> ProbabilityGrid:
    _require_events(stream, "histogram_prob")
    if K < 1:
        raise ValueError(f"K must be positive, got {K}")
    return _grid(_cell_counts(normalized_coords(stream), K), K)


def kl_divergence(p: ProbabilityGrid, q: ProbabilityGrid) -> float:
    """D_KL(p || q) in nats, q smoothed by a 1/K^3 pseudo-count per cell"""
    if p.K != q.K or p.counts.shape != q.counts.shape:
        raise ShapeError(f"Grids differ: K={p.K} vs K={q.K}")
    if np.array_equal(p.counts, q.counts):
        return 0.0
    eps = 1.0 / q.counts.size
    q_smooth = (q.counts + eps) / (q.counts.sum() + eps * q.counts.size)
    return float(np.sum(rel_entr(p.probs, q_smooth)))


def score_candidates(main: EventStream, config: KepConfig) -> Tuple[List[np.ndarray], List[float]]:
    """Draw the random subsets serially from the seed and score each against the main stream"""
    M = len(main)
    m_key = key_count(M, config.lambda1, config.lambda2)
    coords = normalized_coords(main)
    reference = _grid(_cell_counts(coords, config.bins), config.bins)
    rng = np.random.default_rng(config.seed)
    subsets, kls = [], []
    for _ in range(config.trials):
        # prefix of a seeded Fisher-Yates shuffle
        subset = np.sort(rng.permutation(M)[:m_key])
        grid = _grid(_cell_counts(coords[subset], config.bins), config.bins)
        subsets.append(subset)
        kls.append(kl_divergence(grid, reference))
    return subsets, kls


def extract_key(main: EventStream, config: Optional[KepConfig] = None) -> EventStream:
    return _extract_key(main, config or KepConfig())[0]


def _extract_key(main: EventStream, config: KepConfig) -> Tuple[EventStream, float, Tuple[float, ...]]:
    _require_events(main, "extract_key")
    if key_count(len(main), config.lambda1, config.lambda2) == len(main):
        return main, 0.0, ()
    subsets, kls = score_candidates(main, config)
    best = int(np.argmin(kls))
    return main.select(subsets[best]), kls[best], tuple(kls)


def apply_kep(stream: EventStream, config: Optional[KepConfig] = None) -> KepResult:
    """Both stages with sizes; an empty stream passes through unchanged"""
    config = config or KepConfig()
    if len(stream) == 0:
        return KepResult(raw=stream, main=stream, key=stream, kl=0.0)
    main = extract_main(stream, config)
    if len(main) == 0:
        return KepResult(raw=stream, main=main, key=main, kl=0.0)
    key, kl, kls = _extract_key(main, config)
    logger.debug(f"KEP: raw={len(stream)} main={len(main)} key={len(key)} kl={kl:.4f}")
    return KepResult(raw=stream, main=main, key=key, kl=kl, candidate_kls=kls)
