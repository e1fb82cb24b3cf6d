import asyncio
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import psutil

from neurododge.errors import NeuroDodgeError
from neurododge.events import EventStream, event_frame, to_event_field
from neurododge.kep import apply_kep
from neurododge.models import EvalMode, KepConfig
from neurododge.snn import Network, SpikeRecord, forward_frames, forward_sync
from neurododge.sparse import forward_async

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StreamResult:
    index: int
    counts: np.ndarray
    synaptic_events: int
    raw_events: int
    main_events: int
    key_events: int
    seconds: float


class EvalExecutor:
    """Runs inference over many streams in a worker pool with timing and memory sampling"""

    def __init__(self, net: Network, mode: EvalMode = EvalMode.ASYNC, kep_config: Optional[KepConfig] = None,
                 max_workers: Optional[int] = None, timeout: float = 3600.0):
        self.net = net
        self.mode = EvalMode(mode)
        self.kep_config = kep_config
        self.max_workers = max_workers or min(8, os.cpu_count() or 1)
        self.timeout = timeout

    @staticmethod
    def infer(net: Network, stream: EventStream, mode: EvalMode) -> SpikeRecord:
        """One forward pass in the requested mode"""
        if mode == EvalMode.ASYNC:
            return forward_async(net, stream)
        if mode == EvalMode.SYNC:
            return forward_sync(net, to_event_field(stream, net.T))
        # the whole window collapsed into one binary frame, shown at every step
        frame = event_frame(stream)
        return forward_frames(net, np.broadcast_to(frame, (net.T,) + frame.shape))

    def run_one(self, index: int, stream: EventStream) -> StreamResult:
        start_time = time.perf_counter()
        raw = main = len(stream)
        if self.kep_config is not None:
            kep = apply_kep(stream, self.kep_config)
            main, stream = len(kep.main), kep.key
        if len(stream) == 0:
            logger.warning(f"Stream {index} is empty after filtering")
        record = self.infer(self.net, stream, self.mode)
        return StreamResult(
            index=index,
            counts=record.counts,
            synaptic_events=record.synaptic_events,
            raw_events=raw,
            main_events=main,
            key_events=len(stream),
            seconds=time.perf_counter() - start_time,
        )

    async def run(self, streams: Sequence[EventStream]) -> Tuple[List[StreamResult], Optional[float]]:
        """Evaluate all streams; results come back in stream order with the peak RSS in MB"""
        loop = asyncio.get_running_loop()
        stop = asyncio.Event()
        memory_monitor_task = asyncio.create_task(EvalExecutor._monitor_memory(os.getpid(), stop))
        try:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                jobs = [loop.run_in_executor(pool, self.run_one, i, s) for i, s in enumerate(streams)]
                try:
                    results = await asyncio.wait_for(asyncio.gather(*jobs), timeout=self.timeout)
                except asyncio.TimeoutError:
                    raise NeuroDodgeError(f"Evaluation timed out after {self.timeout} seconds")
        finally:
            stop.set()
            peak = await memory_monitor_task
        return sorted(results, key=lambda r: r.index), peak

    def evaluate(self, streams: Sequence[EventStream]) -> Tuple[List[StreamResult], Optional[float]]:
        return asyncio.run(self.run(streams))

    @staticmethod
    async def _monitor_memory(pid: int, stop: asyncio.Event, interval: float = 0.05) -> Optional[float]:
        """Sample the resident set size of a process until ``stop`` is set"""
        max_memory = 0.0
        try:
            process = psutil.Process(pid)
            while True:
                try:
                    max_memory = max(max_memory, process.memory_info().rss / 1024 / 1024)
                except (psutil.NoSuchProcess, psutil.AccessDenied):
                    break
                if stop.is_set():
                    break
                try:
                    await asyncio.wait_for(stop.wait(), timeout=interval)
                except asyncio.TimeoutError:
                    pass
        except psutil.Error:
            pass
        return max_memory if max_memory > 0 else None
