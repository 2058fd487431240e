"""TCP relay that injects a fixed one-way delay and an optional bandwidth cap."""

from __future__ import annotations

import heapq
import itertools
import logging
import socket
import threading
import time
from typing import Optional

log = logging.getLogger(__name__)

__all__ = ["LatencyProxy", "TokenBucket"]


class TokenBucket:
    """Byte-rate limiter: ``rate`` bytes/s with ``burst`` bytes of credit."""

    def __init__(self, rate: float, burst: float, clock=time.monotonic) -> None:
        self.rate = rate
        self.burst = burst
        self.clock = clock
        self.tokens = burst
        self.stamp = clock()

    def reserve(self, nbytes: int) -> float:
        """Charge ``nbytes`` and return the instant they may leave the sender."""
        now = self.clock()
        self.tokens = min(self.burst, self.tokens + (now - self.stamp) * self.rate)
        self.stamp = now
        self.tokens -= nbytes
        if self.tokens >= 0:
            return now
        return now - self.tokens / self.rate


class _Pipe:
    """One direction of a relayed connection."""

    def __init__(self, src: socket.socket, dst: socket.socket, delay: float, bucket: Optional[TokenBucket]) -> None:
        self.src, self.dst = src, dst
        self.delay = delay
        self.bucket = bucket
        self._heap: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._closed = False
        self._last_release = 0.0

    def start(self) -> None:
        threading.Thread(target=self._reader, daemon=True).start()
        threading.Thread(target=self._writer, daemon=True).start()

    def _reader(self) -> None:
        try:
            while True:
                chunk = self.src.recv(65536)
                if not chunk:
                    break
                depart = self.bucket.reserve(len(chunk)) if self.bucket else time.monotonic()
                # deliveries stay in order even if the bucket clock jitters
                release = max(depart + self.delay, self._last_release)
                self._last_release = release
                with self._cv:
                    heapq.heappush(self._heap, (release, next(self._seq), chunk))
                    self._cv.notify()
        except OSError:
            pass
        with self._cv:
            self._closed = True
            self._cv.notify()

    def _writer(self) -> None:
        try:
            while True:
                with self._cv:
                    while not self._heap and not self._closed:
                        self._cv.wait()
                    if not self._heap:
                        break
                    release, _, chunk = self._heap[0]
                    wait = release - time.monotonic()
                    if wait > 0:
                        self._cv.wait(wait)
                        continue
                    heapq.heappop(self._heap)
                self.dst.sendall(chunk)
        except OSError:
            pass
        try:
            self.dst.shutdown(socket.SHUT_WR)
        except OSError:
            pass


class LatencyProxy:
    """Listen locally and relay every connection to ``target`` with delay.

    ``latency`` is the one-way delay in seconds applied to each direction;
    ``bandwidth_bps`` (bits per second) shapes each direction separately.
    """

    def __init__(
        self,
        target: tuple[str, int],
        latency: float,
        bandwidth_bps: Optional[float] = None,
        host: str = "127.0.0.1",
        burst_bytes: int = 16384,
    ) -> None:
        self.target = target
        self.latency = latency
        self.bandwidth_bps = bandwidth_bps
        self.burst_bytes = burst_bytes
        self._listener = socket.create_server((host, 0))
        self.address = self._listener.getsockname()[:2]
        self._stop = threading.Event()

    def _bucket(self) -> Optional[TokenBucket]:
        if not self.bandwidth_bps:
            return None
        return TokenBucket(self.bandwidth_bps / 8, self.burst_bytes)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self._listener.accept()
            except OSError:
                break
            try:
                upstream = socket.create_connection(self.target)
            except OSError as exc:
                log.warning("proxy could not reach %s: %s", self.target, exc)
                client.close()
                continue
            for s in (client, upstream):
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            _Pipe(client, upstream, self.latency, self._bucket()).start()
            _Pipe(upstream, client, self.latency, self._bucket()).start()

    def start(self) -> "LatencyProxy":
        threading.Thread(target=self._accept_loop, name="latency-proxy", daemon=True).start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._listener.close()

    def __enter__(self) -> "LatencyProxy":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
