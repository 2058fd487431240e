"""Experiment harness: accuracy, tail bounds, throughput, and the Monte Carlo oracle.

The accuracy experiments track one target item through ``background``
unrelated complaints followed by complaints from fresh users until
TestCount fires.  Two engines run that process:

``exact``
    every increment derives a full user set and item set and runs the
    complete increment algorithm on a real table.  Literal but slow.

``lazy``
    a fresh user's set is only materialized where it meets the target
    item set.  The overlap size is hypergeometric, its position inside the
    item set is uniform, and a write that misses the item lands on a
    uniform 0 bit elsewhere, so the distribution of (item bits, m) is the
    same as the exact engine's.  Background increments from fresh users on
    fresh items land on uniform 0 bits for the same reason.
"""

from __future__ import annotations

import csv
import io
import math
import os
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .ccbf import (
    BitTable,
    CcbfParams,
    ParamError,
    choose_index,
    derive_item_set,
    derive_user_set,
    increment,
    item_count,
)
from .tipping import TippingCalculator, choose_params, tail_thresholds

__all__ = [
    "CSV_HEADER",
    "AccuracyResult",
    "AccuracyRow",
    "ExperimentConfig",
    "TailCheckResult",
    "ThroughputReport",
    "complaints_to_audit",
    "default_backgrounds",
    "emit_plots",
    "mc_tipping_oracle",
    "read_accuracy_csv",
    "run_accuracy",
    "run_tail_check",
    "run_throughput",
]

CSV_HEADER = ["t", "background", "mean", "std", "rel_std_pct"]


# -- Monte Carlo oracle ------------------------------------------------------


def _floyd_rows(rng: np.random.Generator, mask: np.ndarray, k: int) -> np.ndarray:
    """Draw a uniform k-subset of ``[0, s)`` per row with Floyd's algorithm.

    ``mask`` is a zeroed (rows, s) scratch array; it is left zeroed on return.
    """
    rows, s = mask.shape
    r = np.arange(rows)
    out = np.empty((rows, k), dtype=np.int64)
    for col, j in enumerate(range(s - k, s)):
        cand = rng.integers(0, j + 1, size=rows)
        pick = np.where(mask[r, cand], j, cand)
        mask[r, pick] = True
        out[:, col] = pick
    mask[r[:, None], out] = False
    return out


def mc_tipping_oracle(
    s: int,
    u: int,
    v: int,
    m: int,
    t: int,
    runs: int,
    seed: Optional[int] = None,
    batch: int = 20_000,
    return_std: bool = False,
):
    """Mean number of filled item slots after ``m`` background bits and ``t`` increments.

    Brute force: each run keeps a full table, sets ``m`` distinct random
    bits, then lets ``t`` fresh random users increment one item (positions
    ``0..v-1``; every other draw is uniform, so any fixed set is as good as a
    random one) following the increment algorithm step by step.
    """
    if not (0 < u <= s and 0 < v <= s and 0 <= m <= s and t >= 0 and runs >= 1):
        raise ParamError(f"invalid oracle arguments s={s}, u={u}, v={v}, m={m}, t={t}, runs={runs}")
    rng = np.random.default_rng(seed)
    filled = np.empty(runs, dtype=np.int64)
    done = 0
    while done < runs:
        b = min(batch, runs - done)
        rows = np.arange(b)
        table = np.zeros((b, s), dtype=bool)
        scratch = np.zeros((b, s), dtype=bool)
        if m:
            table[rows[:, None], _floyd_rows(rng, scratch, m)] = True
        for _ in range(t):
            users = _floyd_rows(rng, scratch, u)
            settable = ~table[rows[:, None], users]
            preferred = settable & (users < v)
            has_pref = preferred.any(axis=1)
            pool = np.where(has_pref[:, None], preferred, settable)
            # uniform choice inside each row's pool via random priorities
            keys = rng.random((b, u))
            keys[~pool] = -1.0
            pick = keys.argmax(axis=1)
            live = pool.any(axis=1)  # empty pool means abort
            table[rows[live], users[rows[live], pick[live]]] = True
        filled[done:done + b] = table[:, :v].sum(axis=1)
        done += b
    mean = float(filled.mean())
    if return_std:
        return mean, float(filled.std())
    return mean


# -- accuracy engines ----------------------------------------------------------


class _LazyTrial:
    """One target item; only its v slots and the global fill count are stored.

    Everything outside the item set is exchangeable, so a write that misses
    the item only needs to bump ``m``.
    """

    def __init__(self, params: CcbfParams, rng: np.random.Generator) -> None:
        self.p = params
        self.rng = rng
        self.slots = np.zeros(params.v, dtype=bool)
        self.filled = 0
        self.m = 0

    def background(self, count: int) -> None:
        # each background write is a uniform draw among the current 0 bits,
        # so ``count`` of them form a uniform subset of the 0 bits
        p = self.p
        if count > p.s - self.m:
            raise ParamError("background exceeds table capacity")
        free_in_item = p.v - self.filled
        hits = int(self.rng.hypergeometric(free_in_item, p.s - self.m - free_in_item, count)) if count else 0
        if hits:
            free = np.flatnonzero(~self.slots)
            self.slots[free[self.rng.choice(free.size, hits, replace=False)]] = True
            self.filled += hits
        self.m += count

    def complain(self) -> bool:
        p, rng = self.p, self.rng
        k = int(rng.hypergeometric(p.u, p.s - p.u, p.v))
        self.m += 1
        if k:
            slots = rng.choice(p.v, k, replace=False)
            zeros = slots[~self.slots[slots]]
            if zeros.size:
                self.slots[zeros[rng.integers(zeros.size)]] = True
                self.filled += 1
                return True
        return False


class _ExactTrial:
    """Same process with every user set derived and every increment run in full."""

    def __init__(self, params: CcbfParams, rng: np.random.Generator) -> None:
        self.p = params
        self.rng = rng
        self.table = BitTable(params.s, enforce_lock=False)
        self.item = derive_item_set(rng.bytes(32), params)
        self.key = rng.bytes(32)

    @property
    def m(self) -> int:
        return self.table.m

    @property
    def filled(self) -> int:
        return item_count(self.table, self.item)

    def _fresh_user(self):
        return derive_user_set(self.rng.bytes(16), self.key, self.p)

    def background(self, count: int) -> None:
        for _ in range(count):
            other = derive_item_set(self.rng.bytes(32), self.p)
            increment(self.table, self._fresh_user(), other, self.rng)

    def complain(self) -> bool:
        return increment(self.table, self._fresh_user(), self.item, self.rng).hit_item


_ENGINES = {"lazy": _LazyTrial, "exact": _ExactTrial}


def complaints_to_audit(
    params: CcbfParams,
    background: int,
    rng: np.random.Generator,
    tipping: Optional[TippingCalculator] = None,
    engine: str = "lazy",
    limit: Optional[int] = None,
) -> int:
    """Complaints on a fresh target until TestCount first returns true."""
    tipping = tipping or TippingCalculator.for_params(params)
    trial = _ENGINES[engine](params, rng)
    trial.background(background)
    limit = limit or 10 * params.t + 100
    for k in range(1, limit + 1):
        trial.complain()
        if trial.filled >= tipping.tau(trial.m):
            return k
    raise RuntimeError(f"no audit after {limit} complaints")


@dataclass
class ExperimentConfig:
    n: int = 100_000
    t: tuple[int, ...] = (100,)
    lambda_stat: int = 10
    background_levels: Optional[tuple[int, ...]] = None
    trials: int = 1000
    seed: int = 0
    engine: str = "lazy"
    params: Optional[CcbfParams] = None  # single-threshold override of choose_params

    def __post_init__(self) -> None:
        if isinstance(self.t, int):
            self.t = (self.t,)
        self.t = tuple(self.t)
        if self.trials < 1:
            raise ParamError("trials must be >= 1")
        if self.engine not in _ENGINES:
            raise ParamError(f"unknown engine {self.engine!r}")
        if self.background_levels is not None:
            self.background_levels = tuple(self.background_levels)
            if any(b < 0 or b > self.n for b in self.background_levels):
                raise ParamError(f"background levels must lie in [0, n={self.n}]")

    def params_for(self, t: int) -> CcbfParams:
        if self.params is not None:
            return self.params
        return choose_params(self.n, t, self.lambda_stat)

    def backgrounds_for(self, t: int) -> tuple[int, ...]:
        if self.background_levels is not None:
            return self.background_levels
        return default_backgrounds(self.n, t)


def default_backgrounds(n: int, t: int) -> tuple[int, ...]:
    return (0, n // 4, n // 2, 3 * n // 4, n - 2 * t)


@dataclass(frozen=True)
class AccuracyRow:
    t: int
    background: int
    mean: float
    std: float
    rel_std_pct: float
    counts: tuple[int, ...] = field(default=(), repr=False, compare=False)


@dataclass
class AccuracyResult:
    rows: list[AccuracyRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.t, r.background, f"{r.mean:.6f}", f"{r.std:.6f}", f"{r.rel_std_pct:.6f}"])
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv())


def _point_rng(seed: int, t: int, background: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, t, background]))


def run_accuracy(config: ExperimentConfig, progress=None) -> AccuracyResult:
    """Mean and spread of the complaints needed to trigger an audit."""
    rows = []
    for t in config.t:
        params = config.params_for(t)
        tipping = TippingCalculator.for_params(params)
        for bg in config.backgrounds_for(t):
            if bg + 20 * t > params.s:
                raise ParamError(f"background {bg} leaves no room in a table of {params.s} bits")
            rng = _point_rng(config.seed, t, bg)
            counts = [
                complaints_to_audit(params, bg, rng, tipping, config.engine)
                for _ in range(config.trials)
            ]
            arr = np.asarray(counts, dtype=float)
            mean = float(arr.mean())
            std = float(arr.std())
            rows.append(AccuracyRow(t, bg, mean, std, 100.0 * std / mean, tuple(counts)))
            if progress:
                progress(rows[-1])
    return AccuracyResult(rows)


# -- tail bounds ---------------------------------------------------------------


@dataclass(frozen=True)
class TailCheckResult:
    t: int
    lambda_stat: int
    trials: int
    background: int
    fp_complaints: int
    fn_complaints: int
    fp_failures: int
    fn_failures: int

    @property
    def fp_rate(self) -> float:
        return self.fp_failures / self.trials if self.fp_complaints > 0 else float("nan")

    @property
    def fn_rate(self) -> float:
        return self.fn_failures / self.trials

    @property
    def bound(self) -> float:
        return 2.0 ** -self.lambda_stat


def _count_after(params: CcbfParams, background: int, k: int, rng, tipping, engine: str) -> bool:
    trial = _ENGINES[engine](params, rng)
    trial.background(background)
    for _ in range(k):
        trial.complain()
    return trial.filled >= tipping.tau(trial.m)


def run_tail_check(
    t: int,
    lambda_stat: int,
    trials: int,
    n: int = 100_000,
    background: Optional[int] = None,
    seed: int = 0,
    engine: str = "lazy",
) -> TailCheckResult:
    """Empirical false-positive and false-negative rates at the tail-bound complaint counts."""
    params = choose_params(n, t, lambda_stat)
    th = tail_thresholds(t, lambda_stat)
    k_fp = math.floor(th.fp_safe_count)
    k_fn = math.ceil(th.fn_safe_count)
    bg = n // 2 if background is None else background
    if bg + k_fn > n:
        raise ParamError(f"background {bg} plus {k_fn} complaints exceeds n={n}")
    tipping = TippingCalculator.for_params(params)
    rng = np.random.default_rng(np.random.SeedSequence([seed, t, lambda_stat, bg]))
    fp = fn = 0
    for _ in range(trials):
        if k_fp > 0 and _count_after(params, bg, k_fp, rng, tipping, engine):
            fp += 1
        if not _count_after(params, bg, k_fn, rng, tipping, engine):
            fn += 1
    return TailCheckResult(t, lambda_stat, trials, bg, k_fp, k_fn, fp, fn)


# -- throughput ----------------------------------------------------------------


@dataclass
class ThroughputReport:
    clients: int
    latency_ms: float
    bandwidth_bps: Optional[float]
    accepted: int
    elapsed_s: float
    throughput: float  # accepted complaints per second, from server session log
    snapshot_bytes: int
    mean_snapshot_s: float  # COMPLAIN_BEGIN sent -> snapshot received (includes queueing)
    mean_index_rtt_s: float  # COMPLAIN_INDEX sent -> result received
    mean_lock_hold_s: float
    originate_s: float
    overlaps: int

    @property
    def transfer_s(self) -> float:
        if not self.bandwidth_bps:
            return 0.0
        return (self.snapshot_bytes + 5) * 8 / self.bandwidth_bps

    @property
    def model_throughput(self) -> float:
        """Two one-way trips per locked session plus snapshot transfer time."""
        denom = 2 * self.latency_ms / 1000 + self.transfer_s
        return math.inf if denom == 0 else 1.0 / denom

    @property
    def originate_overhead_s(self) -> float:
        return self.originate_s - 2 * self.latency_ms / 1000


def count_overlaps(intervals: Iterable[tuple[float, float]]) -> int:
    """Number of adjacent pairs, sorted by start, that overlap in time."""
    spans = sorted(intervals)
    return sum(1 for (s0, e0), (s1, e1) in zip(spans, spans[1:]) if s1 < e0)


def run_throughput(
    clients: int = 8,
    latency_ms: float = 0.0,
    duration: float = 3.0,
    bandwidth_bps: Optional[float] = None,
    n: int = 100_000,
    t: int = 1000,
    server_config=None,
    originations: int = 5,
) -> ThroughputReport:
    """Drive concurrent complaint flows against a local server."""
    from .client import FactsClient
    from .netsim import LatencyProxy
    from .server import FactsServer, FactsTCPServer, ServerConfig

    config = server_config or ServerConfig(n=n, t=t, quota=10**9, session_deadline=30.0)
    core = FactsServer(config)
    tokens = core.setup(clients)
    tcp = FactsTCPServer(core, ("127.0.0.1", 0)).start()
    proxy = None
    address = tcp.address
    if latency_ms > 0 or bandwidth_bps:
        proxy = LatencyProxy(tcp.address, latency_ms / 1000, bandwidth_bps).start()
        address = proxy.address

    stop = threading.Event()
    snap_times: list[float] = []
    rtt_times: list[float] = []
    orig_times: list[float] = []
    errors: list[BaseException] = []
    lock = threading.Lock()
    ready = threading.Barrier(clients + 1)

    def worker(uid: str) -> None:
        try:
            c = FactsClient(uid, tokens[uid], address).connect()
            _ = c.user_set
            tag = c.originate(b"throughput probe " + uid.encode())
            c.rcv_msg(uid, tag, b"throughput probe " + uid.encode())
            entry = c.inbox[0]
            item = c._item_set(entry.tag_bytes)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)
            ready.abort()
            return
        ready.wait()
        local_snap, local_rtt = [], []
        while not stop.is_set():
            t0 = time.perf_counter()
            bits = c.begin()
            t1 = time.perf_counter()
            choice = choose_index(c.user_set.indices, bits, item, c.rng)
            t2 = time.perf_counter()
            c.send_index(None if choice.aborted else choice.written_index)
            t3 = time.perf_counter()
            local_snap.append(t1 - t0)
            local_rtt.append(t3 - t2)
        with lock:
            snap_times.extend(local_snap)
            rtt_times.extend(local_rtt)
        c.close()

    threads = [threading.Thread(target=worker, args=(uid,), daemon=True) for uid in tokens]
    for th in threads:
        th.start()
    try:
        ready.wait()
    except threading.BrokenBarrierError:
        pass
    if errors:
        raise errors[0]
    start = time.monotonic()
    time.sleep(duration)
    stop.set()
    for th in threads:
        th.join(timeout=duration + 60)
    elapsed = time.monotonic() - start

    # origination latency, measured on an otherwise idle server
    probe_uid = next(iter(tokens))
    with FactsClient(probe_uid, tokens[probe_uid], address) as probe:
        for i in range(originations):
            t0 = time.perf_counter()
            probe.originate(os.urandom(64))
            orig_times.append(time.perf_counter() - t0)

    if proxy:
        proxy.stop()
    tcp.stop()

    log = [r for r in core.session_log if r.start >= start and r.outcome == "accept"]
    ends = sorted(r.end for r in log)
    rate = (len(ends) - 1) / (ends[-1] - ends[0]) if len(ends) >= 2 else 0.0
    holds = [r.end - r.start for r in log]
    return ThroughputReport(
        clients=clients,
        latency_ms=latency_ms,
        bandwidth_bps=bandwidth_bps,
        accepted=len(log),
        elapsed_s=elapsed,
        throughput=rate,
        snapshot_bytes=(core.params.u + 7) // 8,
        mean_snapshot_s=statistics.fmean(snap_times) if snap_times else float("nan"),
        mean_index_rtt_s=statistics.fmean(rtt_times) if rtt_times else float("nan"),
        mean_lock_hold_s=statistics.fmean(holds) if holds else float("nan"),
        originate_s=statistics.median(orig_times),
        overlaps=count_overlaps((r.start, r.end) for r in core.session_log),
    )


# -- plots ---------------------------------------------------------------------


def read_accuracy_csv(path_or_text: str | os.PathLike) -> list[AccuracyRow]:
    text = Path(path_or_text).read_text() if not str(path_or_text).lstrip().startswith("t,") else str(path_or_text)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ValueError("accuracy CSV is empty")
    if header != CSV_HEADER:
        raise ValueError(f"accuracy CSV header must be {','.join(CSV_HEADER)}, got {','.join(header)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(CSV_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
        try:
            rows.append(AccuracyRow(int(rec[0]), int(rec[1]), float(rec[2]), float(rec[3]), float(rec[4])))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if not rows:
        raise ValueError("accuracy CSV has no data rows")
    return rows


_GNUPLOT = """\
set terminal pngcairo size 1400,500
set output '{png}'
set multiplot layout 1,2
set key left top
set xlabel 'Background complaints'
set ylabel 'Complaints to trigger an audit'
set title 'Mean'
plot {mean_plots}
set ylabel 'Relative standard deviation (%)'
set title 'Relative standard deviation'
plot {rel_plots}
unset multiplot
"""


def emit_plots(csv_path: str | os.PathLike, out_dir: str | os.PathLike) -> list[Path]:
    """Write one gnuplot data file per threshold plus a two-panel script."""
    rows = read_accuracy_csv(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    mean_plots, rel_plots = [], []
    for t in sorted({r.t for r in rows}):
        path = out / f"accuracy_t{t}.dat"
        lines = ["# background mean std rel_std_pct"]
        for r in sorted((r for r in rows if r.t == t), key=lambda r: r.background):
            lines.append(f"{r.background} {r.mean:.6f} {r.std:.6f} {r.rel_std_pct:.6f}")
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
        mean_plots.append(f"'{path.name}' using 1:2:3 with yerrorlines title 't={t}'")
        rel_plots.append(f"'{path.name}' using 1:4 with linespoints title 't={t}'")
    script = out / "accuracy.gp"
    script.write_text(_GNUPLOT.format(
        png="accuracy.png", mean_plots=", \\\n     ".join(mean_plots), rel_plots=", \\\n     ".join(rel_plots)
    ))
    written.append(script)
    return written
