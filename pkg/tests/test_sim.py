import socket
import threading
import time

import numpy as np
import pytest

from facts.ccbf import CcbfParams, ParamError
from facts.netsim import LatencyProxy, TokenBucket
from facts.sim import (
    CSV_HEADER,
    AccuracyResult,
    AccuracyRow,
    ExperimentConfig,
    ThroughputReport,
    complaints_to_audit,
    count_overlaps,
    default_backgrounds,
    emit_plots,
    mc_tipping_oracle,
    read_accuracy_csv,
    run_accuracy,
    run_tail_check,
)
from facts.tipping import TippingCalculator, tipping_tables


# -- oracle --------------------------------------------------------------------------


def test_oracle_exact_when_user_owns_table():
    for t in (0, 1, 7, 20):
        assert mc_tipping_oracle(300, 300, 20, 0, t, runs=200, seed=1) == t


def test_oracle_background_only():
    s, v, m, runs = 1000, 50, 300, 20_000
    mean, std = mc_tipping_oracle(s, 10, v, m, 0, runs=runs, seed=2, return_std=True)
    assert abs(mean - v * m / s) <= 4 * std / np.sqrt(runs)


def test_oracle_agrees_with_dp_expectation():
    args = (400, 30, 25, 60, 8)
    mean, std = mc_tipping_oracle(*args, runs=40_000, seed=3, return_std=True)
    assert abs(mean - tipping_tables(*args).expected_filled) <= 4 * std / np.sqrt(40_000)


def test_oracle_is_seeded():
    a = mc_tipping_oracle(500, 40, 20, 50, 5, runs=1000, seed=9)
    assert a == mc_tipping_oracle(500, 40, 20, 50, 5, runs=1000, seed=9)
    assert a != mc_tipping_oracle(500, 40, 20, 50, 5, runs=1000, seed=10)


def test_oracle_rejects_bad_arguments():
    with pytest.raises(ParamError):
        mc_tipping_oracle(10, 11, 2, 0, 1, runs=1)


# -- accuracy engines -----------------------------------------------------------------


def test_lazy_and_exact_engines_agree():
    # same process, two implementations; compare complaints-to-audit distributions
    p = CcbfParams(s=6000, u=250, v=60, n=600, t=12)
    tip = TippingCalculator.for_params(p)
    res = {}
    for engine in ("lazy", "exact"):
        rng = np.random.default_rng(42)
        res[engine] = np.array([complaints_to_audit(p, 150, rng, tip, engine) for _ in range(300)])
    a, b = res["lazy"], res["exact"]
    se = np.sqrt(a.var() / a.size + b.var() / b.size)
    assert abs(a.mean() - b.mean()) <= 4 * se
    assert 0.6 < a.std() / b.std() < 1.6


def test_trials_one_gives_zero_std():
    r = run_accuracy(ExperimentConfig(n=100_000, t=100, background_levels=(0,), trials=1, seed=1))
    assert r.rows[0].std == 0 and r.rows[0].rel_std_pct == 0


def test_accuracy_is_reproducible_bytes():
    cfg = dict(n=100_000, t=(100,), background_levels=(0, 50_000), trials=30, seed=7)
    a = run_accuracy(ExperimentConfig(**cfg)).to_csv()
    assert a == run_accuracy(ExperimentConfig(**cfg)).to_csv()
    assert a != run_accuracy(ExperimentConfig(**{**cfg, "seed": 8})).to_csv()
    assert a.splitlines()[0] == ",".join(CSV_HEADER)


def test_accuracy_rows_consistent():
    r = run_accuracy(ExperimentConfig(n=100_000, t=100, background_levels=(0,), trials=50, seed=3))
    row = r.rows[0]
    assert row.mean > 0 and len(row.counts) == 50
    assert row.std == pytest.approx(np.std(row.counts))
    assert row.rel_std_pct == pytest.approx(100 * row.std / row.mean)


def test_default_backgrounds():
    assert default_backgrounds(100_000, 100) == (0, 25_000, 50_000, 75_000, 99_800)
    assert ExperimentConfig(n=1000, t=(50,)).backgrounds_for(50) == (0, 250, 500, 750, 900)


@pytest.mark.parametrize(
    "kw", [dict(trials=0), dict(background_levels=(5, 200_000)), dict(background_levels=(-1,)), dict(engine="magic")]
)
def test_config_validation(kw):
    with pytest.raises(ParamError):
        ExperimentConfig(n=100_000, t=100, **kw)


def test_accuracy_rejects_invalid_recipe():
    with pytest.raises(ParamError):
        run_accuracy(ExperimentConfig(n=1000, t=10, trials=1))


def test_tail_check_small():
    r = run_tail_check(100, 10, trials=50, seed=1)
    assert r.fp_complaints == 33 and r.fn_complaints == 137
    assert r.fp_rate <= 0.1 and r.fn_rate <= 0.1
    assert r.bound == pytest.approx(2 ** -10)


def test_test_count_true_at_tau():
    # at exactly tau filled slots the comparison is satisfied
    p = CcbfParams(s=2000, u=100, v=40, n=200, t=10)
    from facts.ccbf import BitTable, derive_item_set, test_count

    t = BitTable(p.s, enforce_lock=False)
    item = derive_item_set(b"x", p)
    tau = TippingCalculator.for_params(p).tau(0)
    t.bits[item.indices[:tau]] = True
    assert test_count(t, item, tau) and not test_count(t, item, tau + 1)


# -- CSV and plots --------------------------------------------------------------------


def test_csv_roundtrip(tmp_path):
    r = AccuracyResult([AccuracyRow(100, 0, 100.5, 2.0, 1.99), AccuracyRow(100, 500, 99.0, 3.0, 3.03)])
    path = tmp_path / "acc.csv"
    r.write_csv(path)
    rows = read_accuracy_csv(path)
    assert [(x.t, x.background, x.mean) for x in rows] == [(100, 0, 100.5), (100, 500, 99.0)]


@pytest.mark.parametrize(
    "text,match",
    [
        ("", "empty"),
        ("t,background,mean,std,rel_std_pct\n", "no data"),
        ("background,t,mean,std,rel_std_pct\n1,2,3,4,5\n", "header"),
        ("t,background,mean,std,rel_std_pct\n1,2,3\n", "line 2"),
        ("t,background,mean,std,rel_std_pct\n1,2,x,4,5\n", "line 2"),
    ],
)
def test_plot_rejects_malformed_csv(tmp_path, text, match):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ValueError, match=match):
        emit_plots(path, tmp_path / "out")


def test_plot_single_row(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("t,background,mean,std,rel_std_pct\n100,0,100.5,2.5,2.487562\n")
    files = emit_plots(path, tmp_path / "out")
    names = sorted(f.name for f in files)
    assert names == ["accuracy.gp", "accuracy_t100.dat"]
    data = (tmp_path / "out" / "accuracy_t100.dat").read_text().splitlines()
    assert data == ["# background mean std rel_std_pct", "0 100.500000 2.500000 2.487562"]


def test_plot_script_has_both_panels(tmp_path):
    r = AccuracyResult([AccuracyRow(t, b, t + 0.5, 1.0, 1.0) for t in (100, 1000) for b in (500, 0)])
    path = tmp_path / "acc.csv"
    r.write_csv(path)
    emit_plots(path, tmp_path / "out")
    script = (tmp_path / "out" / "accuracy.gp").read_text()
    assert script.count("plot '") == 2 and "yerrorlines" in script and "1:4" in script
    rows = (tmp_path / "out" / "accuracy_t1000.dat").read_text().splitlines()[1:]
    assert [int(r.split()[0]) for r in rows] == [0, 500]


# -- network simulation ----------------------------------------------------------------


def test_token_bucket():
    now = [0.0]
    b = TokenBucket(rate=1000, burst=100, clock=lambda: now[0])
    assert b.reserve(100) == 0.0
    assert b.reserve(500) == pytest.approx(0.5)
    now[0] = 2.0
    assert b.reserve(50) == 2.0


def _echo_server():
    srv = socket.create_server(("127.0.0.1", 0))

    def run():
        conn, _ = srv.accept()
        while data := conn.recv(65536):
            conn.sendall(data)
        conn.close()

    threading.Thread(target=run, daemon=True).start()
    return srv


def test_latency_proxy_delays_each_direction():
    srv = _echo_server()
    with LatencyProxy(srv.getsockname(), latency=0.05) as proxy:
        sock = socket.create_connection(proxy.address)
        t0 = time.perf_counter()
        sock.sendall(b"ping")
        got = b""
        while len(got) < 4:
            got += sock.recv(16)
        rtt = time.perf_counter() - t0
        sock.close()
    srv.close()
    assert got == b"ping" and 0.1 <= rtt < 0.2


def test_latency_proxy_bandwidth_cap():
    srv = _echo_server()
    payload = b"x" * 50_000
    with LatencyProxy(srv.getsockname(), latency=0.0, bandwidth_bps=2_000_000, burst_bytes=1000) as proxy:
        sock = socket.create_connection(proxy.address)
        t0 = time.perf_counter()
        sock.sendall(payload)
        got = 0
        while got < len(payload):
            got += len(sock.recv(65536))
        elapsed = time.perf_counter() - t0
        sock.close()
    srv.close()
    # 400 kbit at 2 Mbit/s in each direction, pipelined: at least 0.2 s
    assert elapsed >= 0.19


def test_overlap_counter():
    assert count_overlaps([(0, 1), (1, 2), (2.5, 3)]) == 0
    assert count_overlaps([(0, 1), (0.5, 2)]) == 1


def test_throughput_model():
    r = ThroughputReport(1, 80.0, 8e6, 10, 1.0, 10.0, 592, 0, 0, 0, 0.161, 0)
    assert r.transfer_s == pytest.approx(597 * 8 / 8e6)
    assert r.model_throughput == pytest.approx(1 / (0.16 + 597 * 8 / 8e6))
    assert r.originate_overhead_s == pytest.approx(0.001)


def test_accuracy_holds_at_intermediate_threshold():
    r = run_accuracy(ExperimentConfig(n=100_000, t=316, trials=300, seed=316))
    for row in r.rows:
        assert abs(row.mean - 316) / 316 <= 0.05 and row.rel_std_pct <= 5
