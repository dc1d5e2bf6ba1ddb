import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdcpuf import bench
from cdcpuf.bench import (
    REPORT_COLUMNS,
    AttackReport,
    ExperimentConfig,
    SweepRow,
    SweepSummary,
    derive_seed,
    emit_report,
    parse_config_text,
    parse_report_csv,
    read_results,
    run_attack_once,
    run_seeds,
    run_sweep,
    summarize,
    total_for_training_size,
    write_results,
)
from cdcpuf.crp import split_crpset, split_sizes
from cdcpuf.errors import BudgetError, InvalidInputError


def report(acc, inst=0, size=1000, converged=True, wall=1.0):
    return AttackReport("cdc", 64, 3, "lr", inst, size, acc, converged, 10, wall, {})


def test_average_over_successes_only():
    rows = summarize([report(0.96, 0), report(0.40, 1), report(0.97, 2)])
    assert len(rows) == 1
    assert rows[0].average_accuracy == pytest.approx(0.965)
    assert rows[0].successes == 2 and rows[0].success_rate == pytest.approx(2 / 3)


def test_success_is_strict_and_divergence_fails():
    rows = summarize([report(0.90, 0), report(0.9001, 1), report(None, 2, converged=False)])
    assert rows[0].successes == 1
    assert bench.is_success(1.0, True, 1.0)
    assert not bench.is_success(0.999, True, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 20), st.sampled_from([1000, 2000])),
                min_size=1, max_size=30), st.randoms())
def test_summary_order_independent(items, rnd):
    reps = [report(a, i, s) for a, i, s in items]
    shuffled = reps[:]
    rnd.shuffle(shuffled)
    a, b = summarize(reps), summarize(shuffled)
    assert [(r.training_size, r.successes, r.instances) for r in a] == \
           [(r.training_size, r.successes, r.instances) for r in b]
    for x, y in zip(a, b):
        assert (x.average_accuracy is None) == (y.average_accuracy is None)
        if x.average_accuracy is not None:
            assert x.average_accuracy == pytest.approx(y.average_accuracy)
    for row in a:
        if row.average_accuracy is not None:
            assert row.average_accuracy > 0.9


def test_derive_seed_stable_and_separating():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    seeds = {derive_seed(0, 3, inst, size, 1) for inst in range(10) for size in (1000, 2000, 4000)}
    assert len(seeds) == 30
    assert all(0 <= s < 2**64 for s in seeds)
    # adding sizes to a sweep does not move existing runs
    assert run_seeds(5, 2, 6000, "lr") == run_seeds(5, 2, 6000, "lr")
    assert run_seeds(5, 2, 6000, "lr") != run_seeds(5, 2, 6000, "nn")


@pytest.mark.parametrize("t", [2, 3, 10, 999, 1000, 6000, 80000, 1_200_000])
def test_total_for_training_size(t):
    total = total_for_training_size(t)
    train, val, _ = split_sizes(total)
    assert train + val == t
    nxt = split_sizes(total + 1)
    assert nxt[0] + nxt[1] == t + 1


def test_total_for_training_size_known():
    assert total_for_training_size(6000) == 7500
    assert total_for_training_size(80000) == 100000


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ExperimentConfig(training_sizes=[2000, 1000])
    with pytest.raises(InvalidInputError):
        ExperimentConfig(training_sizes=[1000, 1000])
    with pytest.raises(InvalidInputError):
        ExperimentConfig(success_threshold=0.5)
    with pytest.raises(InvalidInputError):
        ExperimentConfig(attack="svm")
    with pytest.raises(InvalidInputError):
        ExperimentConfig(puf_type="ipuf")
    assert ExperimentConfig(max_crp_budget=10_000).sizes == [1000, 2000, 4000, 8000]


def small(**kw):
    base = dict(n=16, k=2, instance_count=3, training_sizes=[300, 2000], master_seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_run_attack_once_deterministic():
    a = run_attack_once(small(), 1, 2000)
    b = run_attack_once(small(), 1, 2000)
    assert a.record() == b.record()
    assert a.success and a.converged and 0 <= a.test_accuracy <= 1


def test_budget_error():
    with pytest.raises(BudgetError):
        run_attack_once(small(max_crp_budget=2000), 0, 2000)


def test_test_share_disjoint_and_prefix_reuse():
    cfg = small()
    cache = bench._StreamCache(cfg)
    big = cache.crps(0, total_for_training_size(2000))
    little = cache.crps(0, total_for_training_size(300))
    np.testing.assert_array_equal(big.challenges[:len(little)], little.challenges)
    tr, va, te = split_crpset(big, shuffle_seed=run_seeds(3, 0, 2000, "lr")["split"])
    assert not set(te.indices) & (set(tr.indices) | set(va.indices))


def test_sweep_stops_at_first_breaking_size():
    s = run_sweep(small(training_sizes=[100, 2000, 4000]))
    sizes = sorted({r.training_size for r in s.reports})
    assert s.minimal_breaking_size == sizes[-1]
    assert 4000 not in sizes and 100 in sizes
    assert s.broken and not s.budget_exhausted


def test_sweep_budget_exhausted():
    s = run_sweep(small(training_sizes=[100, 2000], max_crp_budget=1000))
    assert {r.training_size for r in s.reports} == {100}
    assert not s.broken and s.budget_exhausted


def test_realizable_tiny_sweep_threshold_one():
    cfg = ExperimentConfig(n=4, k=2, instance_count=10, training_sizes=[4000],
                           success_threshold=1.0, master_seed=1)
    s = run_sweep(cfg)
    assert s.rows[0].success_rate == 1.0 and s.minimal_breaking_size == 4000


def test_all_failure_sweep():
    cfg = ExperimentConfig(n=64, k=7, instance_count=3, training_sizes=[500, 1000],
                           max_crp_budget=1300, master_seed=1, max_epochs=3)
    s = run_sweep(cfg)
    assert s.minimal_breaking_size is None
    assert all(not r.success for r in s.reports)


def test_xor_sweep_uses_broadcast():
    cfg = small(puf_type="xor", training_sizes=[2000], instance_count=1)
    cache = bench._StreamCache(cfg)
    crps = cache.crps(0, 100)
    assert (crps.challenges == crps.challenges[:, :1]).all()
    assert run_sweep(cfg).reports[0].success


def test_transcript_byte_identical(tmp_path):
    paths = []
    for i in range(2):
        s = run_sweep(small())
        p = tmp_path / f"r{i}.jsonl"
        write_results(s.reports, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    for line in paths[0].read_text().splitlines():
        rec = json.loads(line)
        assert "wallTime" not in rec and rec["kind"] == "attack_run"


def test_results_round_trip(tmp_path):
    s = run_sweep(small())
    write_results(s.reports, tmp_path / "r.jsonl")
    back = read_results(tmp_path / "r.jsonl")
    assert summarize(back) == s.rows
    (tmp_path / "r.jsonl.timing.jsonl").unlink()
    rows = summarize(read_results(tmp_path / "r.jsonl"))
    assert rows[0].median_wall_time is None


def test_empty_report_is_header_only():
    assert emit_report(SweepSummary(), "csv") == ",".join(REPORT_COLUMNS) + "\n"
    assert emit_report([], "table").split() == REPORT_COLUMNS
    assert emit_report([], "jsonl") == ""


def row(successes=9, instances=10, avg=0.961):
    return SweepRow("cdc", 64, 3, "lr", 6000, instances, successes, avg, 12.5)


def test_percent_rendering():
    text = emit_report([row()], "table")
    assert "90%" in text and "96.1%" in text
    assert "No convergence" in emit_report([row(0, 10, None)], "table")


def test_csv_round_trip():
    parsed = parse_report_csv(emit_report([row()], "csv"))
    assert parsed == [{"pufType": "cdc", "n": 64, "k": 3, "attack": "lr", "trainingSize": 6000,
                       "averageAccuracy": 0.961, "successRate": 0.9, "medianWallTime": 12.5}]


def test_jsonl_columns_and_order():
    rows = [row(), SweepRow("cdc", 64, 3, "lr", 12000, 10, 10, 0.97, 3.0)]
    lines = emit_report(rows, "jsonl").splitlines()
    assert [json.loads(l)["trainingSize"] for l in lines] == [6000, 12000]
    assert sorted(json.loads(lines[0])) == sorted(REPORT_COLUMNS)
    with pytest.raises(InvalidInputError):
        emit_report(rows, "xml")


def test_parse_config_text():
    text = """
    # CDC-3 at desk scale
    pufType = cdc
    n = 64
    k=3
    training_sizes = 2000, 4000 6000
    successThreshold = 0.9
    wallClockBudget = none
    seed = 7
    """
    cfg = parse_config_text(text)
    assert cfg == {"puf_type": "cdc", "n": 64, "k": 3, "training_sizes": [2000, 4000, 6000],
                   "success_threshold": 0.9, "wall_clock_budget": None, "master_seed": 7}
    with pytest.raises(InvalidInputError):
        parse_config_text("colour = red")
    with pytest.raises(InvalidInputError):
        parse_config_text("n 64")


def test_load_config_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("n = 32\nk = 2\nmasterSeed = 4\n")
    cfg = bench.load_config(p, k=3, master_seed=None)
    assert (cfg.n, cfg.k, cfg.master_seed) == (32, 3, 4)
