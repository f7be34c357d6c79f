import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phased_lstm import tasks
from phased_lstm.tasks import AddingTaskConfig, EventSequence, FreqTaskConfig, gen_dataset


def _replay(cfg, seed, i):
    """Periods and phases drawn for sample ``i``, replayed from its own generator."""
    rng = np.random.default_rng([seed, i])
    return tasks._sine_params(rng, i % 2 == 1, cfg)


def test_target_class_period_range():
    cfg = FreqTaskConfig()
    for i in range(1, 200, 2):
        (period,), _ = _replay(cfg, 0, i)
        assert 5.0 < period < 6.0


def test_standard_sampling_is_one_ms():
    ds = gen_dataset(FreqTaskConfig(), 50, 3)
    for s in ds.train + ds.test:
        # offsets are exact integers; adding the continuous start rounds by an ulp
        np.testing.assert_allclose(np.diff(s.times), 1.0, rtol=0, atol=1e-12)
        assert len(s) == int(np.floor(s.times[-1] - s.times[0] + 0.5)) + 1


def test_oversampled_is_ten_times_denser():
    std = gen_dataset(FreqTaskConfig(), 20, 1)
    over = gen_dataset(FreqTaskConfig(sampling="oversampled_0p1ms"), 20, 1)
    for a, b in zip(std.train, over.train):
        np.testing.assert_allclose(np.diff(b.times), 0.1, rtol=0, atol=1e-12)
        assert a.times[0] == b.times[0]
        assert abs(len(b) - 10 * len(a)) <= 10


def test_async_counts_match_standard():
    std = gen_dataset(FreqTaskConfig(), 200, 7)
    asy = gen_dataset(FreqTaskConfig(sampling="async"), 200, 7)
    for a, b in zip(std.train + std.test, asy.train + asy.test):
        assert len(a) == len(b)
        assert a.times[0] == b.times[0]
        assert abs(b.times[-1] - a.times[-1]) < 1e-9
        assert np.all(np.diff(b.times) > 0)


def test_async_gaps_are_irregular():
    ds = gen_dataset(FreqTaskConfig(sampling="async"), 50, 0)
    gaps = np.concatenate([np.diff(s.times) for s in ds.train])
    assert gaps.std() > 0.3 and abs(gaps.mean() - 1.0) < 1e-9


@pytest.mark.parametrize("sampling", ["standard_1ms", "oversampled_0p1ms", "async"])
def test_counts_and_windows(sampling):
    ds = gen_dataset(FreqTaskConfig(sampling=sampling), 100, 2)
    dt = 0.1 if sampling == "oversampled_0p1ms" else 1.0
    for s in ds.train:
        assert s.times[0] >= 0 and s.times[-1] <= 125.0
        assert 15 / dt - 1 <= len(s) <= 125 / dt + 1


@pytest.mark.parametrize("superimposed", [False, True])
def test_amplitude_bound(superimposed):
    ds = gen_dataset(FreqTaskConfig(superimposed=superimposed), 100, 0)
    bound = 2.0 if superimposed else 1.0
    assert max(np.abs(s.values).max() for s in ds.train) <= bound


@pytest.mark.parametrize("sampling", ["standard_1ms", "async"])
@pytest.mark.parametrize("superimposed", [False, True])
def test_generator_self_consistency(sampling, superimposed):
    cfg = FreqTaskConfig(sampling=sampling, superimposed=superimposed)
    ds = gen_dataset(cfg, 60, 4, test_fraction=0)
    for i, s in enumerate(ds.train):
        periods, phases = _replay(cfg, 4, i)
        y = sum(np.sin(2 * np.pi * (s.times - s.times[0]) / p + ph) for p, ph in zip(periods, phases))
        np.testing.assert_allclose(s.values[:, 0], y, rtol=0, atol=1e-9)
        inside = [cfg.target_period[0] < periods[0] < cfg.target_period[1]]
        if superimposed:
            inside.append(cfg.target_period2[0] < periods[1] < cfg.target_period2[1])
        assert all(inside) if s.label == 1 else not any(inside)


def test_union_sampling_is_length_weighted():
    rng = np.random.default_rng(0)
    draws = np.array([tasks.sample_from_union(rng, ((1.0, 5.0), (6.0, 100.0))) for _ in range(20000)])
    assert not np.any((draws > 5.0) & (draws < 6.0))
    assert abs(np.mean(draws < 5.0) - 4 / 98) < 0.005


def test_disjoint_sets_enforced():
    with pytest.raises(ValueError):
        FreqTaskConfig(target_period=(4.0, 6.0))
    with pytest.raises(ValueError):
        FreqTaskConfig(sampling="weekly")


def test_balance_by_alternation():
    ds = gen_dataset(FreqTaskConfig(), 1000, 0, test_fraction=0)
    assert tasks.class_counts(ds.train) == {0: 500, 1: 500}
    ds = gen_dataset(FreqTaskConfig(), 1500, 0, test_fraction=1 / 3)
    assert len(ds.train) == 1000 and len(ds.test) == 500
    assert tasks.class_counts(ds.train) == {0: 500, 1: 500}
    assert tasks.class_counts(ds.test) == {0: 250, 1: 250}


def test_dataset_determinism_and_digest():
    a = gen_dataset(FreqTaskConfig(sampling="async"), 30, 9)
    b = gen_dataset(FreqTaskConfig(sampling="async"), 30, 9)
    c = gen_dataset(FreqTaskConfig(sampling="async"), 30, 10)
    assert a.digest() == b.digest() != c.digest()


def test_samples_independent_of_n():
    small = gen_dataset(FreqTaskConfig(), 10, 5, test_fraction=0)
    big = gen_dataset(FreqTaskConfig(), 40, 5, test_fraction=0)
    for a, b in zip(small.train, big.train):
        np.testing.assert_array_equal(a.values, b.values)


def test_adding_examples():
    cfg = AddingTaskConfig()
    ds = gen_dataset(cfg, 200, 0, test_fraction=0)
    for s in ds.train:
        n = len(s)
        assert 490 <= n <= 510
        marks = s.values[:, 1]
        assert marks.sum() == 2.0
        i1, i2 = np.nonzero(marks)[0]
        assert i1 < max(1, int(np.floor(0.1 * n)))
        assert i2 >= int(np.ceil(0.5 * n))
        assert s.target == s.values[i1, 0] + s.values[i2, 0]
        assert -1.0 <= s.target <= 1.0
        np.testing.assert_array_equal(s.times, np.arange(n))


def test_adding_marked_values_sum():
    seq = EventSequence(np.arange(4.0), [[0.3, 1.0], [0.1, 0.0], [-0.2, 1.0], [0.4, 0.0]], target=0.1)
    marked = seq.values[seq.values[:, 1] == 1.0, 0]
    assert abs(marked.sum() - seq.target) < 1e-15


def test_adding_degenerate_length():
    ds = gen_dataset(AddingTaskConfig(length_range=(10, 10)), 30, 1)
    assert {len(s) for s in ds.train + ds.test} == {10}


def test_adding_target_variance():
    # sum of two independent U(-0.5, 0.5) draws has variance 1/6
    ds = gen_dataset(AddingTaskConfig(length_range=(20, 20)), 20000, 0, test_fraction=0)
    y = np.array([s.target for s in ds.train])
    assert abs(y.var() - 1 / 6) < 0.006


@settings(max_examples=30, deadline=None)
@given(lo=st.integers(2, 60), extra=st.integers(0, 20), seed=st.integers(0, 10_000))
def test_adding_windows_property(lo, extra, seed):
    cfg = AddingTaskConfig(length_range=(lo, lo + extra))
    s = tasks.gen_adding_sample(cfg, np.random.default_rng(seed))
    idx = np.nonzero(s.values[:, 1])[0]
    assert idx.size == 2 and idx[0] < idx[1]


def test_event_sequence_validation():
    with pytest.raises(ValueError):
        EventSequence([0.0, 1.0], np.zeros((3, 1)))
    with pytest.raises(ValueError):
        EventSequence([], np.zeros((0, 1)))


def test_file_round_trip(tmp_path):
    ds = gen_dataset(FreqTaskConfig(sampling="async"), 25, 2)
    for name in ("d.jsonl", "d.jsonl.gz"):
        assert tasks.write_dataset(ds, tmp_path / name, "abc") == 25
        back = tasks.read_dataset(tmp_path / name)
        assert back.digest() == ds.digest() and back.task == ds.task and back.seed == 2


def test_gzip_output_is_byte_identical(tmp_path):
    ds = gen_dataset(AddingTaskConfig(length_range=(10, 12)), 20, 0)
    tasks.write_dataset(ds, tmp_path / "a.jsonl.gz")
    tasks.write_dataset(ds, tmp_path / "b.jsonl.gz")
    assert (tmp_path / "a.jsonl.gz").read_bytes() == (tmp_path / "b.jsonl.gz").read_bytes()


def test_read_rejects_wrong_schema(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"schema": 99}\n')
    with pytest.raises(ValueError):
        tasks.read_dataset(p)


def test_task_dict_round_trip():
    for cfg in (FreqTaskConfig(sampling="async", superimposed=True), AddingTaskConfig(length_range=(5, 9))):
        assert tasks.task_from_dict(tasks.task_to_dict(cfg)) == cfg
    with pytest.raises(ValueError):
        tasks.task_from_dict({"kind": "copy"})
