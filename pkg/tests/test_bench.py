import math

import numpy as np
import pytest

from sfseg import bench
from sfseg.engine import SfsegConfig
from sfseg.volume import VolumeShape

TINY = [VolumeShape(3, 6, 6), VolumeShape(3, 8, 8)]


@pytest.fixture(scope="module")
def records():
    return bench.run_scaling_benchmark(TINY, iters=3, warmup=0, repeats=5)


class TestScalingBenchmark:
    def test_one_record_per_mode_and_size(self, records):
        assert len(records) == 6
        assert {(r.mode, r.nodes) for r in records} == {(m, s.size) for m in bench.MODES for s in TINY}

    def test_timings_are_positive(self, records):
        for r in records:
            assert r.per_iter_s > 0
            assert r.total_s == pytest.approx(r.build_s + 3 * r.per_iter_s)
            assert (r.build_s == 0) == (r.mode == "conv")

    def test_csv_round_trip(self, records, tmp_path):
        text = bench.records_to_csv(records, tmp_path / "b.csv")
        assert text.splitlines()[0] == ",".join(bench.CSV_FIELDS)
        back = bench.read_records_csv(tmp_path / "b.csv")
        assert [r.mode for r in back] == [r.mode for r in records]
        for a, b in zip(back, records):
            assert a.per_iter_s == pytest.approx(b.per_iter_s, rel=1e-5)

    def test_per_iter_lookup(self, records):
        assert bench.per_iter(records, "conv", 108) > 0
        with pytest.raises(KeyError):
            bench.per_iter(records, "conv", 7)

    def test_few_repeats_warn(self):
        with pytest.warns(bench.BenchWarning, match="unstable"):
            bench.run_scaling_benchmark(TINY[:1], iters=1, warmup=0, repeats=1, modes=["conv"])

    def test_oracle_modes_skipped_above_capacity(self):
        notices = []
        recs = bench.run_scaling_benchmark([VolumeShape(3, 8, 8)], iters=1, warmup=0, repeats=5,
                                           max_oracle_nodes=100, log=notices.append)
        assert [r.mode for r in recs] == ["conv"]
        assert len(notices) == 2 and all("capacity" in n for n in notices)

    @pytest.mark.parametrize("kw", [{"modes": ["fft"]}, {"iters": 0}, {"repeats": 0}])
    def test_bad_arguments(self, kw):
        with pytest.raises(ValueError):
            bench.run_scaling_benchmark(TINY[:1], **kw)


class TestGate:
    def test_passes(self):
        cfg = SfsegConfig(threads=1)
        result = bench.correctness_gate(bench.bench_instance((4, 10, 10)), cfg)
        assert result.passed
        assert result.max_step_error <= 1e-4
        assert result.conv_taylor_iou == 1.0
        assert 0 <= result.exact_taylor_iou <= 1

    def test_instance_shape(self):
        f = bench.bench_instance((10, 20, 20))
        assert f.shape == (10, 20, 20)
        assert 0 < np.asarray(f.unary).mean() < 1


def test_scaling_exponent():
    n = np.array([1e3, 4e3, 1.6e4])
    assert bench.scaling_exponent(n, 3e-7 * n) == pytest.approx(1.0)
    assert bench.scaling_exponent(n, n**2) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        bench.scaling_exponent([1], [1])


def test_separability_small():
    r = bench.time_separability((4, 16, 16), repeats=1, warmup=0)
    assert r.max_abs_diff <= 1e-5
    assert r.tap_ratio == pytest.approx(147 / 17)
    assert math.isfinite(r.speedup) and r.speedup > 0


@pytest.mark.slow
def test_doubling_nodes_grows_time_at_most_2_5x():
    sizes = [(10, 20, 20), (10, 28, 28), (10, 40, 40), (10, 56, 56), (10, 80, 80)]  # each ~2x the last
    recs = bench.run_scaling_benchmark(sizes, iters=40, repeats=5, modes=["conv"], cfg=SfsegConfig(threads=1),
                                       gate=False)
    t = [r.per_iter_s for r in recs]
    ratios = [b / a for a, b in zip(t, t[1:])]
    # a single step can straddle a cache-size boundary; the typical doubling must stay near-linear
    assert float(np.median(ratios)) <= 2.5, ratios
