import math

import pytest
from hypothesis import given, strategies as st

from egrusim.profiler import (
    STAGES,
    CostModel,
    ProfileReport,
    StageCounters,
    StageRates,
    build_report,
    default_rates,
    energy,
    quantize_to_timer,
)

counter_values = st.integers(0, 10**9)


@st.composite
def stage_counters(draw):
    c = StageCounters()
    for s in STAGES:
        c.add(
            s,
            mac_count=draw(counter_values),
            bytes_read=draw(counter_values),
            bytes_written=draw(counter_values),
            packet_count=draw(st.integers(0, 10**6)),
        )
    return c


def wall_clock_model(power_w=0.0):
    """One packet on host_io costs one microsecond; everything else is free."""
    rates = {s: StageRates() for s in STAGES}
    rates["host_io"] = StageRates(sec_per_packet=1e-6)
    return CostModel(rates, power_w)


class TestEnergy:
    def test_gpu_figure(self):
        assert energy(60, 19.9e-3) == pytest.approx(1.194, rel=1e-12)
        assert energy(60, 19.9e-3) == pytest.approx(1.1935, rel=1e-3)

    def test_chip_figure(self):
        assert energy(0.39, 60.19e-3) == pytest.approx(0.0234741, rel=1e-6)

    def test_zero_power(self):
        assert energy(0, 123.0) == 0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            energy(-1, 1)


class TestQuantize:
    @pytest.mark.parametrize("t, ticks", [(170.25e-3, 170250), (0.4e-6, 0), (1e-6, 1), (0.0, 0), (9.99e-6, 9)])
    def test_examples(self, t, ticks):
        assert quantize_to_timer(t) == ticks

    def test_negative(self):
        with pytest.raises(ValueError):
            quantize_to_timer(-1e-6)

    @given(st.integers(0, 10**9))
    def test_whole_microseconds_are_exact(self, us):
        assert quantize_to_timer(us / 1e6) == us


class TestCounters:
    def test_negative_increment(self):
        with pytest.raises(ValueError):
            StageCounters().add("pointwise", mac_count=-1)

    @given(stage_counters(), stage_counters(), stage_counters())
    def test_merge_is_associative_and_commutative(self, a, b, c):
        left = a.copy().merge(b).merge(c).as_dict()
        right = c.copy().merge(a.copy().merge(b)).as_dict()
        assert left == right == b.copy().merge(c).merge(a).as_dict()

    @given(stage_counters())
    def test_dict_round_trip(self, c):
        assert StageCounters.from_dict(c.as_dict()).as_dict() == c.as_dict()


class TestReport:
    def test_all_zero(self):
        r = build_report(StageCounters())
        assert r.total_time_s == 0 and r.energy_j == 0
        assert all(v == 0 for v in r.stage_times_s.values())

    def test_single_stage_is_the_total(self):
        c = StageCounters()
        c.add("recurrent_matmul", mac_count=12345, bytes_read=999)
        r = build_report(c)
        assert r.total_time_s == r.stage_times_s["recurrent_matmul"] > 0
        assert r.ranked_stages()[0] == "recurrent_matmul"

    def test_gpu_energy_through_report(self):
        c = StageCounters()
        c.add("host_io", packet_count=19_900)
        r = build_report(c, wall_clock_model(), power_w=60.0)
        assert abs(r.energy_j - 1.1935) / 1.1935 < 0.005

    def test_batch_normalization(self):
        c = StageCounters()
        c.add("host_io", packet_count=6 * 56_200)
        r = build_report(c, wall_clock_model(0.42), batch_size=6)
        assert r.time_per_item_s == r.total_time_s / 6
        assert abs(r.energy_per_item_j - 0.023) / 0.023 < 0.05

    def test_measured_energy_kept_alongside(self):
        c = StageCounters()
        c.add("host_io", packet_count=170_250)
        r = build_report(c, wall_clock_model(0.39), measured_energy_j=0.0653)
        assert r.energy_j == pytest.approx(0.0664, rel=2e-3)
        assert r.measured_energy_j == 0.0653
        assert r.stage_ticks["host_io"] == 170_250

    def test_power_is_labelled_modeled(self):
        r = build_report(StageCounters())
        assert r.power_w == 0.39 and r.power_source == "modeled"
        assert "modeled" in r.format_table()

    def test_small_stages_flagged(self):
        c = StageCounters()
        c.add("host_io", packet_count=3)
        c.add("recurrent_matmul", mac_count=10**6)
        r = build_report(c, wall_clock_model())
        assert r.quantized_stages == ["host_io"]

    def test_bad_batch(self):
        with pytest.raises(ValueError):
            build_report(StageCounters(), batch_size=0)

    def test_rates_must_cover_every_stage(self):
        with pytest.raises(ValueError):
            CostModel({"pointwise": StageRates()})

    def test_negative_rate(self):
        with pytest.raises(ValueError):
            StageRates(sec_per_mac=-1)

    def test_default_rates_are_nonnegative(self):
        for r in default_rates().values():
            assert min(r.sec_per_mac, r.sec_per_byte, r.sec_per_packet) >= 0

    @given(stage_counters(), st.integers(1, 64), st.floats(0, 100))
    def test_invariants(self, c, batch, power):
        r = build_report(c, batch_size=batch, power_w=power)
        assert r.total_time_s == math.fsum(r.stage_times_s.values())
        assert r.energy_j == power * r.total_time_s
        assert r.time_per_item_s == r.total_time_s / batch
        assert r.energy_per_item_j == r.energy_j / batch

    @given(stage_counters(), st.sampled_from(STAGES), st.sampled_from(
        ["mac_count", "bytes_read", "bytes_written", "packet_count"]), st.integers(1, 10**6))
    def test_monotone_in_every_counter(self, c, stage, field, inc):
        before = build_report(c)
        bigger = c.copy()
        bigger.add(stage, **{field: inc})
        after = build_report(bigger)
        assert all(after.stage_times_s[s] >= before.stage_times_s[s] for s in STAGES)
        assert after.total_time_s >= before.total_time_s

    @given(stage_counters())
    def test_json_round_trip(self, c):
        r = build_report(c, batch_size=3)
        back = ProfileReport.from_json(r.to_json())
        assert back == r

    def test_json_field_names(self):
        import json

        doc = json.loads(build_report(StageCounters()).to_json())
        assert doc["format"] == "egrusim-profile" and doc["version"] == 1
        assert set(doc["stage_times_s"]) == set(STAGES)
        for key in ("total_time_s", "power_w", "energy_j", "batch_size", "time_per_item_s", "energy_per_item_j"):
            assert key in doc

    def test_unknown_document_rejected(self):
        with pytest.raises(ValueError):
            ProfileReport.from_json('{"format": "other"}')
