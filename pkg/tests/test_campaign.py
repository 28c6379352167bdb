"""Campaign planning, execution, aggregation, and serialization."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import seusim.campaign as camp
from seusim.campaign import (
    CampaignConfig,
    aggregate,
    config_from_dict,
    config_to_dict,
    golden_run,
    pixel_mismatch_rate,
    plan,
    read_matrix_csv,
    read_records_csv,
    run_campaign,
    sample_size,
    with_inputs,
    write_matrix_csv,
    write_records_csv,
)
from seusim.inject import FaultLocation
from seusim.model import (
    ParamKind,
    build_bias_probe_model,
    build_unet,
    enumerate_fault_space,
    synthetic_input,
)
from seusim.errormodel import bias_signs, expected_bias_msb_error
from tests.test_model import single_conv_model


def sample_size_oracle(N, e="0.025", t="1.96", p="0.5", cap=1550):
    """Exact-rational evaluation of the finite-population formula."""
    e, t, p = Fraction(e), Fraction(t), Fraction(p)
    n = Fraction(N) / (1 + e * e * (N - 1) / (t * t * p * (1 - p)))
    return min(math.ceil(n), cap, N)


class TestSampleSize:
    # expected values frozen from sample_size_oracle
    @pytest.mark.parametrize("N,expected", [(1, 1), (384, 308), (1000, 607), (10 ** 6, 1535)])
    def test_frozen_values(self, N, expected):
        assert sample_size_oracle(N) == expected
        assert sample_size(N) == expected

    @given(st.integers(1, 10 ** 7))
    def test_matches_oracle_everywhere(self, N):
        assert sample_size(N) == sample_size_oracle(N)

    @given(st.integers(1, 10 ** 7), st.integers(1, 10 ** 7))
    def test_monotone_nondecreasing(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert sample_size(lo) <= sample_size(hi)

    @given(st.integers(1, 10 ** 9))
    def test_upper_bound(self, N):
        asymptote = math.ceil(1.96 ** 2 * 0.25 / 0.025 ** 2)
        assert sample_size(N) <= min(1550, asymptote)

    def test_collapses_to_N_for_tiny_spaces(self):
        for N in range(1, 12):
            assert sample_size(N) <= N

    def test_cap_applies(self):
        assert sample_size(10 ** 6, cap=100) == 100

    @pytest.mark.parametrize("kwargs", [dict(e=0.0), dict(e=1.0), dict(t=0.0), dict(p=0.0),
                                        dict(p=1.0), dict(cap=0)])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ValueError):
            sample_size(1000, **kwargs)

    def test_n_zero_rejected(self):
        with pytest.raises(ValueError):
            sample_size(0)


class TestPlan:
    def test_single_parameter_exhaustive(self):
        g = single_conv_model(out_ch=1, in_ch=1)  # 1 weight + 1 bias
        cfg = CampaignConfig(included_kinds=frozenset({ParamKind.ConvWeight}))
        entries = plan(g, cfg).entries
        assert len(entries) == 1
        assert entries[0].fault_space == 32 and entries[0].injections == 32

    def test_cap_limits_every_layer(self):
        g = build_unet(depth=1, base_channels=4, n_input_channels=3, n_classes=6, seed=0)
        cfg = CampaignConfig(cap=10)
        assert all(e.injections <= 10 for e in plan(g, cfg).entries)

    def test_empty_kind_set_rejected(self):
        with pytest.raises(ValueError):
            CampaignConfig(included_kinds=frozenset())

    def test_bits_filter_shrinks_space(self):
        g = single_conv_model(out_ch=1, in_ch=1)
        cfg = CampaignConfig(included_kinds=frozenset({ParamKind.ConvWeight}), bits=(30,))
        assert plan(g, cfg).entries[0].fault_space == 1

    def test_layer_filter(self):
        g = build_unet(depth=1, base_channels=4, n_input_channels=3, n_classes=6, seed=0)
        cfg = CampaignConfig(layers=(0,))
        entries = plan(g, cfg).entries
        assert [e.layer_id for e in entries] == [0]

    def test_disjoint_layer_filter_is_empty(self):
        g = single_conv_model()
        with pytest.raises(ValueError, match="empty fault space"):
            plan(g, CampaignConfig(layers=(99,)))


class TestGoldenAndMismatch:
    def test_golden_repeatable(self):
        g = build_unet(depth=1, base_channels=4, n_input_channels=3, n_classes=6, seed=0)
        x = synthetic_input(g, 16, 16, seed=1)
        np.testing.assert_array_equal(golden_run(g, x), golden_run(g, x))

    def test_golden_uses_cache(self):
        camp.clear_golden_cache()
        g = build_unet(depth=1, base_channels=4, n_input_channels=3, n_classes=6, seed=0)
        x = synthetic_input(g, 16, 16, seed=1)
        golden_run(g, x)
        assert len(camp._GOLDEN_CACHE) == 1
        golden_run(g, x)
        assert len(camp._GOLDEN_CACHE) == 1

    def test_mismatch_examples(self):
        a = np.zeros((3, 4), dtype=np.int32)
        assert pixel_mismatch_rate(a, a.copy()) == 0.0
        assert pixel_mismatch_rate(a, a + 1) == 1.0
        b = a.copy()
        b.reshape(-1)[:3] = 7
        assert pixel_mismatch_rate(a, b) == 0.25

    def test_mismatch_shape_check(self):
        with pytest.raises(ValueError):
            pixel_mismatch_rate(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))


def tiny_campaign_config(**kw):
    g = build_unet(depth=1, base_channels=4, n_input_channels=3, n_classes=6, seed=0)
    x = synthetic_input(g, 16, 16, seed=1)
    defaults = dict(cap=8, seed=5, inputs=(x,))
    defaults.update(kw)
    return g, CampaignConfig(**defaults)


class TestRunCampaign:
    def test_exhaustive_single_parameter_covers_all_bits(self):
        g = single_conv_model(out_ch=1, in_ch=1, weights=np.full((1, 1, 1, 1), 0.5))
        x = synthetic_input(g, 4, 4, seed=0)
        cfg = CampaignConfig(included_kinds=frozenset({ParamKind.ConvWeight}), inputs=(x,), seed=1)
        records, matrix = run_campaign(g, cfg)
        assert sorted(r.location.bit for r in records) == list(range(32))
        assert len({(r.location.index, r.location.bit) for r in records}) == 32

    def test_seed_reproducibility(self):
        g, cfg = tiny_campaign_config()
        r1, m1 = run_campaign(g, cfg)
        r2, m2 = run_campaign(g, cfg)
        assert r1 == r2
        assert m1.cells == m2.cells and m1.mean == m2.mean

    def test_parallel_equivalence(self):
        g, cfg = tiny_campaign_config()
        r1, m1 = run_campaign(g, cfg, jobs=1)
        r4, m4 = run_campaign(g, cfg, jobs=4)
        r8, m8 = run_campaign(g, cfg, jobs=8)
        assert r1 == r4 == r8
        assert m1.cells == m4.cells == m8.cells

    def test_locations_unique_and_in_space(self):
        g, cfg = tiny_campaign_config(cap=40)
        records, _ = run_campaign(g, cfg)
        seen = set()
        space = enumerate_fault_space(g, cfg.included_kinds)
        for r in records:
            key = (r.location.layer_id, r.location.kind, r.location.index, r.location.bit)
            assert key not in seen
            seen.add(key)
            entry = [e for e in space.layer_entries(r.location.layer_id) if e.kind == r.location.kind]
            assert entry and r.location.index < entry[0].count and r.location.bit < entry[0].bit_width

    def test_stratified_sampling_balances_bits(self):
        g, cfg = tiny_campaign_config(sampling="stratified_per_bit", cap=64, bits=(23, 26, 30))
        records, _ = run_campaign(g, cfg)
        by_layer_bit = {}
        for r in records:
            by_layer_bit.setdefault(r.location.layer_id, []).append(r.location.bit)
        for lid, bits in by_layer_bit.items():
            counts = {b: bits.count(b) for b in set(bits)}
            assert set(counts) <= {23, 26, 30}
            assert max(counts.values()) - min(counts.values()) <= 1

    def test_requires_inputs(self):
        g, cfg = tiny_campaign_config()
        with pytest.raises(ValueError, match="input"):
            run_campaign(g, with_inputs(cfg, ()))

    def test_int8_model_campaign(self):
        from seusim.compress import fold_batch_norm, quantize_model

        g = build_unet(depth=1, base_channels=4, n_input_channels=3, n_classes=6, seed=2)
        x = synthetic_input(g, 16, 16, seed=3)
        q = quantize_model(fold_batch_norm(g), [x])
        cfg = CampaignConfig(included_kinds=frozenset({ParamKind.ConvWeight, ParamKind.ConvBias}),
                             cap=16, seed=4, inputs=(x,))
        records, matrix = run_campaign(q, cfg)
        widths = {r.location.kind: r.bit_width for r in records}
        assert widths[ParamKind.ConvWeight] == 8
        assert widths.get(ParamKind.ConvBias, 32) == 32
        assert all(r.post_kind == "finite" for r in records)  # no NaN/Inf in integer graphs
        assert all(0.0 <= r.error_rate <= 1.0 for r in records)

    def test_probe_cross_check_against_analytical(self):
        freqs = [0.0, 0.4491, 0.0441, 0.2695, 0.0747, 0.1627]
        biases = [-0.85, 0.32, -0.03, 0.04, -0.17, 0.11]
        g, x = build_bias_probe_model(biases, freqs, seed=0)
        cfg = CampaignConfig(included_kinds=frozenset({ParamKind.ConvBias}),
                             bits=(30,), seed=11, inputs=(x,))
        _, matrix = run_campaign(g, cfg)
        measured = matrix.cells[(g.nodes[-1].id, 30)].mean
        expected = expected_bias_msb_error(freqs, bias_signs(biases))
        assert abs(measured - expected) <= 0.025


class TestAggregate:
    def rec(self, rate, layer=0, bit=0, index=0):
        return camp.InjectionRecord(
            location=FaultLocation(layer, ParamKind.ConvWeight, index, bit),
            bit_width=32, pre_bits=0, post_bits=1 << bit,
            direction="zero_to_one", field="mantissa", post_kind="finite",
            input_id=0, error_rate=rate,
        )

    def test_mean_and_mean_nonzero(self):
        m = aggregate([self.rec(0.0, index=0), self.rec(0.0, index=1), self.rec(1.0, index=2)])
        cell = m.cells[(0, 0)]
        assert cell.mean == pytest.approx(1 / 3)
        assert cell.mean_nonzero == 1.0
        assert m.nonzero_count == 1

    def test_all_zero_rates_flagged(self):
        m = aggregate([self.rec(0.0, index=i) for i in range(4)])
        assert m.mean_nonzero == 0.0 and m.nonzero_count == 0

    def test_single_record(self):
        m = aggregate([self.rec(0.42)])
        cell = m.cells[(0, 0)]
        assert cell.mean == 0.42 and cell.std == 0.0 and cell.max == 0.42

    def test_population_std(self):
        m = aggregate([self.rec(0.0, index=0), self.rec(1.0, index=1)])
        assert m.cells[(0, 0)].std == pytest.approx(0.5)  # ddof=0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
    def test_mean_nonzero_dominates_mean(self, rates):
        m = aggregate([self.rec(r, index=i) for i, r in enumerate(rates)])
        if m.nonzero_count:
            assert m.mean_nonzero >= m.mean - 1e-12


class TestSerialization:
    def test_records_roundtrip(self, tmp_path):
        g, cfg = tiny_campaign_config()
        records, _ = run_campaign(g, cfg)
        path = tmp_path / "records.csv"
        write_records_csv(path, records)
        assert read_records_csv(path) == records

    def test_matrix_roundtrip(self, tmp_path):
        g, cfg = tiny_campaign_config()
        _, matrix = run_campaign(g, cfg)
        path = tmp_path / "matrix.csv"
        write_matrix_csv(path, matrix)
        assert read_matrix_csv(path) == matrix.cells

    def test_matrix_means_in_unit_interval(self, tmp_path):
        g, cfg = tiny_campaign_config()
        _, matrix = run_campaign(g, cfg)
        for cell in matrix.cells.values():
            assert 0.0 <= cell.mean <= 1.0
            assert cell.std >= 0.0

    def test_config_dict_roundtrip(self):
        cfg = CampaignConfig(e=0.05, cap=99, seed=3,
                             included_kinds=frozenset({ParamKind.BNGamma}),
                             bits=(30, 23), layers=(1, 2))
        d = config_to_dict(cfg)
        back = config_from_dict({k: v for k, v in d.items() if k != "inputs"})
        assert back.e == cfg.e and back.cap == cfg.cap and back.seed == cfg.seed
        assert back.included_kinds == cfg.included_kinds
        assert back.bits == (23, 30) and back.layers == (1, 2)

    def test_config_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            config_from_dict({"e": 0.025, "bogus": 1})
