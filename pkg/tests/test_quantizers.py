import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ptqlab import quantizers as q
from ptqlab.errors import ValidationError
from ptqlab.quantizers import QuantSpec

PUBLISHED_MX = [-6, -4, -3, -2, -1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2, 3, 4, 6]

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=64)


def matrices(min_rows=1, max_rows=4, min_cols=1, max_cols=40, elements=finite):
    shape = st.tuples(st.integers(min_rows, max_rows), st.integers(min_cols, max_cols))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=elements))


def scalar_oracle(values, delta, zero, qmin, qmax):
    """Half-away-from-zero rounding, one element at a time."""
    out = []
    for v in values:
        r = v / delta
        code = math.floor(abs(r) + 0.5) * (1 if r >= 0 else -1) + zero
        code = min(max(code, qmin), qmax)
        out.append((code, (code - zero) * delta))
    return out


class TestSpec:
    def test_mxfp4_pins_fields(self):
        spec = QuantSpec(format="mxfp4", bits=8, symmetric=False, granularity="row", group_size=7)
        assert (spec.bits, spec.symmetric, spec.granularity, spec.group_size) == (4, True, "group", 32)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(format="fp8"),
            dict(bits=1),
            dict(bits=17),
            dict(granularity="channel"),
            dict(granularity="group", group_size=0),
            dict(clip=0.0),
            dict(clip=1.5),
            dict(rounding="stochastic"),
            dict(signed_range="half"),
            dict(clip_grid=()),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            QuantSpec(**kwargs)

    @pytest.mark.parametrize(
        "spec, expected",
        [
            (QuantSpec(bits=4), (-7, 7)),
            (QuantSpec(bits=4, signed_range="full"), (-15, 15)),
            (QuantSpec(bits=4, symmetric=False), (0, 15)),
            (QuantSpec(bits=8), (-127, 127)),
        ],
    )
    def test_code_range(self, spec, expected):
        assert spec.code_range == expected

    def test_labels(self):
        assert QuantSpec(bits=4).label == "int4-sym-c"
        assert QuantSpec(bits=4, symmetric=False, granularity="group", group_size=32).label == "int4-asym-g32"
        assert QuantSpec.mxfp4().label == "mxfp4"
        assert QuantSpec.disabled().label == "fp"


class TestComputeParams:
    def test_symmetric_example(self):
        p = q.compute_params([[-1, 0.5, 1]], QuantSpec(bits=4, granularity="tensor"))
        assert p.scales.item() == pytest.approx(1 / 7)

    @pytest.mark.parametrize("symmetric", [True, False])
    def test_degenerate_group(self, symmetric):
        p = q.compute_params([[0.0, 0.0, 0.0]], QuantSpec(bits=4, symmetric=symmetric))
        assert p.scales.item() == 1.0
        if not symmetric:
            assert p.zero_points.item() == 0.0

    def test_asymmetric_example(self):
        p = q.compute_params([[0.0, 3.0]], QuantSpec(bits=4, symmetric=False, granularity="tensor"))
        assert p.scales.item() == pytest.approx(0.2)
        assert p.zero_points.item() == 0

    def test_granularity_shapes(self):
        x = np.random.default_rng(0).normal(size=(3, 70))
        assert q.compute_params(x, QuantSpec(granularity="tensor")).scales.shape == (1, 1)
        assert q.compute_params(x, QuantSpec(granularity="row")).scales.shape == (3, 1)
        assert q.compute_params(x, QuantSpec(granularity="group", group_size=32)).scales.shape == (3, 3)

    def test_trailing_group_uses_own_values(self):
        x = np.concatenate([np.full(4, 10.0), [0.7, -0.35]])[None, :]
        p = q.compute_params(x, QuantSpec(bits=4, granularity="group", group_size=4))
        np.testing.assert_allclose(p.scales, [[10 / 7, 0.7 / 7]])

    def test_empty(self):
        with pytest.raises(ValidationError):
            q.compute_params(np.zeros((0, 3)), QuantSpec())


class TestRoundTrip:
    def test_hand_example_against_scalar_oracle(self):
        spec = QuantSpec(bits=4, granularity="tensor")
        x = np.array([[-1.0, 0.5, 0.25, 1.0]])
        params = q.QuantParams(np.array([[1 / 7]]))
        codes = q.quantize(x, spec, params).codes
        np.testing.assert_array_equal(codes, [[-7, 4, 2, 7]])
        out = q.quantize_dequantize(x, spec, params)
        np.testing.assert_allclose(out, [[-1, 4 / 7, 2 / 7, 1]], rtol=1e-15)
        oracle = scalar_oracle(x[0], 1 / 7, 0, -7, 7)
        np.testing.assert_array_equal(codes[0], [c for c, _ in oracle])
        np.testing.assert_allclose(out[0], [v for _, v in oracle], rtol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_asymmetric_against_scalar_oracle(self, seed):
        x = np.random.default_rng(seed).normal(1.0, 2.0, size=(1, 50))
        spec = QuantSpec(bits=3, symmetric=False, granularity="tensor")
        p = q.compute_params(x, spec)
        oracle = scalar_oracle(x[0], p.scales.item(), p.zero_points.item(), 0, 7)
        np.testing.assert_allclose(q.quantize_dequantize(x, spec, p)[0], [v for _, v in oracle], rtol=1e-14)

    def test_grid_points_exact(self):
        delta = 0.125
        x = (np.arange(-7, 8) * delta)[None, :]
        spec = QuantSpec(bits=4, granularity="tensor")
        params = q.QuantParams(np.array([[delta]]))
        np.testing.assert_array_equal(q.quantize_dequantize(x, spec, params), x)

    def test_saturation(self):
        spec = QuantSpec(bits=4, granularity="tensor")
        params = q.QuantParams(np.array([[0.1]]))
        np.testing.assert_allclose(q.quantize_dequantize([[5.0, -5.0]], spec, params), [[0.7, -0.7]])

    def test_half_even_rounding(self):
        spec = QuantSpec(bits=4, granularity="tensor", rounding="half_even")
        params = q.QuantParams(np.array([[1.0]]))
        np.testing.assert_array_equal(q.quantize([[0.5, 1.5, 2.5, -0.5]], spec, params).codes, [[0, 2, 2, 0]])
        away = q.quantize([[0.5, 1.5, 2.5, -0.5]], spec.replace(rounding="half_away"), params).codes
        np.testing.assert_array_equal(away, [[1, 2, 3, -1]])

    def test_disabled_is_identity(self):
        x = np.random.default_rng(1).normal(size=(3, 5))
        np.testing.assert_array_equal(q.fake_quantize(x, QuantSpec.disabled()), x)

    def test_sixteen_bit_is_near_lossless(self):
        x = np.random.default_rng(2).normal(size=(8, 64))
        y = q.fake_quantize(x, QuantSpec(bits=16))
        assert np.sum((y - x) ** 2) <= 1e-6 * np.sum(x**2)

    @given(matrices(), st.integers(2, 8), st.booleans(), st.sampled_from(["tensor", "row", "group"]))
    @settings(max_examples=150, deadline=None)
    def test_error_bound(self, x, bits, symmetric, granularity):
        spec = QuantSpec(bits=bits, symmetric=symmetric, granularity=granularity, group_size=8)
        params = q.compute_params(x, spec)
        scales, _ = params.expand(x.shape)
        err = np.abs(q.quantize_dequantize(x, spec, params) - x)
        assert np.all(err <= scales / 2 * (1 + 1e-12) + 1e-300)

    @given(matrices(), st.integers(2, 8), st.booleans())
    @settings(max_examples=100, deadline=None)
    def test_representable_roundtrip(self, x, bits, symmetric):
        spec = QuantSpec(bits=bits, symmetric=symmetric, granularity="row")
        params = q.compute_params(x, spec)
        y = q.quantize_dequantize(x, spec, params)
        np.testing.assert_array_equal(q.quantize_dequantize(y, spec, params), y)

    @given(matrices(min_cols=2), st.integers(2, 8), st.booleans(), st.sampled_from([1, 2, 4, 8]))
    @settings(max_examples=100, deadline=None)
    def test_granularity_refinement(self, x, bits, symmetric, g):
        tensor = q.compute_params(x, QuantSpec(bits=bits, symmetric=symmetric, granularity="tensor"))
        row = q.compute_params(x, QuantSpec(bits=bits, symmetric=symmetric, granularity="row"))
        group = q.compute_params(x, QuantSpec(bits=bits, symmetric=symmetric, granularity="group", group_size=g))
        tol = 1 + 1e-12
        # all-zero groups use the placeholder step 1 and are exact regardless
        live_row = np.any(x != 0, axis=1, keepdims=True)
        assert np.all((row.scales <= tensor.scales * tol) | ~live_row)
        cols = x.shape[1]
        for j in range(group.scales.shape[1]):
            block = x[:, j * g : min(cols, (j + 1) * g)]
            live = np.any(block != 0, axis=1)
            assert np.all((group.scales[:, j] <= row.scales[:, 0] * tol) | ~live)

    @given(matrices(elements=st.floats(1e-3, 1e3)), st.integers(2, 8))
    @settings(max_examples=100, deadline=None)
    def test_asymmetric_step_dominates_on_offset_data(self, x, bits):
        sym = QuantSpec(bits=bits, granularity="row")
        asym = sym.replace(symmetric=False)
        ps, pa = q.compute_params(x, sym), q.compute_params(x, asym)
        assert np.all(pa.scales < ps.scales)
        err_a = np.abs(q.quantize_dequantize(x, asym, pa) - x).max(axis=1)
        assert np.all(err_a <= pa.scales[:, 0] / 2 * (1 + 1e-12))

    @pytest.mark.parametrize("seed", range(20))
    def test_asymmetric_mse_dominates_on_continuous_offset_data(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.1, 1.0, size=(4, 256)) + rng.exponential(size=(4, 256))
        sym = QuantSpec(bits=4, granularity="row")
        asym = sym.replace(symmetric=False)
        assert np.mean((q.fake_quantize(x, asym) - x) ** 2) <= np.mean((q.fake_quantize(x, sym) - x) ** 2)


class TestClipSearch:
    def test_grid_data_prefers_no_clipping(self):
        x = (np.arange(-7, 8) / 7.0)[None, :]
        assert q.clip_search(x, QuantSpec(bits=4, granularity="tensor")) == 1.0

    @pytest.mark.parametrize("bits, expected", [(4, 1.0), (8, 0.99)])
    def test_single_outlier_matches_exhaustive_oracle(self, bits, expected):
        x = np.random.default_rng(0).normal(size=(1, 1000))
        x[0, 17] = 100.0
        spec = QuantSpec(bits=bits, granularity="tensor")
        errors = {
            r: np.sum((q.quantize_dequantize(x, spec, q.compute_params(x, spec, clip=r)) - x) ** 2)
            for r in spec.clip_grid
        }
        best = min(errors.values())
        oracle = max(r for r, e in errors.items() if e == best)
        ratio = q.clip_search(x, spec)
        assert ratio == oracle == expected

    def test_heavy_tail_prefers_clipping(self):
        x = np.random.default_rng(0).standard_t(3, size=(1, 1000))
        assert q.clip_search(x, QuantSpec(bits=4, granularity="tensor")) == 0.64

    def test_singleton_grid(self):
        x = np.random.default_rng(1).normal(size=(2, 20))
        assert q.clip_search(x, QuantSpec(), grid=[1.0]) == 1.0

    def test_search_flag_used_by_fake_quantize(self):
        x = np.random.default_rng(2).standard_t(2, size=(4, 256))
        plain = QuantSpec(bits=4)
        searched = plain.replace(clip_search=True)
        assert np.sum((q.fake_quantize(x, searched) - x) ** 2) <= np.sum((q.fake_quantize(x, plain) - x) ** 2)


class TestMXFP4:
    def test_sixteen_patterns(self):
        values = sorted(q.mxfp4_dequantize(
            q.QuantizedTensor(np.arange(16, dtype=np.uint8)[None, :], q.QuantParams(np.ones((1, 1)), None, 32), QuantSpec.mxfp4())
        )[0].tolist())
        assert values == sorted(PUBLISHED_MX + [0.0])

    def test_value_table_is_published_list(self):
        assert sorted(set(q.E2M1_VALUES.tolist())) == PUBLISHED_MX
        assert q.E2M1_VALUES[0] == 0.0 and q.E2M1_VALUES[8] == 0.0

    @pytest.mark.parametrize(
        "s, e, m, expected", [(0, 0, 1, 0.5), (1, 3, 1, -6.0), (0, 1, 0, 1.0), (0, 2, 1, 3.0), (1, 0, 0, -0.0)]
    )
    def test_field_decoding(self, s, e, m, expected):
        assert q.e2m1_value(s, e, m) == expected

    def test_nearest_code(self):
        qt = q.mxfp4_quantize([[4.9, 6.0]])
        assert qt.params.scales.item() == 1.0
        assert q.mxfp4_dequantize(qt)[0, 0] == 4.0

    @pytest.mark.parametrize("v, expected", [(2.5, 2.0), (3.5, 4.0), (5.0, 4.0), (0.25, 0.0), (0.75, 1.0), (1.25, 1.0), (1.75, 2.0)])
    def test_ties_to_even_mantissa(self, v, expected):
        assert q.E2M1_VALUES[q.mx_codes(v)] == expected
        assert q.E2M1_VALUES[q.mx_codes(-v)] == -expected

    def test_zero_group(self):
        qt = q.mxfp4_quantize(np.zeros((2, 40)))
        assert np.all(qt.codes == 0)
        np.testing.assert_array_equal(qt.params.scales, 1.0)
        np.testing.assert_array_equal(qt.scale_exponents, 0)

    def test_exponent_is_ceil(self):
        # amax 6 -> e = 0; just above 6 -> e = 1; 3 -> e = -1
        for amax, e in [(6.0, 0), (6.0000001, 1), (3.0, -1), (12.0, 1), (0.1, -5)]:
            x = np.zeros((1, 32))
            x[0, 3] = amax
            assert q.mxfp4_quantize(x).scale_exponents.item() == e

    def test_exponent_clamped(self):
        x = np.full((1, 32), 1e-300)
        assert q.mxfp4_quantize(x).scale_exponents.item() == -127

    @pytest.mark.parametrize("k", [-3, 0, 5])
    def test_representable_roundtrip(self, k):
        x = np.array(PUBLISHED_MX * 3, dtype=float)[None, :32] * 2.0**k
        x[0, 0] = 6 * 2.0**k
        np.testing.assert_array_equal(q.mxfp4_dequantize(q.mxfp4_quantize(x)), x)

    @given(matrices(max_cols=100, elements=st.floats(-1e6, 1e6)))
    @settings(max_examples=100, deadline=None)
    def test_error_within_half_gap(self, x):
        qt = q.mxfp4_quantize(x)
        scales, _ = qt.params.expand(x.shape)
        y = q.mxfp4_dequantize(qt)
        a = np.abs(x) / scales
        gaps = np.diff(q.E2M1_MAGNITUDES)
        local = gaps[np.clip(np.searchsorted(q.E2M1_MAGNITUDES, a) - 1, 0, 6)]
        assert np.all(np.abs(y - x) <= local * scales / 2 * (1 + 1e-12))

    @pytest.mark.parametrize("seed", range(5))
    def test_clip_bounds_decoded_magnitude(self, seed):
        x = np.random.default_rng(seed).normal(size=(4, 96))
        qt = q.mxfp4_quantize(x, clip=0.75)
        scales, _ = qt.params.expand(x.shape)
        assert np.all(np.abs(q.mxfp4_dequantize(qt)) <= 6 * scales)

    def test_codes_nonuniform_denser_near_zero(self):
        gaps = np.diff(q.E2M1_MAGNITUDES)
        assert gaps[0] < gaps[-1]
        assert np.all(np.diff(gaps) >= 0)

    def test_invalid_codes(self):
        bad = q.QuantizedTensor(np.array([[16]]), q.QuantParams(np.ones((1, 1)), None, 32), QuantSpec.mxfp4())
        with pytest.raises(ValidationError):
            q.mxfp4_dequantize(bad)

    def test_fake_quantize_uses_mx_grid(self):
        x = np.random.default_rng(3).normal(size=(2, 64))
        y = q.fake_quantize(x, QuantSpec.mxfp4())
        scales, _ = q.compute_params(x, QuantSpec.mxfp4()).expand(x.shape)
        assert set(np.unique(y / scales)).issubset(set(PUBLISHED_MX))


class TestExtraBits:
    @pytest.mark.parametrize("g, expected", [(32, 0.5), (64, 0.25), (128, 0.125), (256, 0.0625), (512, 0.03125)])
    def test_group_sizes_fp16(self, g, expected):
        spec = QuantSpec(granularity="group", group_size=g)
        assert q.extra_bits_overhead(spec, 16) == expected

    def test_e8m0(self):
        assert q.extra_bits_overhead(QuantSpec.mxfp4(), 8) == 0.25
        assert q.extra_bits_overhead(QuantSpec.mxfp4()) == 0.25

    def test_asymmetric_adds_zero_point(self):
        spec = QuantSpec(bits=4, symmetric=False, granularity="group", group_size=32)
        assert q.extra_bits_overhead(spec, 16) == pytest.approx((16 + 4) / 32)

    def test_row_granularity_needs_length(self):
        with pytest.raises(ValidationError):
            q.extra_bits_overhead(QuantSpec(granularity="row"))
        assert q.extra_bits_overhead(QuantSpec(granularity="row"), row_length=128) == 0.125

    def test_disabled(self):
        assert q.extra_bits_overhead(QuantSpec.disabled()) == 0.0
