import math

import numpy as np
import pytest

from logkv.quantize import (
    QuantParams,
    append_rows,
    dequantize,
    default_kv_params,
    deserialize_quantized,
    pack_codes,
    quantize,
    quantize_kv,
    serialize_quantized,
    unpack_codes,
)


def scalar_reference_dequant(m, bits, group_size, axis):
    """Independent scalar implementation: explicit per-group loops with the
    same arithmetic contract (float32 scale/zero-point, round half away
    from zero)."""
    rows, cols = m.shape
    out = np.empty_like(m, dtype=np.float32)
    qmax = (1 << bits) - 1

    def encode_group(values):
        mn, mx = min(values), max(values)
        scale = np.float32((float(mx) - float(mn)) / qmax)
        zp = np.float32(mn)
        rebuilt = []
        for x in values:
            if scale == 0:
                code = 0
            else:
                y = (float(x) - float(zp)) / float(scale)
                code = math.floor(abs(y) + 0.5) * (1 if y >= 0 else -1)
                code = min(max(code, 0), qmax)
            rebuilt.append(np.float32(code * float(scale) + float(zp)))
        return rebuilt

    if axis == "per_token":
        for r in range(rows):
            for j in range(0, cols, group_size):
                vals = [m[r, c] for c in range(j, min(j + group_size, cols))]
                for c, x in zip(range(j, j + len(vals)), encode_group(vals)):
                    out[r, c] = x
    else:
        for lo in range(0, rows, group_size):
            hi = min(lo + group_size, rows)
            for c in range(cols):
                vals = [m[r, c] for r in range(lo, hi)]
                for r, x in zip(range(lo, hi), encode_group(vals)):
                    out[r, c] = x
    return out


class TestExamples:
    def test_constant_group_exact(self):
        t = quantize(np.full((1, 4), 5.0, np.float32), QuantParams(2, 4, "per_token"))
        assert t.scales[0] == 0.0
        np.testing.assert_array_equal(dequantize(t), np.full((1, 4), 5.0, np.float32))

    def test_grid_aligned_exact(self):
        m = np.array([[0, 1, 2, 3]], dtype=np.float32)
        t = quantize(m, QuantParams(2, 4, "per_token"))
        assert t.scales[0] == 1.0 and t.zero_points[0] == 0.0
        assert t.packed == bytes([0b11100100])  # codes 0,1,2,3 LSB-first
        np.testing.assert_array_equal(dequantize(t), m)

    def test_round_to_nearest(self):
        m = np.array([[0, 0.4, 2.6, 3]], dtype=np.float32)
        t = quantize(m, QuantParams(2, 4, "per_token"))
        np.testing.assert_array_equal(dequantize(t), [[0, 0, 3, 3]])

    def test_all_zero_exact(self):
        m = np.zeros((3, 8), dtype=np.float32)
        for axis in ("per_token", "per_channel"):
            t = quantize(m, QuantParams(2, 4, axis))
            np.testing.assert_array_equal(dequantize(t), m)

    def test_group_counts(self):
        rng = np.random.default_rng(0)
        keys = rng.normal(size=(64, 8)).astype(np.float32)
        t = quantize(keys, QuantParams(2, 64, "per_channel"))
        assert t.n_groups == 8  # one per channel
        vals = rng.normal(size=(1, 128)).astype(np.float32)
        t = quantize(vals, QuantParams(2, 64, "per_token"))
        assert t.n_groups == 2

    def test_empty_input(self):
        t = quantize(np.zeros((0, 8), np.float32), QuantParams(2, 64, "per_channel"))
        assert t.n_groups == 0 and t.packed == b""
        assert dequantize(t).shape == (0, 8)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(123)
        m = rng.normal(size=(8, 64)).astype(np.float32)
        t = quantize(m, QuantParams(4, 64, "per_token"))
        ref = scalar_reference_dequant(m, 4, 64, "per_token")
        np.testing.assert_array_equal(dequantize(t), ref)

    def test_matches_scalar_reference_per_channel(self):
        rng = np.random.default_rng(321)
        m = rng.normal(size=(21, 6)).astype(np.float32)
        t = quantize(m, QuantParams(2, 8, "per_channel"))
        ref = scalar_reference_dequant(m, 2, 8, "per_channel")
        np.testing.assert_array_equal(dequantize(t), ref)


class TestProperties:
    @pytest.mark.parametrize("bits", [2, 4])
    @pytest.mark.parametrize("axis", ["per_channel", "per_token"])
    @pytest.mark.parametrize("group_size", [8, 64])
    def test_round_trip_bound(self, bits, axis, group_size):
        rng = np.random.default_rng(bits * 100 + group_size)
        for _ in range(40):
            rows = int(rng.integers(1, 20))
            cols = int(rng.integers(1, 30))
            m = (rng.normal(size=(rows, cols)) * rng.uniform(0.1, 10)).astype(np.float32)
            t = quantize(m, QuantParams(bits, group_size, axis))
            deq = dequantize(t)
            for r in range(rows):
                for c in range(cols):
                    scale = t.scales[t.group_map(r, c)]
                    # 1e-6 slack covers the final float32 cast only
                    assert abs(float(m[r, c]) - float(deq[r, c])) <= scale / 2 + 1e-6

    def test_fidelity_monotone_in_bits(self):
        rng = np.random.default_rng(5)
        for axis in ("per_channel", "per_token"):
            m = rng.normal(size=(32, 32)).astype(np.float32)
            errs = {}
            for bits in (2, 4):
                t = quantize(m, QuantParams(bits, 8, axis))
                errs[bits] = np.abs(m - dequantize(t)).mean()
            assert errs[4] <= errs[2]

    def test_codes_valid_and_pack_identity(self):
        rng = np.random.default_rng(9)
        for bits in (2, 4):
            codes = rng.integers(0, 1 << bits, size=(13, 17)).astype(np.uint8)
            buf = pack_codes(codes, bits)
            assert len(buf) == 13 * math.ceil(17 * bits / 8)
            back = unpack_codes(buf, 13, 17, bits)
            np.testing.assert_array_equal(back, codes)
            assert back.max() < (1 << bits)

    def test_pack_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            pack_codes(np.array([[4]], dtype=np.uint8), 2)

    def test_determinism(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(10, 24)).astype(np.float32)
        p = QuantParams(2, 8, "per_channel")
        a, b = quantize(m, p), quantize(m, p)
        assert a.packed == b.packed
        np.testing.assert_array_equal(a.scales, b.scales)
        np.testing.assert_array_equal(a.zero_points, b.zero_points)

    def test_passthrough_lossless(self):
        rng = np.random.default_rng(13)
        m = rng.normal(size=(9, 7)).astype(np.float32)
        t = quantize(m, QuantParams(16, 64, "per_token"))
        np.testing.assert_array_equal(dequantize(t), m)
        assert t.n_groups == 0

    def test_non_finite_rejected(self):
        m = np.array([[0.0, np.inf]], dtype=np.float32)
        with pytest.raises(ValueError, match=r"non-finite value at \(0, 1\)"):
            quantize(m, QuantParams(2, 4, "per_token"))

    def test_param_validation(self):
        with pytest.raises(ValueError):
            QuantParams(bits=3)
        with pytest.raises(ValueError):
            QuantParams(bits=2, group_size=0)
        with pytest.raises(ValueError):
            QuantParams(bits=2, axis="per_row")


class TestKV:
    def test_axes(self):
        pk, pv = default_kv_params(2, 64)
        assert pk.axis == "per_channel" and pv.axis == "per_token"

    def test_row_mismatch(self):
        k = np.zeros((3, 4), dtype=np.float32)
        v = np.zeros((2, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="row-count mismatch"):
            quantize_kv(k, v, *default_kv_params(2))

    def test_empty(self):
        k = np.zeros((0, 4), dtype=np.float32)
        qk, qv = quantize_kv(k, k.copy(), *default_kv_params(2))
        assert qk.n_groups == 0 and qv.n_groups == 0

    def test_append_matches_batchwise_quantization(self):
        rng = np.random.default_rng(17)
        m = rng.normal(size=(13, 6)).astype(np.float32)
        p = QuantParams(2, 8, "per_channel")
        t = quantize(m[:5], p)
        t = append_rows(t, m[5:])
        assert t.row_blocks == (5, 8)
        expected = np.vstack([
            dequantize(quantize(m[:5], p)),
            dequantize(quantize(m[5:], p)),
        ])
        np.testing.assert_array_equal(dequantize(t), expected)

    def test_append_subdivides_large_batches(self):
        rng = np.random.default_rng(19)
        m = rng.normal(size=(20, 4)).astype(np.float32)
        p = QuantParams(2, 8, "per_channel")
        t = quantize(m[:3], p)
        t = append_rows(t, m[3:])  # 17 rows -> blocks of 8, 8, 1
        assert t.row_blocks == (3, 8, 8, 1)
        assert all(h <= 8 for h in t.row_blocks)

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(23)
        m = rng.normal(size=(11, 5)).astype(np.float32)
        for bits in (2, 4, 16):
            t = quantize(m, QuantParams(bits, 4, "per_channel"))
            buf = serialize_quantized(t)
            back, consumed = deserialize_quantized(buf)
            assert consumed == len(buf)
            assert back.params == t.params
            assert back.row_blocks == t.row_blocks
            np.testing.assert_array_equal(dequantize(back), dequantize(t))
