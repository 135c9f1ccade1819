import colorsys

import numpy as np
import pytest
from helpers import fd_gradcheck
from hypothesis import given, settings
from hypothesis import strategies as st

from midflow import flow as F
from midflow import tensor as T
from midflow.tensor import ShapeError, Tensor


def t32(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=grad)


def make_mask(weights_9: np.ndarray, h: int, w: int, n: int = 1) -> np.ndarray:
    """Tile one 9-vector over every sub-position of every coarse pixel."""
    m = np.zeros((n, F.MASK_CHANNELS, h, w), dtype=np.float32)
    for sub in range(64):
        m[:, sub * 9:(sub + 1) * 9] = weights_9.reshape(1, 9, 1, 1)
    return m


# ------------------------------------------------------------ backward_warp


class TestBackwardWarp:
    def test_zero_flow_is_identity(self, np_rng):
        frame = t32(np_rng.uniform(0, 1, (1, 3, 6, 8)))
        out = F.backward_warp(frame, F.FlowField.zeros(6, 8))
        np.testing.assert_array_equal(out.data, frame.data)

    def test_unit_shift_matches_index_oracle(self, np_rng):
        img = np_rng.uniform(0, 1, (1, 3, 4, 6)).astype(np.float32)
        out = F.backward_warp(t32(img), F.FlowField.constant(4, 6, 1.0, 0.0)).data
        # column j samples column j+1; last column clamps to the border
        np.testing.assert_allclose(out[..., :-1], img[..., 1:], atol=1e-6)
        np.testing.assert_allclose(out[..., -1], img[..., -1], atol=1e-6)

    def test_half_pixel_shift_averages(self):
        row = np.arange(0, 8, 2, dtype=np.float32).reshape(1, 1, 1, 4)
        out = F.backward_warp(t32(row), F.FlowField.constant(1, 4, 0.5, 0.0))
        assert out.data[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_extent_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="mismatch"):
            F.backward_warp(t32(np.zeros((1, 3, 4, 4))), F.FlowField.zeros(5, 4))

    def test_gradients(self, np_rng):
        frame = t32(np_rng.uniform(0, 1, (1, 2, 5, 5)), grad=True)
        flw = t32(np_rng.uniform(-1.2, 1.2, (1, 2, 5, 5)), grad=True)
        fd_gradcheck(lambda: F.backward_warp(frame, flw), [frame, flw])


# ---------------------------------------------------------- convex_upsample


def _upsample_reference(coarse: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Direct-loop oracle: clamped 3x3 neighborhood, weighted sum, x8 units."""
    n, c, h, w = coarse.shape
    out = np.zeros((n, c, h * 8, w * 8))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for dy in range(8):
                    for dx in range(8):
                        wvec = mask[b, (dy * 8 + dx) * 9:(dy * 8 + dx + 1) * 9, i, j]
                        acc = np.zeros(c)
                        for k in range(9):
                            di, dj = divmod(k, 3)
                            ii = min(max(i + di - 1, 0), h - 1)
                            jj = min(max(j + dj - 1, 0), w - 1)
                            acc += wvec[k] * 8.0 * coarse[b, :, ii, jj]
                        out[b, :, i * 8 + dy, j * 8 + dx] = acc
    return out


class TestConvexUpsample:
    def test_constant_flow_preserved_with_unit_rescale(self, np_rng):
        coarse = np.zeros((1, 4, 3, 3), dtype=np.float32)
        coarse[:, 0] = 2.0
        coarse[:, 1] = -1.0
        coarse[:, 2] = 2.0
        coarse[:, 3] = -1.0
        logits = np_rng.normal(0, 1, (1, F.MASK_CHANNELS, 3, 3)).astype(np.float32)
        weights = _softmax_mask(logits)
        out = F.convex_upsample(t32(coarse), t32(weights)).data
        np.testing.assert_allclose(out[:, 0], 16.0, atol=1e-4)
        np.testing.assert_allclose(out[:, 1], -8.0, atol=1e-4)

    def test_one_hot_center_mask_replicates(self, np_rng):
        coarse = np_rng.uniform(-3, 3, (1, 4, 2, 3)).astype(np.float32)
        one_hot = np.zeros(9, dtype=np.float32)
        one_hot[4] = 1.0
        out = F.convex_upsample(t32(coarse), t32(make_mask(one_hot, 2, 3))).data
        expected = 8.0 * np.repeat(np.repeat(coarse, 8, axis=2), 8, axis=3)
        np.testing.assert_array_equal(out, expected)

    def test_uniform_mask_matches_loop_oracle(self, np_rng):
        coarse = np_rng.uniform(-2, 2, (1, 4, 3, 3)).astype(np.float32)
        mask = make_mask(np.full(9, 1.0 / 9.0, dtype=np.float32), 3, 3)
        out = F.convex_upsample(t32(coarse), t32(mask)).data
        np.testing.assert_allclose(out, _upsample_reference(coarse, mask), atol=1e-4)

    def test_random_mask_matches_loop_oracle(self, np_rng):
        coarse = np_rng.uniform(-2, 2, (2, 4, 2, 2)).astype(np.float32)
        mask = _softmax_mask(np_rng.normal(0, 1, (2, F.MASK_CHANNELS, 2, 2)).astype(np.float32))
        out = F.convex_upsample(t32(coarse), t32(mask)).data
        np.testing.assert_allclose(out, _upsample_reference(coarse, mask), atol=1e-4)

    def test_linearity_in_coarse_flow(self, np_rng):
        f1 = np_rng.uniform(-2, 2, (1, 4, 3, 3)).astype(np.float32)
        f2 = np_rng.uniform(-2, 2, (1, 4, 3, 3)).astype(np.float32)
        mask = t32(_softmax_mask(np_rng.normal(0, 1, (1, F.MASK_CHANNELS, 3, 3)).astype(np.float32)))
        a, b = 0.7, -1.3
        lhs = F.convex_upsample(t32(a * f1 + b * f2), mask).data
        rhs = a * F.convex_upsample(t32(f1), mask).data + b * F.convex_upsample(t32(f2), mask).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_direction_swap_is_bit_exact(self, np_rng):
        coarse = np_rng.uniform(-2, 2, (1, 4, 3, 3)).astype(np.float32)
        mask = t32(_softmax_mask(np_rng.normal(0, 1, (1, F.MASK_CHANNELS, 3, 3)).astype(np.float32)))
        swapped = coarse[:, [2, 3, 0, 1]]
        out = F.convex_upsample(t32(coarse), mask).data
        out_swapped = F.convex_upsample(t32(swapped), mask).data
        np.testing.assert_array_equal(out, out_swapped[:, [2, 3, 0, 1]])

    def test_extent_mismatch_rejected(self, np_rng):
        coarse = t32(np.zeros((1, 4, 3, 3)))
        with pytest.raises(ShapeError, match="weights"):
            F.convex_upsample(coarse, t32(np.zeros((1, F.MASK_CHANNELS, 2, 3))))
        with pytest.raises(ShapeError, match="weights"):
            F.convex_upsample(coarse, t32(np.zeros((1, 100, 3, 3))))

    def test_gradients(self, np_rng):
        coarse = t32(np_rng.uniform(-1, 1, (1, 4, 2, 2)), grad=True)
        weights = t32(_softmax_mask(np_rng.normal(0, 1, (1, F.MASK_CHANNELS, 2, 2)).astype(np.float32)),
                      grad=True)
        fd_gradcheck(lambda: F.convex_upsample(coarse, weights), [coarse, weights],
                     coords_per_tensor=12)


def _softmax_mask(logits: np.ndarray) -> np.ndarray:
    n, _, h, w = logits.shape
    r = logits.reshape(n, 64, 9, h, w)
    e = np.exp(r - r.max(axis=2, keepdims=True))
    return (e / e.sum(axis=2, keepdims=True)).reshape(n, F.MASK_CHANNELS, h, w).astype(np.float32)


# -------------------------------------------------------------- resize_flow


class TestResizeFlow:
    def test_scale_one_is_identity(self, np_rng):
        f = F.FlowField(np_rng.uniform(-4, 4, (6, 6, 2)).astype(np.float32))
        out = F.resize_flow(f, 1)
        assert out == f

    def test_constant_flow_rescales_units(self):
        f = F.FlowField.constant(8, 8, 4.0, 4.0)
        out = F.resize_flow(f, 0.5)
        assert out.height == 4 and out.width == 4
        np.testing.assert_allclose(out.data, 2.0, atol=1e-5)

    def test_matches_resample_then_scale_oracle(self, np_rng):
        data = np_rng.uniform(-5, 5, (1, 2, 8, 8)).astype(np.float32)
        out = F.resize_flow(t32(data), 0.5).data
        ref = T.resize(t32(data), 0.5, "bilinear").data * 0.5
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_anisotropic_scale(self):
        f = F.FlowField.constant(4, 8, 2.0, 2.0)
        out = F.resize_flow(f, (0.5, 1.0))  # halve width only
        assert (out.height, out.width) == (4, 4)
        np.testing.assert_allclose(out.data[..., 0], 1.0, atol=1e-6)
        np.testing.assert_allclose(out.data[..., 1], 2.0, atol=1e-6)

    def test_non_integral_rejected(self):
        with pytest.raises(ShapeError, match="non-integral"):
            F.resize_flow(F.FlowField.zeros(5, 5), 0.5)


# ------------------------------------------------- normalize / denormalize


class TestFlowNormalization:
    def test_128_maps_to_one(self):
        f = F.FlowField.constant(2, 2, 128.0, -128.0)
        out = F.normalize_flow(f)
        np.testing.assert_array_equal(out.data[..., 0], 1.0)
        np.testing.assert_array_equal(out.data[..., 1], -1.0)

    def test_zero_maps_to_zero(self):
        out = F.normalize_flow(F.FlowField.zeros(3, 3))
        np.testing.assert_array_equal(out.data, 0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_bit_exact(self, seed):
        data = np.random.default_rng(seed).uniform(-100, 100, (4, 4, 2)).astype(np.float32)
        f = F.FlowField(data)
        back = F.denormalize_flow(F.normalize_flow(f))
        np.testing.assert_array_equal(back.data, data)
        fwd = F.normalize_flow(F.denormalize_flow(f))
        np.testing.assert_array_equal(fwd.data, data)


# ------------------------------------------------------------ flow_to_color


class TestFlowToColor:
    def test_zero_flow_is_white(self):
        img = F.flow_to_color(F.FlowField.zeros(4, 4))
        np.testing.assert_array_equal(img, 255)

    def test_positive_u_axis_is_zero_degree_color(self):
        f = F.FlowField.constant(2, 2, 3.0, 0.0)
        img = F.flow_to_color(f, max_mag=3.0)
        np.testing.assert_array_equal(img[0, 0], [255, 0, 0])

    def test_hue_matches_atan2(self, np_rng):
        data = np_rng.uniform(-5, 5, (5, 5, 2)).astype(np.float32)
        img = F.flow_to_color(F.FlowField(data)).astype(np.float64) / 255.0
        for i in range(5):
            for j in range(5):
                u, v = data[i, j]
                if np.hypot(u, v) < 0.5:
                    continue  # hue ill-defined near the wheel center
                h, s, _ = colorsys.rgb_to_hsv(*img[i, j])
                expected = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
                diff = abs(h - expected) % 1.0
                assert min(diff, 1.0 - diff) < 1.0 / 360.0


# ------------------------------------------------------------------ .flo io


class TestFloFiles:
    def test_single_pixel_round_trip(self, tmp_path):
        f = F.FlowField(np.array([[[1.5, -2.5]]], dtype=np.float32))
        path = tmp_path / "one.flo"
        F.write_flo(path, f)
        raw = path.read_bytes()
        assert len(raw) == 12 + 8
        assert F.read_flo(path) == f

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.flo"
        import struct
        path.write_bytes(struct.pack("<fii", 0.0, 1, 1) + b"\x00" * 8)
        with pytest.raises(ValueError, match="magic"):
            F.read_flo(path)

    def test_truncation_rejected(self, tmp_path):
        f = F.FlowField(np.zeros((2, 3, 2), dtype=np.float32))
        path = tmp_path / "trunc.flo"
        F.write_flo(path, f)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError, match="truncated"):
            F.read_flo(path)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_size_arithmetic_and_round_trip(self, seed):
        import os
        import tempfile
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        f = F.FlowField(rng.uniform(-50, 50, (h, w, 2)).astype(np.float32))
        fd, path = tempfile.mkstemp(suffix=".flo")
        os.close(fd)
        try:
            F.write_flo(path, f)
            assert os.path.getsize(path) == 12 + h * w * 2 * 4
            assert F.read_flo(path) == f
        finally:
            os.unlink(path)
