import numpy as np
import pytest
from helpers import fd_gradcheck

from midflow import synthesis as S
from midflow import tensor as T
from midflow.flow import backward_warp
from midflow.rng import Rng
from midflow.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def g():
    return S.SynthUNet(Rng(21), base_channels=16, norm_groups=4)


def frames(np_rng, n=1, size=32, lo=0.0, hi=1.0):
    a = Tensor(np_rng.uniform(lo, hi, (n, 3, size, size)).astype(np.float32))
    b = Tensor(np_rng.uniform(lo, hi, (n, 3, size, size)).astype(np.float32))
    return a, b


def flows(np_rng, n=1, size=32, mag=2.0):
    return Tensor(np_rng.uniform(-mag, mag, (n, 4, size, size)).astype(np.float32))


def force_head(g, mask_bias, zero_residual=True):
    """Overwrite the output head so mask logits and residual are constants."""
    g.head.weight.data = np.zeros_like(g.head.weight.data)
    b = g.head.bias.data
    b[:] = 0.0
    b[0] = mask_bias
    if not zero_residual:
        raise NotImplementedError


class TestSynthModule:
    def test_output_shapes(self, g, np_rng):
        f0, f1 = frames(np_rng)
        fl = flows(np_rng)
        mask, resid = g(f0, f0, f1, T.narrow(fl, 1, 0, 2), T.narrow(fl, 1, 2, 2))
        assert mask.shape == (1, 1, 32, 32)
        assert resid.shape == (1, 3, 32, 32)
        assert (mask.data >= 0).all() and (mask.data <= 1).all()

    def test_deterministic(self, g, np_rng):
        f0, f1 = frames(np_rng)
        fl = flows(np_rng)
        args = (f0, f0, f1, T.narrow(fl, 1, 0, 2), T.narrow(fl, 1, 2, 2))
        m1, r1 = g(*args)
        m2, r2 = g(*args)
        np.testing.assert_array_equal(m1.data, m2.data)
        np.testing.assert_array_equal(r1.data, r2.data)

    def test_extent_mismatch_rejected(self, g):
        a = Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32))
        b = Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32))
        f = Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32))
        with pytest.raises(ShapeError, match="spatially"):
            g(a, b, a, f, f)

    def test_gradients(self, np_rng):
        tiny = S.SynthUNet(Rng(2), base_channels=8, norm_groups=4)
        prev, w0 = frames(np_rng, size=8)
        w1, _ = frames(np_rng, size=8)
        f0 = Tensor(np_rng.uniform(-1, 1, (1, 2, 8, 8)).astype(np.float32), requires_grad=True)
        f1 = Tensor(np_rng.uniform(-1, 1, (1, 2, 8, 8)).astype(np.float32))
        w0.requires_grad = True
        fd_gradcheck(lambda: T.concat(list(tiny(prev, w0, w1, f0, f1)), axis=1),
                     [w0, f0], h=1e-2, coords_per_tensor=6)


class TestSynthesizeLevel:
    def test_degenerate_motion_returns_input(self, np_rng):
        g = S.SynthUNet(Rng(3), base_channels=16, norm_groups=4)
        force_head(g, mask_bias=0.0)  # residual = 0, mask = 0.5
        img, _ = frames(np_rng)
        zero = Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32))
        out = S.synthesize_level(g, None, img, img, zero)
        np.testing.assert_allclose(out.data, img.data, atol=1e-6)

    def test_mask_one_returns_warped_frame0(self, np_rng):
        g = S.SynthUNet(Rng(3), base_channels=16, norm_groups=4)
        force_head(g, mask_bias=1000.0)  # sigmoid saturates to exactly 1.0
        f0, f1 = frames(np_rng)
        fl = flows(np_rng)
        out = S.synthesize_level(g, None, f0, f1, fl)
        ref = backward_warp(f0, T.narrow(fl, 1, 0, 2))
        np.testing.assert_array_equal(out.data, ref.data)

    def test_half_mask_zero_flow_averages_frames(self, np_rng):
        g = S.SynthUNet(Rng(3), base_channels=16, norm_groups=4)
        force_head(g, mask_bias=0.0)
        f0, f1 = frames(np_rng)
        zero = Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32))
        out = S.synthesize_level(g, None, f0, f1, zero)
        np.testing.assert_allclose(out.data, 0.5 * (f0.data + f1.data), atol=1e-6)

    def test_blend_identity_for_any_mask(self, g, np_rng):
        # residual forced to zero; identical warped inputs make the output
        # independent of the (network-produced) mask
        gz = S.SynthUNet(Rng(9), base_channels=16, norm_groups=4)
        gz.head.weight.data[1:] = 0.0
        gz.head.bias.data[1:] = 0.0
        img, _ = frames(np_rng)
        zero = Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32))
        out = S.synthesize_level(gz, None, img, img, zero)
        np.testing.assert_allclose(out.data, img.data, atol=1e-6)


class TestPyramid:
    def test_single_level_equals_one_call(self, g, np_rng):
        f0, f1 = frames(np_rng, size=16)
        fl = flows(np_rng, size=16, mag=1.0)
        ref = T.clamp(S.synthesize_level(g, None, f0, f1, fl), 0.0, 1.0)
        out = S.pyramid_synthesize(g, f0, f1, fl, levels=1)
        np.testing.assert_array_equal(out.data, ref.data)

    @pytest.mark.parametrize("levels", [1, 2, 3])
    def test_output_extents_match_input(self, g, np_rng, levels):
        f0, f1 = frames(np_rng, size=64)
        fl = flows(np_rng, size=64)
        out = S.pyramid_synthesize(g, f0, f1, fl, levels=levels)
        assert out.shape == (1, 3, 64, 64)
        assert (out.data >= 0).all() and (out.data <= 1).all()

    def test_inference_level_rule(self):
        assert S.inference_levels(256, 256) == 3  # ceil(log2(256/32))
        assert S.inference_levels(64, 64) == 1
        assert S.inference_levels(33, 512) == 1  # R = min(H, W), floored at 1
        assert S.inference_levels(512, 512) == 4

    def test_too_many_levels_reports_feasible_max(self, g, np_rng):
        f0, f1 = frames(np_rng, size=16)
        fl = flows(np_rng, size=16)
        with pytest.raises(ShapeError, match="at most 2"):
            S.pyramid_synthesize(g, f0, f1, fl, levels=3)

    def test_indivisible_extents_rejected(self, g, np_rng):
        # 40x40 is deep enough for 3 levels but not divisible by 16
        f0 = Tensor(np_rng.uniform(0, 1, (1, 3, 40, 40)).astype(np.float32))
        fl = Tensor(np.zeros((1, 4, 40, 40), dtype=np.float32))
        with pytest.raises(ShapeError, match="divisible"):
            S.pyramid_synthesize(g, f0, f0, fl, levels=3)

    def test_shared_parameters_receive_multi_level_gradients(self, np_rng):
        g = S.SynthUNet(Rng(4), base_channels=8, norm_groups=4)
        f0, f1 = frames(np_rng, size=32)
        fl = flows(np_rng, size=32, mag=1.0)
        out = S.pyramid_synthesize(g, f0, f1, fl, levels=2, clamp=False)
        out.mean().backward()
        grads = [p.grad for p in g.parameters()]
        assert all(gr is not None for gr in grads)

    def test_end_to_end_gradient_wrt_flows(self, np_rng):
        g = S.SynthUNet(Rng(4), base_channels=8, norm_groups=4)
        f0 = Tensor(np_rng.uniform(0.2, 0.8, (1, 3, 16, 16)).astype(np.float32))
        f1 = Tensor(np_rng.uniform(0.2, 0.8, (1, 3, 16, 16)).astype(np.float32))
        fl = Tensor(np_rng.uniform(-1, 1, (1, 4, 16, 16)).astype(np.float32),
                    requires_grad=True)
        # clamp disabled: its kink would poison finite differences at the
        # [0,1] boundary; h=1e-2 for composition-level float32 noise
        fd_gradcheck(lambda: S.pyramid_synthesize(g, f0, f1, fl, levels=2, clamp=False),
                     [fl], h=1e-2, coords_per_tensor=8)

    def test_mask_stays_in_range_across_levels(self, g, np_rng):
        f0, f1 = frames(np_rng, size=64)
        fl = flows(np_rng, size=64, mag=4.0)
        out = S.pyramid_synthesize(g, f0, f1, fl, levels=3)
        assert np.isfinite(out.data).all()
