import numpy as np
import pytest

from collagefix.core import BinaryMask, FlowField, RasterImage
from collagefix.flow import (COVERAGE_EPS, backward_warp, compose_flows,
                             endpoint_error, flow_reject, softmax_splat,
                             splat_dominant_source)


def ramp_image(h=8, w=8):
    xs = np.tile(np.linspace(0, 1, w, dtype=np.float32), (h, 1))
    return RasterImage(np.repeat(xs[:, :, None], 3, axis=2))


def bump_flow(h, w, seed, amplitude=3.0, n_bumps=3):
    """Smooth random flow: sum of Gaussian bumps, peak magnitude = amplitude."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    data = np.zeros((h, w, 2))
    for _ in range(n_bumps):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        sigma = rng.uniform(0.15, 0.3) * min(h, w)
        g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
        data += g[:, :, None] * rng.uniform(-1, 1, size=2)
    peak = np.hypot(data[..., 0], data[..., 1]).max()
    if peak > 0:
        data *= amplitude / peak
    return FlowField(data.astype(np.float32))


def smooth_image(h, w, seed):
    """Band-limited random image; bilinear resampling is accurate on it."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    data = np.zeros((h, w, 3))
    for _ in range(6):
        fx, fy = rng.uniform(-0.5, 0.5, size=2) / min(h, w) * 2 * np.pi * 3
        phase, amp = rng.uniform(0, 2 * np.pi), rng.uniform(0.05, 0.2)
        data += amp * np.sin(fx * xs + fy * ys + phase)[:, :, None] * rng.uniform(0.3, 1, 3)
    return RasterImage((0.5 + data / max(np.abs(data).max() * 2.2, 1e-9)).astype(np.float32))


class TestBackwardWarp:
    def test_zero_flow_identity_exact(self):
        img = RasterImage(np.random.default_rng(0).random((9, 7, 3), dtype=np.float32))
        out = backward_warp(img, FlowField.zero(9, 7))
        assert np.array_equal(out.data, img.data)

    def test_uniform_shift_on_ramp(self):
        img = ramp_image(6, 8)
        out = backward_warp(img, FlowField.uniform(6, 8, 1.0, 0.0))
        expected = np.concatenate([img.data[:, 1:], img.data[:, -1:]], axis=1)
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_half_pixel_flow(self):
        img = RasterImage(np.array([[[0.0], [1.0]]]))
        out = backward_warp(img, FlowField.uniform(1, 2, 0.5, 0.0))
        assert out.data[0, 0, 0] == pytest.approx(0.5)
        assert out.data[0, 1, 0] == pytest.approx(1.0)  # clamped

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            backward_warp(RasterImage.full(4, 4, 0.5), FlowField.zero(4, 5))


class TestComposeFlows:
    def test_zero_zero(self):
        out = compose_flows([FlowField.zero(5, 5), FlowField.zero(5, 5)])
        assert np.array_equal(out.data, np.zeros((5, 5, 2), dtype=np.float32))

    def test_translation_additivity(self):
        out = compose_flows([FlowField.uniform(6, 6, 1.0, 0.0),
                             FlowField.uniform(6, 6, 0.0, 2.0)])
        assert np.allclose(out.data[..., 0], 1.0)
        assert np.allclose(out.data[..., 1], 2.0)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            compose_flows([])

    def test_matches_sequential_warp_oracle(self):
        h = w = 24
        for seed in range(3):
            img = smooth_image(h, w, seed=100 + seed)
            f01 = bump_flow(h, w, seed=2 * seed + 1)
            f12 = bump_flow(h, w, seed=2 * seed + 2)
            composed = compose_flows([f01, f12])
            direct = backward_warp(img, composed)
            sequential = backward_warp(backward_warp(img, f12), f01)
            interior = np.abs(direct.data - sequential.data)[4:-4, 4:-4]
            assert interior.mean() < 0.02


class TestSoftmaxSplat:
    def test_identity_splat(self):
        img = RasterImage(np.random.default_rng(1).random((7, 6, 3), dtype=np.float32))
        res = softmax_splat(img, FlowField.zero(7, 6), beta=3.0)
        assert np.abs(res.image.data - img.data).max() < 1e-6
        assert res.coverage.bits.sum() == 0

    def test_hand_computed_softmax_blend(self):
        # two sources land on the same integer target; z = (0, ln 3), beta = 1
        img = RasterImage(np.array([[[1.0], [3.0]]], dtype=np.float32))
        flow = FlowField(np.array([[[1.0, 0.0], [0.0, 0.0]]], dtype=np.float32))
        importance = np.array([[0.0, np.log(3.0)]])
        res = softmax_splat(img, flow, importance, beta=1.0)
        assert res.image.data[0, 1, 0] == pytest.approx(2.5, abs=1e-6)
        assert res.coverage.bits[0, 0] == 1  # vacated source pixel

    def test_total_disocclusion(self):
        img = RasterImage.full(5, 5, 0.7)
        res = softmax_splat(img, FlowField.uniform(5, 5, 10.0, 0.0))
        assert res.coverage.bits.all()
        assert np.all(res.image.data == 0.0)

    def test_mass_conservation_beta_zero(self):
        rng = np.random.default_rng(3)
        h = w = 10
        img = RasterImage(rng.random((h, w, 1), dtype=np.float32))
        small = np.clip(bump_flow(h, w, seed=9).data, -0.45, 0.45)
        small[0, :, 1] = np.abs(small[0, :, 1])  # keep splats inside the frame
        small[-1, :, 1] = -np.abs(small[-1, :, 1])
        small[:, 0, 0] = np.abs(small[:, 0, 0])
        small[:, -1, 0] = -np.abs(small[:, -1, 0])
        res = softmax_splat(img, FlowField(small), beta=0.0)
        total_in = img.data.sum()
        total_out = (res.image.data[..., 0] * res.weight).sum()
        assert abs(total_in - total_out) < 1e-4

    def test_importance_shift_invariance(self):
        rng = np.random.default_rng(4)
        img = RasterImage(rng.random((8, 8, 3), dtype=np.float32))
        flow = bump_flow(8, 8, seed=11)
        z = rng.normal(size=(8, 8))
        a = softmax_splat(img, flow, z, beta=5.0)
        b = softmax_splat(img, flow, z + 7.25, beta=5.0)
        assert np.abs(a.image.data - b.image.data).max() < 1e-6
        assert np.array_equal(a.coverage.bits, b.coverage.bits)

    def test_coverage_depends_on_flow_alone(self):
        rng = np.random.default_rng(5)
        flow = bump_flow(8, 8, seed=13, amplitude=4.0)
        img_a = RasterImage(rng.random((8, 8, 3), dtype=np.float32))
        img_b = RasterImage(rng.random((8, 8, 3), dtype=np.float32))
        res_a = softmax_splat(img_a, flow, rng.normal(size=(8, 8)), beta=9.0)
        res_b = softmax_splat(img_b, flow, rng.normal(size=(8, 8)), beta=2.0)
        assert np.array_equal(res_a.coverage.bits, res_b.coverage.bits)
        assert np.array_equal(res_a.weight, res_b.weight)

    def test_weight_invariant(self):
        flow = bump_flow(10, 10, seed=17, amplitude=4.0)
        res = softmax_splat(RasterImage.full(10, 10, 0.5), flow)
        assert np.all(res.weight >= 0)
        assert np.array_equal(res.coverage.as_bool(), res.weight < COVERAGE_EPS)

    def test_rejects_bad_inputs(self):
        img = RasterImage.full(4, 4, 0.5)
        with pytest.raises(ValueError):
            softmax_splat(img, FlowField.zero(4, 5))
        with pytest.raises(ValueError):
            softmax_splat(img, FlowField.zero(4, 4), beta=-1.0)
        with pytest.raises(ValueError):
            softmax_splat(img, FlowField.zero(4, 4), np.full((4, 4), np.nan))

    def test_dominant_source_matches_coverage(self):
        flow = bump_flow(9, 9, seed=21, amplitude=4.0)
        res = softmax_splat(RasterImage.full(9, 9, 0.3), flow)
        source, covered = splat_dominant_source(flow)
        assert np.array_equal(covered, ~res.coverage.as_bool())
        assert np.all(np.isnan(source[~covered][..., 0]))


class TestFlowReject:
    def test_zero_flow_accepts(self):
        assert flow_reject(FlowField.zero(16, 16)) is False

    def test_boundary_inclusive(self):
        data = np.zeros((100, 100, 2), dtype=np.float32)
        flat = data.reshape(-1, 2)
        flat[:1000, 0] = 400.0
        assert flow_reject(FlowField(flat.reshape(100, 100, 2))) is True

    def test_just_under_threshold_accepts(self):
        data = np.zeros((100, 100, 2), dtype=np.float32)
        flat = data.reshape(-1, 2)
        flat[:999, 0] = 400.0
        assert flow_reject(FlowField(flat.reshape(100, 100, 2))) is False

    def test_magnitude_threshold_inclusive(self):
        data = np.zeros((10, 10, 2), dtype=np.float32)
        data[..., 0] = 350.0  # exactly at the magnitude threshold
        assert flow_reject(FlowField(data)) is True


class TestEndpointError:
    def test_identical(self):
        f = bump_flow(6, 6, seed=2)
        assert endpoint_error(f, f) == 0.0

    def test_pythagoras(self):
        f1 = bump_flow(6, 6, seed=3)
        f2 = FlowField(f1.data + np.array([3.0, 4.0], dtype=np.float32))
        assert endpoint_error(f1, f2) == pytest.approx(5.0, abs=1e-6)

    def test_masked_matches_brute_force(self):
        rng = np.random.default_rng(6)
        f1 = FlowField(rng.normal(size=(8, 10, 2)).astype(np.float32))
        f2 = FlowField(rng.normal(size=(8, 10, 2)).astype(np.float32))
        mask = np.zeros((8, 10), dtype=np.uint8)
        mask[:, 5:] = 1  # exclude right half
        got = endpoint_error(f1, f2, BinaryMask(mask))
        acc = [float(np.hypot(*(f1.data[y, x] - f2.data[y, x])))
               for y in range(8) for x in range(5)]
        assert got == pytest.approx(float(np.mean(acc)), abs=1e-6)

    def test_no_valid_pixels_raises(self):
        f = FlowField.zero(3, 3)
        with pytest.raises(ValueError):
            endpoint_error(f, f, np.zeros((3, 3), dtype=bool))
