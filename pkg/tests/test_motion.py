import numpy as np
import pytest

from collagefix.core import (AffineTransform2D, BinaryMask, DepthMap,
                             FlowField, RasterImage, SegmentMap)
from collagefix.flow import COVERAGE_EPS
from collagefix.motion import (DegenerateSegmentError, UserOp, apply_user_edit,
                               fit_segment_transform, flow_edit, inpaint_holes,
                               load_edit_package, piecewise_affine_edit,
                               save_edit_package, segment_fit_residual)
from collagefix.sprites import SpriteWorld


def rng_image(h, w, seed=0):
    return RasterImage(np.random.default_rng(seed).random((h, w, 3), dtype=np.float32))


def affine_flow(h, w, transform: AffineTransform2D) -> FlowField:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs, ys], axis=-1)
    return FlowField(transform.apply(pts) - pts)


def full_mask(h, w):
    return BinaryMask(np.ones((h, w), dtype=np.uint8))


class TestFitSegmentTransform:
    def test_exactly_affine_displacement(self):
        h = w = 12
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        flow = FlowField(np.stack([0.1 * xs + 2.0, -0.05 * ys + 1.0], axis=-1))
        seg = np.zeros((h, w), dtype=np.uint8)
        seg[2:10, 3:11] = 1
        t = fit_segment_transform(flow, BinaryMask(seg), mode="affine")
        assert t.a11 == pytest.approx(1.1, abs=1e-9)
        assert t.a22 == pytest.approx(0.95, abs=1e-9)
        assert abs(t.a12) < 1e-9 and abs(t.a21) < 1e-9
        assert t.tx == pytest.approx(2.0, abs=1e-8)
        assert t.ty == pytest.approx(1.0, abs=1e-8)
        assert segment_fit_residual(flow, BinaryMask(seg), t) < 1e-9

    def test_pure_rotation_similarity(self):
        h = w = 16
        seg = np.zeros((h, w), dtype=np.uint8)
        seg[4:12, 4:12] = 1
        ys, xs = np.nonzero(seg)
        cx, cy = xs.mean(), ys.mean()
        rot = AffineTransform2D.similarity(1.0, np.deg2rad(30)).about(cx, cy)
        flow = affine_flow(h, w, rot)
        t = fit_segment_transform(flow, BinaryMask(seg), mode="similarity")
        scale = np.hypot(t.a11, t.a21)
        angle = np.arctan2(t.a21, t.a11)
        assert scale == pytest.approx(1.0, abs=1e-9)
        assert angle == pytest.approx(np.deg2rad(30), abs=1e-9)
        assert segment_fit_residual(flow, BinaryMask(seg), t) < 1e-9

    def test_mirror_similarity_recovered(self):
        h = w = 16
        seg = np.zeros((h, w), dtype=np.uint8)
        seg[3:13, 2:14] = 1
        mirrored = AffineTransform2D.similarity(1.3, 0.4, tx=2.0, ty=-1.0, mirror=True)
        flow = affine_flow(h, w, mirrored)
        t = fit_segment_transform(flow, BinaryMask(seg), mode="similarity")
        assert t.determinant < 0
        assert segment_fit_residual(flow, BinaryMask(seg), t) < 1e-9

    def test_similarity_agrees_with_affine_on_similarity_flow(self):
        h = w = 14
        seg = np.zeros((h, w), dtype=np.uint8)
        seg[2:12, 2:12] = 1
        sim = AffineTransform2D.similarity(1.2, 0.3, tx=1.5, ty=0.5)
        flow = affine_flow(h, w, sim)
        t_sim = fit_segment_transform(flow, BinaryMask(seg), mode="similarity")
        t_aff = fit_segment_transform(flow, BinaryMask(seg), mode="affine")
        for k in ("a11", "a12", "a21", "a22", "tx", "ty"):
            assert getattr(t_sim, k) == pytest.approx(getattr(t_aff, k), abs=1e-6)

    def test_noise_consistency_monte_carlo(self):
        # exactly-affine flow plus sigma=0.5 px noise on a 40x40 segment:
        # the mean recovered parameters stay within 3 standard errors of truth
        # and the residual RMS matches sigma
        h = w = 40
        sigma = 0.5
        truth = AffineTransform2D(1.05, 0.02, -0.03, 0.97, 3.0, -2.0)
        seg = BinaryMask(np.ones((h, w), dtype=np.uint8))
        base = affine_flow(h, w, truth)
        rng = np.random.default_rng(123)
        params = []
        residuals = []
        for _ in range(100):
            noisy = FlowField(base.data + rng.normal(0, sigma, size=base.data.shape))
            t = fit_segment_transform(noisy, seg, "affine")
            params.append([t.a11, t.a12, t.a21, t.a22, t.tx, t.ty])
            residuals.append(segment_fit_residual(noisy, seg, t))
        params = np.array(params)
        truth_vec = np.array([1.05, 0.02, -0.03, 0.97, 3.0, -2.0])
        stderr_of_mean = params.std(axis=0, ddof=1) / np.sqrt(len(params))
        assert np.all(np.abs(params.mean(axis=0) - truth_vec) <= 3 * stderr_of_mean)
        assert np.mean(residuals) == pytest.approx(sigma, rel=0.1)

    def test_degenerate_raises_with_label(self):
        flow = FlowField.zero(8, 8)
        seg = np.zeros((8, 8), dtype=np.uint8)
        seg[3, 2:6] = 1  # collinear
        with pytest.raises(DegenerateSegmentError) as err:
            fit_segment_transform(flow, BinaryMask(seg), mode="affine", label=4)
        assert err.value.label == 4
        with pytest.raises(DegenerateSegmentError):
            single = np.zeros((8, 8), dtype=np.uint8)
            single[2, 2] = 1
            fit_segment_transform(flow, BinaryMask(single), mode="similarity", label=1)

    def test_residual_zero_iff_realizable(self):
        h = w = 12
        seg = np.zeros((h, w), dtype=np.uint8)
        seg[2:10, 2:10] = 1
        realizable = affine_flow(h, w, AffineTransform2D(1.1, 0.1, 0.0, 0.9, 1.0, 2.0))
        t = fit_segment_transform(realizable, BinaryMask(seg), "affine")
        assert segment_fit_residual(realizable, BinaryMask(seg), t) <= 1e-9
        bent = realizable.data.copy()
        ys, xs = np.mgrid[0:h, 0:w]
        bent[..., 0] += 0.2 * np.sin(xs * 1.3)  # not affine
        t2 = fit_segment_transform(FlowField(bent), BinaryMask(seg), "affine")
        assert segment_fit_residual(FlowField(bent), BinaryMask(seg), t2) > 1e-3


class TestInpaintHoles:
    def test_no_holes_identity(self):
        img = rng_image(6, 6, 1)
        out = inpaint_holes(img, BinaryMask.zeros(6, 6))
        assert np.array_equal(out.data, img.data)

    def test_single_pixel_hole_neighbor_mean(self):
        data = np.zeros((3, 3, 1), dtype=np.float32)
        data[0, 1], data[2, 1], data[1, 0], data[1, 2] = 0.2, 0.4, 0.6, 0.8
        mask = np.zeros((3, 3), dtype=np.uint8)
        mask[1, 1] = 1
        out = inpaint_holes(RasterImage(data), BinaryMask(mask))
        assert out.data[1, 1, 0] == pytest.approx(0.5, abs=1e-6)

    def test_linear_ramp_reproduced(self):
        h = w = 13
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
        ramp = RasterImage(((xs * 0.05 + ys * 0.03) + 0.1)[:, :, None])
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[4:9, 4:9] = 1
        out = inpaint_holes(ramp, BinaryMask(mask))
        assert np.abs(out.data - ramp.data).max() < 1e-3

    def test_valid_pixels_bit_exact(self):
        img = rng_image(10, 10, 2)
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[3:7, 3:7] = 1
        out = inpaint_holes(img, BinaryMask(mask))
        keep = ~mask.astype(bool)
        assert np.array_equal(out.data[keep], img.data[keep])

    def test_all_holes_filled_with_mean(self):
        img = rng_image(5, 5, 3)
        out = inpaint_holes(img, full_mask(5, 5))
        assert np.allclose(out.data, img.data.mean(axis=(0, 1)), atol=1e-6)


class TestFlowEdit:
    def test_zero_flow_identity(self):
        img = rng_image(8, 8, 3)
        pkg = flow_edit(img, FlowField.zero(8, 8))
        assert np.array_equal(pkg.coarse.data, img.data)
        assert pkg.mask.bits.sum() == 0
        ident = np.stack(np.meshgrid(np.arange(8), np.arange(8)), axis=-1)
        assert np.array_equal(pkg.correspondence.source, ident.astype(np.float32))

    def test_uniform_translation_band(self):
        img = rng_image(8, 12, 4)
        pkg = flow_edit(img, FlowField.uniform(8, 12, 8.0, 0.0))
        assert pkg.mask.bits[:, :8].all()
        assert not pkg.mask.bits[:, 8:].any()
        assert np.array_equal(pkg.coarse.data[:, 8:], img.data[:, :4])
        pkg.validate(1e-4)

    def test_sprite_mask_matches_weight_oracle(self):
        world = SpriteWorld(3, n_frames=8, n_sprites=2, height=24, width=24)
        flow = world.flow(0, 4)
        pkg = flow_edit(world.frame(0), flow, world.depth(0))
        # brute-force bilinear mass accumulation, per pixel
        mass = np.zeros((24, 24))
        for y in range(24):
            for x in range(24):
                px, py = x + flow.data[y, x, 0], y + flow.data[y, x, 1]
                x0, y0 = int(np.floor(px)), int(np.floor(py))
                for cx, cy, b in ((x0, y0, (1 - (px - x0)) * (1 - (py - y0))),
                                  (x0 + 1, y0, (px - x0) * (1 - (py - y0))),
                                  (x0, y0 + 1, (1 - (px - x0)) * (py - y0)),
                                  (x0 + 1, y0 + 1, (px - x0) * (py - y0))):
                    if 0 <= cx < 24 and 0 <= cy < 24:
                        mass[cy, cx] += b
        assert np.array_equal(pkg.mask.as_bool(), mass < COVERAGE_EPS)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            flow_edit(rng_image(4, 4), FlowField.zero(4, 5))


class TestPiecewiseAffineEdit:
    @staticmethod
    def single_segment_setup(h=16, w=16):
        img = rng_image(h, w, 5)
        labels = np.zeros((h, w), dtype=np.int32)
        labels[4:12, 4:12] = 1
        depth = DepthMap(np.full((h, w), 3.0, dtype=np.float32))
        return img, SegmentMap(labels), depth

    def test_translation_matches_flow_edit(self):
        img, seg, depth = self.single_segment_setup()
        flow = FlowField.uniform(16, 16, 2.0, 1.0)
        a = flow_edit(img, flow, depth)
        b = piecewise_affine_edit(img, flow, seg, depth)
        both_valid = ~(a.mask.as_bool() | b.mask.as_bool())
        assert np.abs(a.coarse.data - b.coarse.data)[both_valid].max() <= 1e-3
        b.validate(1e-4)

    def test_depth_ordering_on_overlap(self):
        h = w = 20
        img = rng_image(h, w, 6)
        labels = np.zeros((h, w), dtype=np.int32)
        labels[4:9, 2:7] = 1    # will move right
        labels[4:9, 12:17] = 2  # will move left; both land in the middle
        depth_map = np.full((h, w), 8.0, dtype=np.float32)
        depth_map[labels == 1] = 2.0  # front
        depth_map[labels == 2] = 5.0  # back
        flow = np.zeros((h, w, 2), dtype=np.float32)
        flow[labels == 1] = (5.0, 0.0)
        flow[labels == 2] = (-5.0, 0.0)
        pkg = piecewise_affine_edit(img, FlowField(flow), SegmentMap(labels),
                                    DepthMap(depth_map))
        # in the overlap, the nearer segment's content (label 1 shifted by +5) wins
        overlap = np.zeros((h, w), dtype=bool)
        overlap[4:9, 7:12] = True
        expected = img.data[4:9, 2:7]
        assert np.allclose(pkg.coarse.data[4:9, 7:12], expected, atol=1e-4)
        pkg.validate(1e-4)

    def test_segment_leaving_frame_masks_footprint(self):
        img, seg, depth = self.single_segment_setup()
        flow = np.zeros((16, 16, 2), dtype=np.float32)
        flow[seg.labels == 1] = (40.0, 0.0)  # fully out of frame
        pkg = piecewise_affine_edit(img, FlowField(flow), seg, depth)
        assert pkg.mask.as_bool()[seg.labels == 1].all()

    def test_permutation_invariance(self):
        h = w = 20
        img = rng_image(h, w, 7)
        labels = np.zeros((h, w), dtype=np.int32)
        labels[2:8, 2:8] = 1
        labels[10:16, 10:16] = 2
        depth_map = np.full((h, w), 9.0, dtype=np.float32)
        depth_map[labels == 1] = 2.0
        depth_map[labels == 2] = 4.0
        flow = np.zeros((h, w, 2), dtype=np.float32)
        flow[labels == 1] = (3.0, 1.0)
        flow[labels == 2] = (-2.0, 2.0)
        swapped = np.zeros_like(labels)
        swapped[labels == 1] = 2
        swapped[labels == 2] = 1
        a = piecewise_affine_edit(img, FlowField(flow), SegmentMap(labels),
                                  DepthMap(depth_map))
        b = piecewise_affine_edit(img, FlowField(flow), SegmentMap(swapped),
                                  DepthMap(depth_map))
        assert np.array_equal(a.coarse.data, b.coarse.data)
        assert np.array_equal(a.mask.bits, b.mask.bits)

    def test_degenerate_segment_falls_back_to_translation(self):
        h = w = 12
        img = rng_image(h, w, 8)
        labels = np.zeros((h, w), dtype=np.int32)
        labels[5, 3:9] = 1  # collinear pixels: affine fit is degenerate
        depth = DepthMap(np.full((h, w), 2.0, dtype=np.float32))
        flow = np.zeros((h, w, 2), dtype=np.float32)
        flow[labels == 1] = (2.0, 1.0)
        pkg = piecewise_affine_edit(img, FlowField(flow), SegmentMap(labels), depth)
        assert pkg.meta["fallback_segments"] == [1]
        tf = AffineTransform2D.from_dict(pkg.meta["transforms"]["1"])
        assert (tf.tx, tf.ty) == (2.0, 1.0)

    def test_needs_a_segment(self):
        img = rng_image(6, 6)
        with pytest.raises(ValueError):
            piecewise_affine_edit(img, FlowField.zero(6, 6),
                                  SegmentMap(np.zeros((6, 6), dtype=np.int32)),
                                  DepthMap(np.ones((6, 6), dtype=np.float32)))


class TestApplyUserEdit:
    @staticmethod
    def setup_scene(h=16, w=16):
        img = rng_image(h, w, 9)
        labels = np.zeros((h, w), dtype=np.int32)
        labels[3:8, 3:8] = 1
        labels[9:14, 9:14] = 2
        depth_map = np.full((h, w), 7.0, dtype=np.float32)
        depth_map[labels == 1] = 2.0
        depth_map[labels == 2] = 4.0
        return img, SegmentMap(labels), DepthMap(depth_map)

    def test_empty_ops_identity(self):
        img, seg, depth = self.setup_scene()
        pkg = apply_user_edit(img, seg, [], depth)
        assert np.array_equal(pkg.coarse.data, img.data)
        assert pkg.mask.bits.sum() == 0
        pkg.validate(1e-4)

    def test_delete_masks_footprint(self):
        img, seg, depth = self.setup_scene()
        pkg = apply_user_edit(img, seg, [UserOp(label=1, kind="delete")], depth)
        assert np.array_equal(pkg.mask.as_bool(), seg.labels == 1)
        keep = ~pkg.mask.as_bool()
        assert np.array_equal(pkg.coarse.data[keep], img.data[keep])

    def test_duplicate_correspondence_points_to_source(self):
        img, seg, depth = self.setup_scene()
        op = UserOp(label=1, kind="duplicate",
                    transform=AffineTransform2D.translation(8.0, 0.0))
        pkg = apply_user_edit(img, seg, [op], depth)
        assert pkg.meta["new_labels"] == [3]
        src_foot = seg.labels == 1
        # original footprint still maps to itself
        ident = np.stack(np.meshgrid(np.arange(16), np.arange(16)), axis=-1)
        assert np.array_equal(pkg.correspondence.source[src_foot],
                              ident[src_foot].astype(np.float32))
        # the duplicate traces back into the source footprint
        dup_foot = np.roll(src_foot, 8, axis=1)
        corr = pkg.correspondence.source[dup_foot]
        assert np.all(corr[:, 0] >= 2.5) and np.all(corr[:, 0] <= 8.5)
        pkg.validate(1e-4)

    def test_unknown_label_and_singular_transform(self):
        img, seg, depth = self.setup_scene()
        with pytest.raises(ValueError, match="unknown segment label"):
            apply_user_edit(img, seg, [UserOp(label=9, kind="delete")], depth)
        singular = AffineTransform2D(0.0, 0.0, 0.0, 0.0, 1.0, 1.0)
        with pytest.raises(ValueError, match="singular"):
            apply_user_edit(img, seg,
                            [UserOp(label=1, kind="transform", transform=singular)], depth)

    def test_depth_ztest_against_untouched_content(self):
        # moving the far segment (2) onto the near one (1): near content stays
        img, seg, depth = self.setup_scene()
        op = UserOp(label=2, kind="transform",
                    transform=AffineTransform2D.translation(-6.0, -6.0))
        pkg = apply_user_edit(img, seg, [op], depth)
        near = seg.labels == 1
        assert np.array_equal(pkg.coarse.data[near], img.data[near])

    def test_without_depth_ops_go_on_top(self):
        img, seg, _ = self.setup_scene()
        op = UserOp(label=2, kind="transform",
                    transform=AffineTransform2D.translation(-6.0, -6.0))
        pkg = apply_user_edit(img, seg, [op])
        moved = np.roll(seg.labels == 2, (-6, -6), axis=(0, 1))
        inner = moved & (seg.labels == 1)
        assert inner.any()
        assert not np.array_equal(pkg.coarse.data[inner], img.data[inner])


class TestEditPackageSerialization:
    def test_round_trip(self, tmp_path):
        world = SpriteWorld(5, n_frames=6, n_sprites=2, height=24, width=24)
        pkg = flow_edit(world.frame(0), world.flow(0, 3), world.depth(0))
        save_edit_package(pkg, tmp_path / "pkg")
        back = load_edit_package(tmp_path / "pkg")
        assert back.provenance == pkg.provenance
        assert np.array_equal(back.mask.bits, pkg.mask.bits)
        assert np.array_equal(back.correspondence.source.view(np.uint32),
                              pkg.correspondence.source.view(np.uint32))
        assert np.abs(back.coarse.data - pkg.coarse.data).max() <= 1.0 / 65535
        back.validate(1e-4)
