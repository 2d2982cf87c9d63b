import numpy as np
import pytest

from collagefix.core import (AffineTransform2D, BinaryMask, CorrespondenceMap,
                             DepthMap, EditPackage, EditProvenance, FlowField,
                             RasterImage, SegmentMap, bilinear_sample,
                             from_diffusion_space, to_diffusion_space)


class TestBilinearSample:
    def test_constant_field(self):
        img = RasterImage.full(5, 7, 0.5)
        for x, y in [(0.0, 0.0), (3.3, 1.7), (6.0, 4.0), (2.5, 2.5)]:
            assert bilinear_sample(img, x, y) == pytest.approx([0.5] * 3)

    def test_midpoint_of_two_pixels(self):
        img = RasterImage(np.array([[[0.0], [1.0]]]))
        assert bilinear_sample(img, 0.5, 0.0)[0] == pytest.approx(0.5)

    def test_hand_evaluated_2x2(self):
        img = RasterImage(np.array([[[0.0], [1.0]], [[2.0], [3.0]]]))
        # top edge: 0.25, bottom edge: 2.25, blend at fy=0.75 -> 1.75
        assert bilinear_sample(img, 0.25, 0.75)[0] == pytest.approx(1.75)

    def test_integer_coordinates_exact(self):
        rng = np.random.default_rng(0)
        img = RasterImage(rng.random((6, 5, 3), dtype=np.float32))
        for y in range(6):
            for x in range(5):
                assert np.array_equal(bilinear_sample(img, float(x), float(y)),
                                      img.data[y, x])

    def test_out_of_bounds_clamps(self):
        img = RasterImage(np.arange(12, dtype=np.float32).reshape(3, 4, 1) / 12)
        assert bilinear_sample(img, -5.0, -5.0)[0] == img.data[0, 0, 0]
        assert bilinear_sample(img, 99.0, 99.0)[0] == img.data[2, 3, 0]


class TestDiffusionSpace:
    def test_midpoint(self):
        img = RasterImage.full(2, 2, 0.5)
        assert np.allclose(to_diffusion_space(img).data, 0.0)

    def test_endpoint(self):
        img = RasterImage.full(2, 2, 0.0)
        assert np.allclose(to_diffusion_space(img).data, -1.0)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            img = RasterImage(rng.random((9, 11, 3), dtype=np.float32))
            back = from_diffusion_space(to_diffusion_space(img))
            assert np.abs(back.data - img.data).max() < 1e-7

    def test_from_space_clamps(self):
        img = RasterImage(np.array([[[1.5], [-2.0]]], dtype=np.float32))
        out = from_diffusion_space(img)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestContainers:
    def test_raster_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            RasterImage(np.zeros((4,)))
        with pytest.raises(ValueError):
            RasterImage(np.zeros((2, 2, 5)))
        with pytest.raises(ValueError):
            RasterImage(np.zeros((0, 3, 3)))

    def test_raster_immutable(self):
        img = RasterImage.full(2, 2, 0.1)
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 9.0

    def test_flow_rejects_nonfinite(self):
        bad = np.zeros((2, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            FlowField(bad)
        bad[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            FlowField(bad)

    def test_mask_rejects_non_binary(self):
        with pytest.raises(ValueError):
            BinaryMask(np.array([[0, 2]]))

    def test_segment_map_contiguity(self):
        SegmentMap(np.array([[0, 1], [2, 1]]))
        SegmentMap(np.array([[1, 1], [2, 2]]))  # background may be absent
        with pytest.raises(ValueError, match="contiguous"):
            SegmentMap(np.array([[0, 1], [3, 1]]))
        with pytest.raises(ValueError):
            SegmentMap(np.array([[0, -1], [1, 1]]))

    def test_depth_positive(self):
        with pytest.raises(ValueError):
            DepthMap(np.zeros((2, 2)))
        DepthMap(np.full((2, 2), 0.25))

    def test_correspondence_nan_pairs(self):
        src = np.zeros((2, 2, 2), dtype=np.float32)
        src[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            CorrespondenceMap(src)
        src[0, 0, 1] = np.nan
        CorrespondenceMap(src)

    def test_edit_package_dimension_check(self):
        ref = RasterImage.full(4, 4, 0.5)
        with pytest.raises(ValueError):
            EditPackage(reference=ref, coarse=RasterImage.full(4, 5, 0.5),
                        mask=BinaryMask.zeros(4, 4),
                        correspondence=CorrespondenceMap.identity(4, 4),
                        provenance=EditProvenance.USER_COLLAGE)

    def test_edit_package_identity_validates(self):
        ref = RasterImage(np.random.default_rng(1).random((4, 4, 3), dtype=np.float32))
        pkg = EditPackage(reference=ref, coarse=ref, mask=BinaryMask.zeros(4, 4),
                          correspondence=CorrespondenceMap.identity(4, 4),
                          provenance=EditProvenance.USER_COLLAGE)
        pkg.validate(1e-6)


class TestAffineTransform:
    def test_identity(self):
        t = AffineTransform2D.identity()
        assert t.to_dict() == {"a11": 1.0, "a12": 0.0, "a21": 0.0, "a22": 1.0,
                               "tx": 0.0, "ty": 0.0}
        pts = np.array([[1.0, 2.0], [3.0, -4.0]])
        assert np.allclose(t.apply(pts), pts)

    def test_inverse_round_trip(self):
        t = AffineTransform2D.similarity(1.5, 0.7, tx=3.0, ty=-2.0)
        pts = np.random.default_rng(2).normal(size=(10, 2))
        assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)

    def test_singular_inverse_raises(self):
        with pytest.raises(ValueError):
            AffineTransform2D(1.0, 2.0, 2.0, 4.0, 0.0, 0.0).inverse()

    def test_compose(self):
        a = AffineTransform2D.translation(1.0, 2.0)
        b = AffineTransform2D.similarity(2.0, 0.0)
        pts = np.array([[1.0, 1.0]])
        assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)))

    def test_similarity_mirror_det(self):
        assert AffineTransform2D.similarity(1.0, 0.3).determinant == pytest.approx(1.0)
        assert AffineTransform2D.similarity(1.0, 0.3, mirror=True).determinant == \
            pytest.approx(-1.0)

    def test_about_fixes_anchor(self):
        t = AffineTransform2D.similarity(2.0, 0.5).about(3.0, 4.0)
        assert np.allclose(t.apply(np.array([3.0, 4.0])), [3.0, 4.0])

    def test_dict_round_trip(self):
        t = AffineTransform2D(1.1, -0.2, 0.3, 0.9, 5.0, -7.0)
        assert AffineTransform2D.from_dict(t.to_dict()) == t
