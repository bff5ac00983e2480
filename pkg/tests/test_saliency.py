import math

import numpy as np
import pytest

from helpers import brute_force_saliency
from sparsevid.errors import InputRejected
from sparsevid.saliency import (SpatialParams, fine_grained_saliency, frame_mask,
                                init_spatial_mask)


def video_from_frames(frames):
    return np.asarray(frames, dtype=np.float64)[..., None]


class TestFineGrainedSaliency:
    def test_constant_frame_scores_zero(self):
        v = np.full((2, 8, 8, 3), 0.4)
        smap = fine_grained_saliency(v, SpatialParams())
        np.testing.assert_allclose(smap, 0.0, atol=1e-12)

    def test_single_bright_pixel_is_argmax(self):
        frame = np.zeros((9, 9))
        frame[4, 5] = 1.0
        v = video_from_frames([frame])
        smap = fine_grained_saliency(v, SpatialParams(scales=(1, 2)))
        brute = brute_force_saliency(v, (1, 2))
        np.testing.assert_allclose(smap, brute, atol=1e-12)
        assert np.unravel_index(np.argmax(smap[0]), smap[0].shape) == (4, 5)

    def test_two_halves_score_near_boundary_only(self):
        frame = np.zeros((10, 12))
        frame[:, 6:] = 1.0
        v = video_from_frames([frame])
        scales = (1, 2)
        smap = fine_grained_saliency(v, SpatialParams(scales=scales))
        brute = brute_force_saliency(v, scales)
        np.testing.assert_allclose(smap, brute, atol=1e-12)
        far = np.concatenate([smap[0][:, :6 - max(scales)].ravel(),
                              smap[0][:, 6 + max(scales):].ravel()])
        np.testing.assert_allclose(far, 0.0, atol=1e-12)
        near = smap[0][:, 6 - max(scales):6 + max(scales)]
        assert (near > 0).any()

    def test_matches_brute_force_on_random_video(self):
        rng = np.random.default_rng(3)
        v = rng.random((2, 7, 6, 3))
        smap = fine_grained_saliency(v, SpatialParams(scales=(1, 2)))
        np.testing.assert_allclose(smap, brute_force_saliency(v, (1, 2)), atol=1e-12)

    def test_translation_covariance_in_interior(self):
        rng = np.random.default_rng(5)
        pattern = rng.random((4, 4))
        base = np.full((20, 20), 0.5)
        a = base.copy()
        a[8:12, 4:8] = pattern
        b = base.copy()
        b[8:12, 7:11] = pattern  # shifted 3 columns right
        scales = (1, 2)
        pa = fine_grained_saliency(video_from_frames([a]), SpatialParams(scales=scales))
        pb = fine_grained_saliency(video_from_frames([b]), SpatialParams(scales=scales))
        # Compare windows around each placement, away from edges.
        wa = pa[0][6:14, 2:10]
        wb = pb[0][6:14, 5:13]
        np.testing.assert_allclose(wa, wb, atol=1e-12)

    def test_oversized_scale_rejected(self):
        v = np.zeros((1, 6, 6, 1))
        with pytest.raises(InputRejected):
            fine_grained_saliency(v, SpatialParams(scales=(1, 6)))

    def test_params_validation(self):
        with pytest.raises(InputRejected):
            SpatialParams(phi=0.0)
        with pytest.raises(InputRejected):
            SpatialParams(phi=1.2)
        with pytest.raises(InputRejected):
            SpatialParams(scales=())
        with pytest.raises(InputRejected):
            SpatialParams(scales=(2, 1))


class TestFrameMask:
    def test_phi_one_keeps_everything(self):
        smap = np.zeros((1, 4, 4))
        assert frame_mask(smap, 0, 1.0).all()

    def test_flat_scores_break_ties_in_scan_order(self):
        smap = np.ones((1, 4, 4))
        mask = frame_mask(smap, 0, 0.25)
        expect = np.zeros((4, 4))
        expect.ravel()[:4] = 1.0
        np.testing.assert_array_equal(mask, expect)

    def test_distinct_scores_keep_top_half(self):
        rng = np.random.default_rng(11)
        scores = rng.permutation(16).reshape(1, 4, 4).astype(np.float64)
        mask = frame_mask(scores, 0, 0.5)
        kept = set(np.flatnonzero(mask.ravel()))
        top = set(np.argsort(-scores.ravel())[:8])
        assert kept == top

    def test_exact_count_every_phi(self):
        rng = np.random.default_rng(12)
        smap = rng.random((1, 6, 5))
        for phi in (0.1, 0.3, 0.5, 0.62, 0.99, 1.0):
            mask = frame_mask(smap, 0, phi)
            assert int(mask.sum()) == math.ceil(phi * 30)


class TestInitSpatialMask:
    def test_untargeted_phi_one_is_all_ones(self):
        rng = np.random.default_rng(2)
        x = rng.random((3, 6, 6, 2))
        mask = init_spatial_mask(x, None, SpatialParams(phi=1.0, scales=(1,)))
        assert mask.all()

    def test_identical_pair_matches_untargeted(self):
        rng = np.random.default_rng(4)
        x = rng.random((2, 8, 8, 3))
        p = SpatialParams(phi=0.4, scales=(1, 2))
        solo = init_spatial_mask(x, None, p)
        union = init_spatial_mask(x, x.copy(), p)
        np.testing.assert_array_equal(solo, union)

    def test_union_is_superset_and_bounded(self):
        rng = np.random.default_rng(9)
        x = rng.random((2, 8, 8, 1))
        mate = rng.random((2, 8, 8, 1))
        p = SpatialParams(phi=0.3, scales=(1,))
        solo = init_spatial_mask(x, None, p)
        union = init_spatial_mask(x, mate, p)
        assert (union >= solo).all()
        per_frame = union[..., 0].sum(axis=(1, 2))
        k = math.ceil(0.3 * 64)
        assert ((per_frame >= k) & (per_frame <= 2 * k)).all()

    def test_channel_broadcast(self):
        rng = np.random.default_rng(13)
        x = rng.random((2, 6, 6, 3))
        mask = init_spatial_mask(x, None, SpatialParams(phi=0.5, scales=(1,)))
        for c in range(1, 3):
            np.testing.assert_array_equal(mask[..., c], mask[..., 0])

    def test_exact_ones_ratio_per_frame(self):
        rng = np.random.default_rng(14)
        x = rng.random((4, 8, 9, 2))
        for phi in (0.3, 0.6, 1.0):
            mask = init_spatial_mask(x, None, SpatialParams(phi=phi, scales=(1, 2)))
            k = math.ceil(phi * 8 * 9)
            per_frame = mask[..., 0].sum(axis=(1, 2))
            assert (per_frame == k).all()

    def test_shape_mismatch_rejected(self):
        x = np.zeros((2, 6, 6, 1))
        with pytest.raises(InputRejected):
            init_spatial_mask(x, np.zeros((2, 6, 5, 1)), SpatialParams())
