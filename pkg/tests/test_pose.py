import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posefill.errors import NoVisibleGroundTruth
from posefill.pose import (COCO_SIGMAS, NUM_KEYPOINTS, Keypoints17, encode_keypoints,
                           grid_index, oks, rasterize_skeleton)

from conftest import make_keypoints


def oracle_index(v, dim):
    """Brute-force rounding rule: index = floor(v + 0.5), dropped when outside."""
    idx = math.floor(v + 0.5)
    return idx if 0 <= idx < dim else None


def oracle_bresenham(r0, c0, r1, c1):
    """Independently coded symmetric integer line walk, endpoints included."""
    pts = [(r0, c0)]
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    acc = dc - dr
    r, c = r0, c0
    while (r, c) != (r1, c1):
        move_c = 2 * acc >= -dr
        move_r = 2 * acc <= dc
        if move_c:
            acc -= dr
            c += sc
        if move_r:
            acc += dc
            r += sr
        pts.append((r, c))
    return pts


class TestEncodeKeypoints:
    def test_single_visible_keypoint(self):
        kps = make_keypoints({0: (3.0, 2.0)})
        maps = encode_keypoints(kps, 8, 8)
        assert maps[0, 2, 3] == 1.0
        assert maps[0].sum() == 1.0
        assert maps[1:].sum() == 0.0

    def test_all_invisible(self):
        kps = make_keypoints({})
        assert encode_keypoints(kps, 8, 8).sum() == 0.0

    def test_boundary_rounding_drops_out_of_range(self):
        # x=7.6 rounds to column 8, which is outside an 8-wide image
        kps = make_keypoints({5: (7.6, 0.2)})
        maps = encode_keypoints(kps, 8, 8)
        assert maps[5].sum() == 0.0

    @given(st.floats(-2.0, 9.0), st.floats(-2.0, 9.0))
    @settings(max_examples=80, deadline=None)
    def test_matches_bruteforce_rounding(self, x, y):
        kps = make_keypoints({3: (x, y)})
        maps = encode_keypoints(kps, 8, 8)
        row, col = oracle_index(y, 8), oracle_index(x, 8)
        if row is None or col is None:
            assert maps[3].sum() == 0.0
        else:
            assert maps[3, row, col] == 1.0
            assert maps[3].sum() == 1.0

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_channel_sums_at_most_one(self, seed):
        rng = np.random.default_rng(seed)
        kps = Keypoints17(rng.uniform(-4, 30, size=(17, 2)), rng.random(17) > 0.3)
        maps = encode_keypoints(kps, 12, 20)
        assert (maps.sum(dim=(1, 2)) <= 1.0).all()
        assert ((maps == 0) | (maps == 1)).all()


class TestRasterizeSkeleton:
    def test_all_invisible(self):
        assert rasterize_skeleton(make_keypoints({}), 8, 8).sum() == 0.0

    def test_horizontal_torso_run(self):
        # shoulders only: the single drawable edge is the shoulder-shoulder line
        kps = make_keypoints({5: (1, 4), 6: (6, 4)})
        maps = rasterize_skeleton(kps, 8, 8)
        torso = maps[4]
        assert torso[4, 1:7].sum() == 6
        assert torso.sum() == 6
        maps[4] = 0
        assert maps.sum() == 0.0

    def test_degenerate_same_pixel(self):
        kps = make_keypoints({5: (2, 2), 7: (2, 2), 9: (2, 2)})
        maps = rasterize_skeleton(kps, 8, 8)
        left_arm = maps[0]
        assert left_arm[2, 2] == 1.0
        assert left_arm.sum() == 1.0

    def test_neck_line_needs_both_shoulders(self):
        kps = make_keypoints({0: (4, 1), 5: (2, 5)})
        maps = rasterize_skeleton(kps, 8, 8)
        assert maps[5].sum() == 0.0  # head channel: no eyes/ears, no midpoint
        kps = make_keypoints({0: (4, 1), 5: (2, 5), 6: (6, 5)})
        maps = rasterize_skeleton(kps, 8, 8)
        expected = set(oracle_bresenham(1, 4, 5, 4))
        drawn = {(r, c) for r, c in zip(*np.nonzero(maps[5].numpy()))}
        assert drawn == expected

    def test_matches_union_of_line_oracles(self):
        from posefill.pose import SKELETON_EDGES, L_SHOULDER, R_SHOULDER, NOSE
        rng = np.random.default_rng(0)
        H, W = 16, 12
        for _ in range(100):
            xy = rng.uniform(-3, 18, size=(17, 2))
            vis = rng.random(17) > 0.25
            kps = Keypoints17(xy, vis)
            maps = rasterize_skeleton(kps, H, W)
            for channel, edges in enumerate(SKELETON_EDGES):
                expected = set()
                pairs = list(edges)
                for a, b in pairs:
                    if vis[a] and vis[b]:
                        pts = oracle_bresenham(grid_index(xy[a, 1]), grid_index(xy[a, 0]),
                                               grid_index(xy[b, 1]), grid_index(xy[b, 0]))
                        expected |= {p for p in pts if 0 <= p[0] < H and 0 <= p[1] < W}
                if channel == 5 and vis[NOSE] and vis[L_SHOULDER] and vis[R_SHOULDER]:
                    mx = (xy[L_SHOULDER, 0] + xy[R_SHOULDER, 0]) / 2
                    my = (xy[L_SHOULDER, 1] + xy[R_SHOULDER, 1]) / 2
                    pts = oracle_bresenham(grid_index(xy[NOSE, 1]), grid_index(xy[NOSE, 0]),
                                           grid_index(my), grid_index(mx))
                    expected |= {p for p in pts if 0 <= p[0] < H and 0 <= p[1] < W}
                drawn = {(r, c) for r, c in zip(*np.nonzero(maps[channel].numpy()))}
                assert drawn == expected

    def test_line_pixels_follow_the_ideal_segment(self):
        # independent geometric facts: every drawn pixel lies within half a
        # diagonal of the continuous segment, and consecutive pixels are
        # 8-connected
        rng = np.random.default_rng(7)
        for _ in range(50):
            r0, c0, r1, c1 = rng.integers(0, 15, size=4)
            pts = oracle_bresenham(r0, c0, r1, c1)
            assert pts[0] == (r0, c0) and pts[-1] == (r1, c1)
            for (ra, ca), (rb, cb) in zip(pts, pts[1:]):
                assert max(abs(ra - rb), abs(ca - cb)) == 1
            a = np.array([r0, c0], dtype=float)
            b = np.array([r1, c1], dtype=float)
            ab = b - a
            denom = max(float(ab @ ab), 1.0)
            for p in pts:
                t = np.clip((np.array(p, dtype=float) - a) @ ab / denom, 0, 1)
                dist = np.linalg.norm(np.array(p, dtype=float) - (a + t * ab))
                assert dist <= math.sqrt(2) / 2 + 1e-9


class TestOks:
    def test_identity_is_one(self):
        kps = make_keypoints({0: (3, 4), 5: (7, 8)})
        assert oks(kps, kps, 100.0) == pytest.approx(1.0, abs=1e-12)

    def test_exponent_closed_form(self):
        # d^2 = 2 * scale * k^2 makes the exponent exactly -1
        scale = 100.0
        k = 2.0 * COCO_SIGMAS[0]
        d = math.sqrt(2.0 * scale * k ** 2)
        gt = make_keypoints({0: (10.0, 10.0)})
        pred = make_keypoints({0: (10.0 + d, 10.0)})
        assert oks(pred, gt, scale) == pytest.approx(math.exp(-1.0), abs=1e-9)

    def test_predicted_invisible_counts_zero(self):
        gt = make_keypoints({0: (3, 3), 1: (5, 5)})
        pred = make_keypoints({0: (3, 3)})
        assert oks(pred, gt, 50.0) == pytest.approx(0.5, abs=1e-12)

    def test_no_visible_ground_truth(self):
        with pytest.raises(NoVisibleGroundTruth):
            oks(make_keypoints({0: (1, 1)}), make_keypoints({}), 10.0)

    def test_rejects_nonpositive_scale(self):
        kps = make_keypoints({0: (1, 1)})
        with pytest.raises(ValueError):
            oks(kps, kps, 0.0)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 30, size=(17, 2))
        gt = Keypoints17(xy, np.ones(17, bool))
        pred = Keypoints17(xy + rng.normal(0, 1, size=(17, 2)), np.ones(17, bool))
        base = oks(pred, gt, 200.0)
        shift = np.array([13.0, -4.5])
        moved = oks(Keypoints17(pred.xy + shift, pred.visible),
                    Keypoints17(gt.xy + shift, gt.visible), 200.0)
        assert moved == pytest.approx(base, abs=1e-12)

    def test_monotone_in_distance(self):
        gt = make_keypoints({8: (10, 10)})
        values = [oks(make_keypoints({8: (10 + d, 10)}), gt, 64.0)
                  for d in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_symmetric_under_equal_sigma_relabeling(self):
        # ankles share a falloff constant: swapping their roles preserves OKS
        gt = make_keypoints({15: (4, 4), 16: (9, 9)})
        pred = make_keypoints({15: (5, 4), 16: (8, 9)})
        swapped_gt = make_keypoints({15: (9, 9), 16: (4, 4)})
        swapped_pred = make_keypoints({15: (8, 9), 16: (5, 4)})
        assert oks(pred, gt, 81.0) == pytest.approx(oks(swapped_pred, swapped_gt, 81.0),
                                                    abs=1e-12)

    @given(st.integers(0, 2 ** 31 - 1), st.floats(1.0, 1e4))
    @settings(max_examples=40, deadline=None)
    def test_self_similarity_is_one(self, seed, scale):
        rng = np.random.default_rng(seed)
        vis = rng.random(17) > 0.5
        if not vis.any():
            vis[0] = True
        kps = Keypoints17(rng.uniform(-10, 50, size=(17, 2)), vis)
        assert oks(kps, kps, scale) == pytest.approx(1.0, abs=1e-12)


class TestKeypointContainer:
    def test_requires_17(self):
        with pytest.raises(ValueError):
            Keypoints17(np.zeros((16, 2)), np.zeros(16, bool))

    def test_entries_round_trip(self):
        kps = make_keypoints({0: (1.5, 2.5), 9: (3, 4)})
        again = Keypoints17.from_entries(kps.to_entries())
        assert np.array_equal(again.xy, kps.xy)
        assert np.array_equal(again.visible, kps.visible)

    def test_flip_is_involution_on_pixel_grid(self):
        # dataset keypoints live on integer pixels, where mirroring is exact
        rng = np.random.default_rng(11)
        kps = Keypoints17(rng.integers(0, 40, size=(17, 2)).astype(float),
                          rng.random(17) > 0.4)
        twice = kps.flipped(40).flipped(40)
        assert np.array_equal(twice.xy, kps.xy)
        assert np.array_equal(twice.visible, kps.visible)

    def test_flip_is_involution_up_to_roundoff(self):
        rng = np.random.default_rng(12)
        kps = Keypoints17(rng.uniform(0, 40, size=(17, 2)), rng.random(17) > 0.4)
        twice = kps.flipped(40).flipped(40)
        assert np.allclose(twice.xy, kps.xy, atol=1e-9)
        assert np.array_equal(twice.visible, kps.visible)

    def test_flip_swaps_sides(self):
        kps = make_keypoints({9: (3.0, 7.0)})  # left wrist only
        flipped = kps.flipped(10)
        assert flipped.visible[10] and not flipped.visible[9]
        assert flipped.xy[10, 0] == pytest.approx(6.0)
        assert flipped.xy[10, 1] == pytest.approx(7.0)
