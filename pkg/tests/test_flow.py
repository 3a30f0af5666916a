import numpy as np
import pytest

from rvrt.data import gen_synthetic_video
from rvrt.flow import (
    ConsecutiveFlows, FlowProvider, chain_flow, clip_pairwise_flows, compose_flows, save_flows,
)
from rvrt.tensor import Tensor, ops

import oracles


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def const_flow(c, h=6, w=7):
    return np.broadcast_to(np.asarray(c, dtype=np.float64), (h, w, 2)).copy()


class TestProviders:
    def test_zero(self):
        flows = FlowProvider("zero").consecutive_flows(5, 4, 6)
        assert flows.from_prev.shape == (4, 4, 6, 2)
        assert not flows.from_prev.any() and not flows.from_next.any()

    def test_synthetic_translation(self):
        motion = np.tile([[0.0, 1.0]], (4, 1))
        flows = FlowProvider("synthetic_gt", motion=motion).consecutive_flows(5, 8, 8)
        np.testing.assert_array_equal(flows.from_prev, np.broadcast_to([0.0, -1.0], (4, 8, 8, 2)))
        np.testing.assert_array_equal(flows.from_next, np.broadcast_to([0.0, 1.0], (4, 8, 8, 2)))

    def test_synthetic_warp_reproduces_target(self):
        motion = np.tile([[0.0, 1.0]], (3, 1))
        video = gen_synthetic_video(7, 4, 10, 10, motion)
        flows = FlowProvider("synthetic_gt", motion=motion).consecutive_flows(4, 10, 10)
        for k in range(3):
            fwd = ops.flow_warp(T(video.hq[k]), T(flows.from_prev[k])).data
            np.testing.assert_allclose(fwd[1:-1, 1:-1], video.hq[k + 1][1:-1, 1:-1], atol=1e-6)
            bwd = ops.flow_warp(T(video.hq[k + 1]), T(flows.from_next[k])).data
            np.testing.assert_allclose(bwd[1:-1, 1:-1], video.hq[k][1:-1, 1:-1], atol=1e-6)

    def test_file_round_trip(self, tmp_path, rng):
        flows = ConsecutiveFlows(rng.normal(size=(3, 4, 5, 2)).astype(np.float32),
                                 rng.normal(size=(3, 4, 5, 2)).astype(np.float32))
        paths = save_flows(flows, tmp_path)
        loaded = FlowProvider("file", paths=paths).consecutive_flows(4, 4, 5)
        assert np.array_equal(loaded.from_prev, flows.from_prev)
        assert np.array_equal(loaded.from_next, flows.from_next)

    def test_file_shape_mismatch(self, tmp_path, rng):
        flows = ConsecutiveFlows(np.zeros((3, 4, 5, 2)), np.zeros((3, 4, 5, 2)))
        paths = save_flows(flows, tmp_path)
        with pytest.raises(ValueError):
            FlowProvider("file", paths=paths).consecutive_flows(5, 4, 5)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            FlowProvider("spynet")

    def test_downscale(self):
        flows = ConsecutiveFlows(np.full((2, 8, 8, 2), 4.0), np.full((2, 8, 8, 2), -8.0))
        small = flows.downscaled(4)
        assert small.from_prev.shape == (2, 2, 2, 2)
        np.testing.assert_array_equal(small.from_prev, 1.0)
        np.testing.assert_array_equal(small.from_next, -2.0)


class TestCompose:
    def test_zero_identity(self, rng):
        f = rng.normal(size=(6, 7, 2))
        z = np.zeros_like(f)
        np.testing.assert_array_equal(compose_flows(T(f), T(z)).data, f)
        np.testing.assert_array_equal(compose_flows(T(z), T(f)).data, f)

    def test_constant_translations_add(self):
        c1, c2 = [0.5, -1.25], [2.0, 0.75]
        out = compose_flows(T(const_flow(c1)), T(const_flow(c2))).data
        assert np.array_equal(out, const_flow(np.add(c1, c2)))

    def test_associative_on_constants(self):
        a, b, c = (T(const_flow(v)) for v in ([0.5, 1.0], [-0.25, 2.0], [1.5, -0.5]))
        left = compose_flows(compose_flows(a, b), c).data
        right = compose_flows(a, compose_flows(b, c)).data
        assert np.array_equal(left, right)

    def test_per_pixel_oracle(self, rng):
        from scipy.ndimage import gaussian_filter
        f_ab = gaussian_filter(rng.normal(size=(8, 8, 2)), (1.5, 1.5, 0)) * 4
        f_bc = gaussian_filter(rng.normal(size=(8, 8, 2)), (1.5, 1.5, 0)) * 4
        out = compose_flows(T(f_ab), T(f_bc)).data
        expect = np.array([[oracles.compose_point(f_ab, f_bc, y, x) for x in range(8)] for y in range(8)])
        np.testing.assert_allclose(out, expect, atol=1e-10, rtol=0)


class TestClipPairwise:
    def test_single_frame_clips(self, rng):
        steps = rng.normal(size=(3, 4, 4, 2))
        flows = ConsecutiveFlows(steps, -steps)
        pair = clip_pairwise_flows(flows, 1, 2, forward=True)
        assert pair.shape == (1, 1, 4, 4, 2)
        np.testing.assert_array_equal(pair[0, 0], steps[1])
        back = clip_pairwise_flows(flows, 1, 1, forward=False)
        np.testing.assert_array_equal(back[0, 0], -steps[1])

    def test_gap_one_is_raw(self, rng):
        steps = rng.normal(size=(5, 4, 4, 2))
        flows = ConsecutiveFlows(steps, steps[::-1].copy())
        pair = clip_pairwise_flows(flows, 2, 1, forward=True)
        # frame 2 (clip 1, n=0) <- frame 1 (clip 0, n'=1): one hop
        np.testing.assert_array_equal(pair[0, 1], steps[1])

    def test_gap_three_constant(self):
        c = np.array([0.5, -0.75])
        steps = np.broadcast_to(c, (5, 5, 5, 2)).copy()
        flows = ConsecutiveFlows(steps, -steps)
        pair = clip_pairwise_flows(flows, 2, 1, forward=True)
        # frame 3 (clip 1, n=1) <- frame 0 (clip 0, n'=0): gap 3
        np.testing.assert_array_equal(pair[1, 0], np.broadcast_to(3 * c, (5, 5, 2)))
        chained = compose_flows(T(steps[0]), compose_flows(T(steps[1]), T(steps[2]))).data
        np.testing.assert_array_equal(pair[1, 0], chained)
        back = clip_pairwise_flows(flows, 2, 0, forward=False)
        np.testing.assert_array_equal(back[0, 1], np.broadcast_to(-3 * c, (5, 5, 2)))

    def test_gap_matches_chain_oracle(self, rng):
        from scipy.ndimage import gaussian_filter
        steps = gaussian_filter(rng.normal(size=(5, 8, 8, 2)), (0, 1.5, 1.5, 0)) * 3
        flows = ConsecutiveFlows(steps, steps)
        pair = clip_pairwise_flows(flows, 3, 1, forward=True)
        # target frame 4 (n=1), source frame 1 (n'=1): 4->3->2->1
        f43, f32, f21 = steps[3], steps[2], steps[1]
        expect = np.zeros((8, 8, 2))
        for y in range(8):
            for x in range(8):
                p = np.array([y, x], dtype=float)
                d = f43[y, x].copy()
                d += oracles.bilinear_point(f32, *(p + d))
                d += oracles.bilinear_point(f21, *(p + d))
                expect[y, x] = d
        np.testing.assert_allclose(pair[1, 1], expect, atol=1e-10, rtol=0)

    def test_all_pairs_shape_finite(self, rng):
        steps = rng.normal(size=(7, 4, 4, 2))
        flows = ConsecutiveFlows(steps, steps)
        for t in (1, 2, 3):
            pair = clip_pairwise_flows(flows, 2, t, forward=True)
            assert pair.shape == (2, 2, 4, 4, 2) and np.isfinite(pair).all()

    def test_out_of_range(self, rng):
        flows = ConsecutiveFlows(np.zeros((3, 2, 2, 2)), np.zeros((3, 2, 2, 2)))
        with pytest.raises(ValueError):
            clip_pairwise_flows(flows, 2, 0, forward=True)
        with pytest.raises(ValueError):
            clip_pairwise_flows(flows, 2, 1, forward=False)

    def test_chain_rejects_same_frame(self):
        with pytest.raises(ValueError):
            chain_flow(np.zeros((3, 2, 2, 2)), 1, 1)
