import numpy as np
import pytest

from rvrt.gda import GDA
from rvrt.rfr import (
    RefinementModule, ResidualSwinBlock, WindowAttention3D, clip_order, concatenate_clips, partition_clips,
    propagate, rfr_step, window_attention_3d,
)
from rvrt.tensor import Tensor, gradcheck, ops

import oracles


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def randomize(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)


def make_module(rng, index=1, c=8, n=2, window=(2, 2), heads=2, g=2, m=3, randomized=True):
    gda = GDA(c, n, g, heads, m, rng)
    mod = RefinementModule(index, c, n, window, heads, 1, 2, rng, gda=gda)
    if randomized:
        randomize(mod, rng)
        for conv in gda.offset_net:
            conv.weight.data *= 0.3
    return mod


class TestPartition:
    def test_even(self, f64):
        f = T(np.arange(8.0).reshape(8, 1, 1, 1))
        clips, mask = partition_clips(f, 2)
        assert [c.data.ravel().tolist() for c in clips] == [[0, 1], [2, 3], [4, 5], [6, 7]]
        assert mask.all()

    def test_singletons(self, f64):
        clips, _ = partition_clips(T(np.arange(5.0).reshape(5, 1, 1, 1)), 1)
        assert [c.data.ravel().tolist() for c in clips] == [[0], [1], [2], [3], [4]]

    def test_tail_reflection(self, f64):
        clips, mask = partition_clips(T(np.arange(5.0).reshape(5, 1, 1, 1)), 2)
        assert len(clips) == 3
        # reflection about the last frame: padded index 5 reads frame 3
        assert clips[-1].data.ravel().tolist() == [4.0, 3.0]
        assert mask.tolist() == [True] * 5 + [False]

    def test_round_trip(self, rng, f64):
        f = rng.normal(size=(6, 3, 3, 2))
        clips, _ = partition_clips(T(f), 3)
        assert np.array_equal(concatenate_clips(clips).data, f)

    def test_bad_clip_size(self, f64):
        with pytest.raises(ValueError):
            partition_clips(T(np.zeros((4, 1, 1, 1))), 0)


class TestWindowAttention:
    def test_full_window_oracle(self, rng, f64):
        x = rng.normal(size=(2, 3, 4, 6))
        attn = WindowAttention3D(6, 2, (2, 3, 4), rng)
        randomize(attn, rng)
        out = window_attention_3d(T(x), attn).data
        expect = oracles.global_attention_oracle(
            x, attn.qkv.weight.data, attn.q_bias.data, attn.v_bias.data, attn.proj.weight.data, attn.proj.bias.data,
            attn.position_bias.data, 2, (2, 3, 4))
        np.testing.assert_allclose(out, expect, atol=1e-8, rtol=0)

    def test_shift_disabled_when_window_covers(self, rng, f64):
        x = T(rng.normal(size=(2, 4, 4, 4)))
        attn = WindowAttention3D(4, 1, (2, 4, 4), rng)
        randomize(attn, rng)
        np.testing.assert_array_equal(attn(x, shifted=True).data, attn(x, shifted=False).data)

    def test_single_frame_is_2d(self, rng, f64):
        # N=1: each 2x2 window only sees its own four pixels
        x = rng.normal(size=(1, 4, 4, 4))
        attn = WindowAttention3D(4, 2, (1, 2, 2), rng)
        randomize(attn, rng)
        out = attn(T(x)).data
        for by in range(2):
            for bx in range(2):
                sub = x[:, 2 * by:2 * by + 2, 2 * bx:2 * bx + 2]
                np.testing.assert_allclose(out[:, 2 * by:2 * by + 2, 2 * bx:2 * bx + 2], attn(T(sub)).data, atol=1e-12)

    def test_shifted_windows_match_masked_oracle(self, rng, f64):
        # shifted attention equals attention over the rolled image restricted to same-region tokens
        x = T(rng.normal(size=(2, 4, 4, 4)))
        attn = WindowAttention3D(4, 1, (2, 2, 2), rng)
        randomize(attn, rng)
        _, weights = attn(x, shifted=True, return_attention=True)
        assert (weights >= 0).all()
        np.testing.assert_allclose(weights.sum(-1), 1.0, atol=1e-6)
        # tokens of the wrap-around window corner that came from different regions get ~0 weight
        assert weights[-1].min() < 1e-30

    def test_rows_normalised(self, rng, f64):
        attn = WindowAttention3D(8, 2, (2, 2, 2), rng)
        randomize(attn, rng)
        _, w = attn(T(rng.normal(size=(2, 4, 4, 8))), return_attention=True)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)

    def test_frames_interact(self, rng, f64):
        attn = WindowAttention3D(4, 2, (3, 2, 2), rng)
        randomize(attn, rng)
        x = rng.normal(size=(3, 4, 4, 4))
        base = attn(T(x)).data
        for k in range(3):
            y = x.copy()
            y[k] = 0.0
            diff = attn(T(y)).data - base
            for other in range(3):
                assert np.linalg.norm(diff[other]) > 1e-10

    def test_indivisible(self, rng):
        attn = WindowAttention3D(4, 1, (1, 3, 3), rng)
        with pytest.raises(ValueError):
            attn(T(np.zeros((1, 4, 4, 4))))

    def test_gradcheck_shifted_block(self, rng, f64):
        block = ResidualSwinBlock(4, 2, (2, 2, 2), 2, rng)
        randomize(block, rng)
        x = T(rng.normal(size=(2, 4, 4, 4)))
        probe = rng.normal(size=x.shape)
        names, params = zip(*block.named_parameters())
        rep = gradcheck(lambda: ops.sum(block(x) * probe), list(params) + [x], max_elements=10,
                        names=list(names) + ["x"])
        assert rep.passed, str(rep)


class TestRfrStep:
    @pytest.mark.parametrize("index", [1, 2, 3])
    def test_shape(self, rng, index, f64):
        mod = make_module(rng, index=index)
        hist = [T(rng.normal(size=(2, 4, 4, 8))) for _ in range(index)]
        assert rfr_step(hist, T(rng.normal(size=(2, 4, 4, 8))), mod).shape == (2, 4, 4, 8)

    def test_selector(self, rng, f64):
        mod = make_module(rng, index=2)
        mod.fusion.weight.data[...] = 0.0
        mod.fusion.weight.data[16:24] = np.eye(8)
        mod.fusion.bias.data[...] = 0.0
        for block in mod.blocks:
            block.out.weight.data[...] = 0.0
            block.out.bias.data[...] = 0.0
        aligned = rng.normal(size=(2, 4, 4, 8))
        hist = [T(rng.normal(size=(2, 4, 4, 8))) for _ in range(2)]
        np.testing.assert_allclose(rfr_step(hist, T(aligned), mod).data, aligned, atol=1e-14)

    def test_mismatch(self, rng, f64):
        mod = make_module(rng, index=1)
        with pytest.raises(ValueError):
            rfr_step([T(np.zeros((2, 4, 4, 8)))], T(np.zeros((2, 4, 2, 8))), mod)

    def test_gradcheck(self, rng, f64):
        mod = make_module(rng, index=2)
        hist = [T(rng.normal(size=(2, 4, 4, 8))) for _ in range(2)]
        aligned = T(rng.normal(size=(2, 4, 4, 8)))
        probe = rng.normal(size=(2, 4, 4, 8))
        params = [mod.fusion.weight, mod.fusion.bias] + [p for _, p in mod.blocks[0].named_parameters()]
        rep = gradcheck(lambda: ops.sum(rfr_step(hist, aligned, mod) * probe), params + hist + [aligned],
                        max_elements=10)
        assert rep.passed, str(rep)


def _pair_flows(rng, num_clips, forward, n=2, h=4, w=4):
    keys = range(1, num_clips) if forward else range(num_clips - 1)
    return {t: T(rng.uniform(-1, 1, size=(n, n, h, w, 2))) for t in keys}


class TestPropagate:
    def test_order(self):
        assert clip_order(4, True) == [0, 1, 2, 3]
        assert clip_order(4, False) == [3, 2, 1, 0]

    def test_single_clip(self, rng, f64):
        mod = make_module(rng, index=1)
        f0 = T(rng.normal(size=(2, 4, 4, 8)))
        out = propagate([f0], mod, {}).data
        expect = rfr_step([f0], T(np.zeros((2, 4, 4, 8))), mod).data
        np.testing.assert_array_equal(out, expect)

    def test_direction_matters(self, rng, f64):
        fwd = make_module(rng, index=1)
        bwd = RefinementModule(2, 8, 2, (2, 2), 2, 1, 2, rng, gda=fwd.gda)
        bwd.blocks, bwd.fusion = fwd.blocks, type(fwd.fusion).__new__(type(fwd.fusion))
        bwd.fusion.weight = T(np.concatenate([fwd.fusion.weight.data[:8], np.zeros((8, 8)), fwd.fusion.weight.data[8:]]))
        bwd.fusion.bias = fwd.fusion.bias
        f0 = T(np.cumsum(rng.normal(size=(6, 4, 4, 8)), axis=0))
        flows = rng.uniform(-1, 1, size=(2, 2, 4, 4, 2))
        a = propagate([f0], fwd, {1: T(flows), 2: T(flows)}).data
        b = propagate([f0, T(np.zeros((6, 4, 4, 8)))], bwd, {0: T(flows), 1: T(flows)}).data
        assert np.linalg.norm(a - b) > 1e-6

    @pytest.mark.parametrize("forward", [True, False])
    def test_perturbation_flows_downstream(self, rng, forward, f64):
        mod = make_module(rng, index=1 if forward else 2)
        num_clips = 4
        hist = [T(rng.normal(size=(8, 4, 4, 8))) for _ in range(mod.index)]
        flows = _pair_flows(rng, num_clips, forward)
        base = propagate(hist, mod, dict(flows)).data
        k = 1 if forward else 2
        hacked = [T(h.data.copy()) for h in hist]
        for h in hacked:
            h.data[2 * k:2 * k + 2] = 0.0
        out = propagate(hacked, mod, dict(flows)).data
        order = clip_order(num_clips, forward)
        for t in order[order.index(k):]:
            assert np.linalg.norm(out[2 * t:2 * t + 2] - base[2 * t:2 * t + 2]) > 1e-8
        for t in order[:order.index(k)]:
            assert np.array_equal(out[2 * t:2 * t + 2], base[2 * t:2 * t + 2])

    def test_flow_state_updated(self, rng, f64):
        mod = make_module(rng, index=1)
        flows = _pair_flows(rng, 3, True)
        state = dict(flows)
        propagate([T(rng.normal(size=(6, 4, 4, 8)))], mod, state)
        assert not np.array_equal(state[1].data, flows[1].data)

    def test_recurrent_and_transformer_extremes(self, rng, f64):
        f0 = T(rng.normal(size=(4, 4, 4, 8)))
        rec = make_module(rng, n=1, heads=2, g=2)
        out = propagate([f0], rec, _pair_flows(rng, 4, True, n=1))
        assert out.shape == (4, 4, 4, 8)
        full = make_module(rng, n=4)
        out = propagate([f0], full, {})
        assert out.shape == (4, 4, 4, 8)
