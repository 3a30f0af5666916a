import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rvrt.tensor import (
    Tape, Tensor, TensorFileError, gradcheck, load_raw, ops, precision, save_raw,
)
from rvrt.tensor.io import decode_raw, encode_raw

import oracles


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(ops.matmul(T(np.eye(3)), T(b)).data, b)

    def test_scalar(self):
        assert ops.matmul(T([[2.0]]), T([[3.0]])).data.tolist() == [[6.0]]

    def test_loop_oracle(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(ops.matmul(T(a), T(b)).data, oracles.matmul_loops(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(5, 6, 3))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0] = np.eye(3)
        np.testing.assert_array_equal(ops.conv2d(T(x), T(k)).data, x)

    def test_delta_kernel_shift(self, rng):
        x = rng.normal(size=(5, 5, 1))
        k = np.zeros((3, 3, 1, 1))
        k[0, 0, 0, 0] = 1.0
        out = ops.conv2d(T(x), T(k), pad=1).data
        expect = np.zeros_like(x)
        expect[1:, 1:] = x[:-1, :-1]
        np.testing.assert_array_equal(out, expect)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_direct_loop_oracle(self, rng, stride, pad):
        x = rng.normal(size=(8, 8, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        bias = rng.normal(size=4)
        out = ops.conv2d(T(x), T(k), T(bias), stride=stride, pad=pad).data
        np.testing.assert_allclose(out, oracles.conv2d_loops(x, k, bias, stride, pad), atol=1e-10, rtol=0)

    def test_output_extent(self):
        out = ops.conv2d(T(np.ones((9, 7, 1))), T(np.ones((3, 3, 1, 2))), stride=2, pad=1)
        assert out.shape == ((9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1, 2)

    def test_kernel_too_large(self):
        with pytest.raises(ValueError):
            ops.conv2d(T(np.ones((2, 2, 1))), T(np.ones((5, 5, 1, 1))))

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            ops.conv2d(T(np.ones((4, 4, 1))), T(np.ones((3, 3, 1, 1))), stride=0)


class TestBilinear:
    def test_lattice_point(self, rng):
        f = rng.normal(size=(5, 6, 3))
        out = ops.bilinear_sample(T(f), T([[2.0, 3.0]])).data
        np.testing.assert_array_equal(out[0], f[2, 3])

    def test_midpoint(self, rng):
        f = rng.normal(size=(2, 2, 4))
        out = ops.bilinear_sample(T(f), T([[0.5, 0.5]])).data
        np.testing.assert_allclose(out[0], f.reshape(4, 4).mean(0), atol=1e-15)

    def test_four_neighbour_oracle(self, rng):
        f = rng.normal(size=(6, 7, 3))
        coords = rng.uniform(-1.5, 7.5, size=(50, 2))
        out = ops.bilinear_sample(T(f), T(coords)).data
        expect = np.array([oracles.bilinear_point(f, *c) for c in coords])
        np.testing.assert_allclose(out, expect, atol=1e-12, rtol=0)

    def test_batched_matches_single(self, rng):
        f = rng.normal(size=(3, 5, 5, 2))
        coords = rng.uniform(0, 4, size=(3, 10, 2))
        batched = ops.bilinear_sample(T(f), T(coords)).data
        for b in range(3):
            np.testing.assert_array_equal(batched[b], ops.bilinear_sample(T(f[b]), T(coords[b])).data)


class TestFlowWarp:
    def test_zero_flow(self, rng):
        f = rng.normal(size=(4, 5, 2))
        np.testing.assert_array_equal(ops.flow_warp(T(f), T(np.zeros((4, 5, 2)))).data, f)

    def test_integer_translation(self, rng):
        f = rng.normal(size=(4, 5, 2))
        flow = np.zeros((4, 5, 2))
        flow[..., 1] = 1.0
        out = ops.flow_warp(T(f), T(flow)).data
        np.testing.assert_array_equal(out[:, :-1], f[:, 1:])
        np.testing.assert_array_equal(out[:, -1], f[:, -1])

    def test_per_pixel_oracle(self, rng):
        f = rng.normal(size=(6, 6, 3))
        flow = rng.normal(scale=1.5, size=(6, 6, 2))
        np.testing.assert_allclose(ops.flow_warp(T(f), T(flow)).data, oracles.warp_loops(f, flow), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.flow_warp(T(np.zeros((4, 4, 1))), T(np.zeros((4, 5, 2))))


class TestPixelShuffle:
    def test_unit_scale(self, rng):
        f = rng.normal(size=(3, 4, 5))
        np.testing.assert_array_equal(ops.pixel_shuffle(T(f), 1).data, f)

    def test_shape(self):
        assert ops.pixel_shuffle(T(np.zeros((4, 4, 48))), 4).shape == (16, 16, 3)

    def test_layout(self):
        f = np.arange(8.0).reshape(1, 1, 8)
        out = ops.pixel_shuffle(T(f), 2).data
        # channel c*4 + i*2 + j lands at (i, j) of output channel c
        assert out[:, :, 0].tolist() == [[0, 1], [2, 3]]
        assert out[:, :, 1].tolist() == [[4, 5], [6, 7]]

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            ops.pixel_shuffle(T(np.zeros((2, 2, 6))), 2)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 2, 4, 12), elements=st.floats(-1e6, 1e6)))
    def test_inverse_pair(self, f):
        out = ops.pixel_unshuffle(ops.pixel_shuffle(T(f), 2), 2).data
        assert np.array_equal(out, f)
        back = ops.pixel_shuffle(ops.pixel_unshuffle(T(out), 2), 2).data
        assert np.array_equal(back, f)


class TestActivations:
    def test_softmax_singleton(self):
        assert ops.softmax(T([[5.0]])).data[0, 0] == 1.0

    def test_softmax_uniform(self):
        np.testing.assert_allclose(ops.softmax(T(np.full((2, 7), 3.3))).data, 1 / 7, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 9), elements=st.floats(-50, 50)))
    def test_softmax_normalised(self, logits):
        out = ops.softmax(T(logits)).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)

    def test_softmax_oracle(self, rng):
        x = rng.normal(size=(3, 5))
        expect = np.array([oracles.softmax_list(list(r)) for r in x])
        np.testing.assert_allclose(ops.softmax(T(x)).data, expect, atol=1e-14)

    def test_gelu(self, rng):
        assert ops.gelu(T([0.0])).data[0] == 0.0
        x = rng.normal(size=20)
        np.testing.assert_allclose(ops.gelu(T(x)).data, [oracles.gelu_scalar(v) for v in x], atol=1e-14)

    def test_layernorm(self, rng):
        beta = rng.normal(size=6)
        gamma = rng.normal(size=6)
        out = ops.layernorm(T(np.full((2, 6), 4.2)), T(gamma), T(beta)).data
        np.testing.assert_allclose(out, np.broadcast_to(beta, (2, 6)), atol=1e-12)
        x = rng.normal(size=(3, 6)) * 3 + 1
        plain = ops.layernorm(T(x), T(np.ones(6)), T(np.zeros(6))).data
        np.testing.assert_allclose(plain.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(plain.var(-1), 1, atol=1e-4)
        expect = np.array([oracles.layernorm_row(list(r), gamma, beta) for r in x])
        np.testing.assert_allclose(ops.layernorm(T(x), T(gamma), T(beta)).data, expect, atol=1e-12)


class TestCharbonnier:
    def test_zero_residual_global(self):
        x = T(np.ones((3, 3)))
        assert ops.charbonnier(x, x, mode="global").item() == pytest.approx(1e-3, rel=1e-15)

    def test_single_element_mean(self):
        val = ops.charbonnier(T([3e-3]), T([0.0]), mode="mean").item()
        assert val == pytest.approx(math.sqrt(1e-5), rel=1e-12)
        assert val == pytest.approx(3.1623e-3, rel=1e-4)

    def test_summation_oracle(self, rng):
        a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        r = (a - b).ravel()
        eps = 1e-3
        glob = math.sqrt(sum(v * v for v in r) + eps * eps)
        mean = sum(math.sqrt(v * v + eps * eps) for v in r) / 4
        assert ops.charbonnier(T(a), T(b), mode="global").item() == pytest.approx(glob, rel=1e-12)
        assert ops.charbonnier(T(a), T(b), mode="mean").item() == pytest.approx(mean, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.charbonnier(T(np.ones(3)), T(np.ones(4)))


class TestTape:
    def test_fanout_accumulates(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            y = ops.sum(x * x + x * 3.0)
        tape.backward(y)
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)

    def test_reverse_order(self):
        x = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            a = ops.exp(x)
            b = ops.tanh(a)
            c = ops.sum(b * a)
        seen = []
        tape.backward(c, visit=lambda node: seen.append(id(node)))
        assert seen == [id(n) for n in reversed(tape.nodes)]

    def test_no_tape_no_record(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x * 2.0
        assert not y.requires_grad

    def test_determinism(self, rng):
        x = rng.normal(size=(8, 8, 3)).astype(np.float32)
        k = rng.normal(size=(3, 3, 3, 5)).astype(np.float32)
        a = ops.conv2d(Tensor(x), Tensor(k), pad=1).data
        b = ops.conv2d(Tensor(x), Tensor(k), pad=1).data
        assert a.tobytes() == b.tobytes()

    def test_precision_context(self):
        assert Tensor([1.0]).dtype == np.float32
        with precision(64):
            assert Tensor([1.0]).dtype == np.float64


class TestGradcheck:
    def test_quadratic(self, rng, f64):
        x = Tensor(rng.normal(size=(4, 3)))
        rep = gradcheck(lambda: ops.sum(x * x), [x], h=1e-5, rel_tol=1e-8)
        assert rep.passed, str(rep)

    def test_bilinear_fractional(self, rng, f64):
        f = Tensor(rng.normal(size=(5, 5, 2)))
        coords = Tensor(rng.uniform(0.1, 3.9, size=(12, 2)) + 0.013)
        w = rng.normal(size=(12, 2))
        rep = gradcheck(lambda: ops.sum(ops.bilinear_sample(f, coords) * w), [f, coords])
        assert rep.passed, str(rep)

    def test_reports_failure(self, f64):
        x = Tensor(np.array([0.3]))
        # relu kink straddled by h: analytic and numeric disagree
        x.data[0] = 0.0
        rep = gradcheck(lambda: ops.sum(ops.relu(x)), [x])
        assert not rep.passed

    def test_kink_guard_redraws_straddled_entries(self, f64):
        x = Tensor(np.array([0.0, 2e-6, -3e-6, 0.4, -0.7, 1.1]))
        rep = gradcheck(lambda: ops.sum(ops.relu(x) * 1.5), [x], kink_guard=True)
        assert rep.passed, str(rep)
        assert rep.skipped == [3] and rep.checked == [3]

    def test_kink_guard_keeps_smooth_entries(self, rng, f64):
        x = Tensor(rng.normal(size=6))
        rep = gradcheck(lambda: ops.sum(ops.tanh(x) * x), [x], kink_guard=True)
        assert rep.passed and rep.skipped == [0] and rep.checked == [6]

    def test_kink_guard_still_catches_wrong_backward(self, rng, f64):
        x = Tensor(rng.uniform(0.5, 1.5, size=4))
        # the cubic term bypasses the tape: smooth, so never redrawn, and its gradient is missing
        rep = gradcheck(lambda: ops.add(ops.sum(x * x), Tensor(np.sum(x.data ** 3))), [x], kink_guard=True)
        assert not rep.passed and rep.skipped == [0]

    @pytest.mark.parametrize("opname", [
        "add", "sub", "mul", "div", "exp", "sqrt", "tanh", "gelu", "softmax", "matmul",
        "conv2d", "conv2d_stride", "layernorm", "flow_warp", "pixel_shuffle", "charbonnier_mean",
        "charbonnier_global", "concat", "take", "roll", "pad", "getitem", "soft_clamp", "relu",
    ])
    def test_every_op(self, opname, rng, f64):
        from rvrt.gradsuites import kernel_gradcheck_cases
        fn, inputs = kernel_gradcheck_cases(rng)[opname]
        rep = gradcheck(fn, inputs)
        assert rep.passed, str(rep)


class TestRawIO:
    def test_round_trip(self, tmp_path, rng):
        a = rng.normal(size=(3, 4, 5, 2)).astype(np.float32)
        save_raw(tmp_path / "a.rvt", a)
        b = load_raw(tmp_path / "a.rvt")
        assert b.dtype == np.float32 and np.array_equal(a, b)
        assert encode_raw(b) == (tmp_path / "a.rvt").read_bytes()

    def test_bad_magic(self):
        buf = bytearray(encode_raw(np.zeros((2, 2))))
        buf[0] ^= 0xFF
        with pytest.raises(TensorFileError, match="bad magic"):
            decode_raw(bytes(buf))

    def test_truncated(self):
        buf = encode_raw(np.zeros((2, 2)))
        with pytest.raises(TensorFileError, match="byte"):
            decode_raw(buf[:-3])
