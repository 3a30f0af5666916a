"""Finite-difference gradient suites for the kernel, GDA, RFR and full model.

Every case builds 64-bit inputs at fractional sampling positions (no
bilinear lattice points, no ReLU kinks) and projects the output onto a
fixed random direction so the checked gradients are O(1).
"""

from __future__ import annotations

import numpy as np

from .tensor import GradReport, Tensor, gradcheck, ops, precision


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def _probe(out: Tensor, rng) -> Tensor:
    w = rng.normal(size=out.shape)
    return ops.sum(out * w)


def kernel_gradcheck_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar fn, inputs) covering every differentiable kernel op."""
    r = lambda *s: _t(rng.normal(size=s))  # noqa: E731
    cases = {}

    def add_case(name, build, *inputs):
        w_holder = {}

        def fn():
            out = build(*inputs)
            if "w" not in w_holder:
                w_holder["w"] = rng.normal(size=out.shape)
            return ops.sum(out * w_holder["w"])
        cases[name] = (fn, list(inputs))

    add_case("add", ops.add, r(3, 4), r(4))
    add_case("sub", ops.sub, r(3, 4), r(3, 1))
    add_case("mul", ops.mul, r(3, 4), r(3, 4))
    add_case("div", ops.div, r(3, 4), _t(rng.uniform(0.5, 2.0, size=(3, 4))))
    add_case("exp", ops.exp, r(5))
    add_case("sqrt", ops.sqrt, _t(rng.uniform(0.5, 2.0, size=(5,))))
    add_case("tanh", ops.tanh, r(5))
    add_case("gelu", ops.gelu, r(6))
    add_case("relu", ops.relu, _t(rng.uniform(0.2, 1.0, size=6) * rng.choice([-1, 1], size=6)))
    add_case("soft_clamp", lambda x: ops.soft_clamp(x, 2.0), r(6) * 2.0)
    add_case("softmax", ops.softmax, r(3, 5))
    add_case("matmul", ops.matmul, r(2, 3, 4), r(4, 5))
    add_case("conv2d", lambda x, k, b: ops.conv2d(x, k, b, pad=1), r(5, 5, 2), r(3, 3, 2, 3), r(3))
    add_case("conv2d_stride", lambda x, k: ops.conv2d(x, k, stride=2, pad=1), r(6, 6, 2), r(3, 3, 2, 2))
    add_case("layernorm", ops.layernorm, r(4, 6), r(6), r(6))
    flow = _t(rng.uniform(-1.4, 1.4, size=(5, 5, 2)) + 0.0137)
    add_case("flow_warp", ops.flow_warp, r(5, 5, 3), flow)
    add_case("pixel_shuffle", lambda x: ops.pixel_shuffle(x, 2), r(3, 3, 8))
    tgt = rng.normal(size=(3, 4))
    add_case("charbonnier_mean", lambda x: ops.charbonnier(x, tgt, mode="mean"), r(3, 4))
    add_case("charbonnier_global", lambda x: ops.charbonnier(x, tgt, mode="global"), r(3, 4))
    add_case("concat", lambda a, b: ops.concat([a, b], axis=1), r(2, 3), r(2, 2))
    add_case("take", lambda x: ops.take(x, [0, 2, 2, 1], axis=0), r(3, 4))
    add_case("roll", lambda x: ops.roll(x, (1, -2), axis=(0, 1)), r(4, 5))
    add_case("pad", lambda x: ops.pad(x, ((1, 0), (2, 1))), r(3, 3))
    add_case("getitem", lambda x: x[1:, ::2], r(4, 5))
    # wrap the scalar-output cases: charbonnier already scalar, probing is harmless
    return cases


def run_kernel_suite(seed: int = 0, rel_tol: float = 1e-4) -> dict[str, GradReport]:
    rng = np.random.default_rng(seed)
    with precision(64):
        return {name: gradcheck(fn, inputs, rel_tol=rel_tol)
                for name, (fn, inputs) in kernel_gradcheck_cases(rng).items()}


def randomize(module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Replace every parameter by N(0, scale^2) draws so no check sits at an init symmetry."""
    for p in module.parameters():
        p.data = rng.normal(scale=scale, size=p.shape).astype(p.dtype)


def randomize_fan_in(module, rng: np.random.Generator, gain: float = 1.0, vector_scale: float = 0.1) -> None:
    """Variance-preserving random weights: matrices get std gain/sqrt(fan_in), vectors
    std ``vector_scale`` (norm scales around 1). Activations stay O(1) at any depth."""
    for name, p in module.named_parameters():
        if p.data.ndim >= 2 and not name.endswith("position_bias"):
            fan_in = int(np.prod(p.shape[:-1]))
            p.data = rng.normal(scale=gain / np.sqrt(fan_in), size=p.shape).astype(p.dtype)
        else:
            base = 1.0 if name.endswith("gamma") else 0.0
            p.data = (base + rng.normal(scale=vector_scale, size=p.shape)).astype(p.dtype)


def gda_gradcheck_case(rng: np.random.Generator):
    from .gda import GDA
    gda = GDA(8, 2, 2, 2, 3, rng)
    randomize(gda, rng, 0.3)
    shape = (2, 4, 4, 8)
    inputs = [_t(rng.normal(size=shape)) for _ in range(3)]
    flows = _t(rng.uniform(-1.3, 1.3, size=(2, 2, 4, 4, 2)) + 0.031)
    probe = rng.normal(size=shape)
    fprobe = rng.normal(size=(2, 2, 4, 4, 2))

    def fn():
        out, new_flows, _ = gda(inputs[0], flows, inputs[1], inputs[2])
        return ops.sum(out * probe) + ops.sum(new_flows * fprobe)

    names, params = zip(*gda.named_parameters())
    return fn, list(params) + inputs + [flows], list(names) + ["src_i", "src_prev", "cur_prev", "flows"]


def rfr_gradcheck_case(rng: np.random.Generator):
    from .gda import GDA
    from .rfr import RefinementModule, rfr_step
    mod = RefinementModule(2, 8, 2, (2, 2), 2, 1, 2, rng, gda=GDA(8, 2, 2, 2, 3, rng))
    randomize(mod, rng, 0.3)
    history = [_t(rng.normal(size=(2, 4, 4, 8))) for _ in range(2)]
    aligned = _t(rng.normal(size=(2, 4, 4, 8)))
    probe = rng.normal(size=(2, 4, 4, 8))
    named = [(n, p) for n, p in mod.named_parameters() if not n.startswith("gda.")]
    names = [n for n, _ in named] + ["history0", "history1", "aligned"]
    return (lambda: ops.sum(rfr_step(history, aligned, mod) * probe),
            [p for _, p in named] + history + [aligned], names)


def model_gradcheck_case(rng: np.random.Generator):
    from .flow import FlowProvider
    from .model import ModelConfig, build, forward, prepare_input
    cfg = ModelConfig(channels=8, heads=2, gda_groups=2, gda_heads=2, candidates=2, window=(4, 4),
                      num_modules=2, clip_size=2, precision=64, seed=int(rng.integers(1 << 30)))
    model = build(cfg)
    # init-scale weights leave attention gradients near 1e-7, inside finite-difference
    # round-off; variance-preserving random weights give every tensor a measurable effect
    randomize_fan_in(model, rng)
    motion = rng.uniform(-0.8, 0.8, size=(3, 2)) + 0.013
    flows = FlowProvider("synthetic_gt", motion=motion).consecutive_flows(4, 4, 4)
    prep = prepare_input(model, rng.uniform(size=(4, 4, 4, 3)), flows)
    # a mean loss over 3k outputs shrinks attention gradients into finite-difference noise
    probe = rng.normal(size=(4, 16, 16, 3))
    names, params = zip(*model.named_parameters())
    return lambda: ops.sum(forward(model, prep) * probe), list(params), list(names)


SUITES = ("kernel", "gda", "rfr", "model")


def run_suite(name: str, seed: int = 0, rel_tol: float = 1e-4, max_elements: int | None = None) -> dict[str, GradReport]:
    """name -> report; non-kernel suites return a single report over all tensors."""
    if name == "kernel":
        return run_kernel_suite(seed, rel_tol)
    builders = {"gda": (gda_gradcheck_case, 12), "rfr": (rfr_gradcheck_case, 10), "model": (model_gradcheck_case, 3)}
    if name not in builders:
        raise ValueError(f"unknown gradcheck suite {name!r}; choose from {', '.join(SUITES)}")
    build_case, default_max = builders[name]
    rng = np.random.default_rng(seed)
    with precision(64):
        fn, inputs, names = build_case(rng)
        rep = gradcheck(fn, inputs, rel_tol=rel_tol, names=names,
                        max_elements=default_max if max_elements is None else max_elements, rng=rng,
                        kink_guard=True)
    return {name: rep}
