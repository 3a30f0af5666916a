"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradReport:
    names: list[str]
    max_rel_err: list[float]
    checked: list[int]
    rel_tol: float
    worst: list[tuple] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e < self.rel_tol for e in self.max_rel_err)

    def rows(self):
        for name, err, n in zip(self.names, self.max_rel_err, self.checked):
            yield name, n, err, err < self.rel_tol

    def __str__(self) -> str:
        skipped = self.skipped or [0] * len(self.names)
        lines = [f"{name:40s} n={n:5d} skipped={s:3d} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}"
                 for (name, n, err, ok), s in zip(self.rows(), skipped)]
        return "\n".join(lines)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              rel_tol: float = 1e-4, max_elements: int | None = None,
              rng: np.random.Generator | None = None,
              names: Sequence[str] | None = None, kink_guard: bool = False,
              kink_tol: float = 1e-6) -> GradReport:
    """Compare tape gradients of the scalar ``fn()`` against central differences.

    ``inputs`` are perturbed in place (and restored). If ``max_elements`` is
    given, at most that many randomly chosen entries of each input are
    probed numerically; the analytic gradient is always computed in full.

    With ``kink_guard`` each entry is also differenced at h/2. On a smooth
    function the central differences at h and h/2 agree to O(h^2) and the
    second differences satisfy D2(h) = 4 D2(h/2) to O(h^4). A slope jump at
    offset u inside [x-h, x+h] breaks the first test unless u = 0 and the
    second unless |u| = h/3. When either is off by more than ``kink_tol``
    (relative to the derivative, floored at the round-off level of the
    differences, 256 eps |f(x)| / h) the entry
    is not a valid finite-difference point and another one is drawn instead.
    The decision uses numeric values only, so it cannot mask a wrong backward.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradcheck needs 64-bit inputs")
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    if out.size != 1:
        raise ValueError("gradcheck function must return a scalar")
    grads = tape.backward(out)
    analytic = [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]

    rng = rng or np.random.default_rng(0)
    names = list(names) if names is not None else [t.name or f"input{i}" for i, t in enumerate(inputs)]
    f0 = float(out.data)
    noise = 256 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / h

    def pair(flat, k, step):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(fn().data)
        flat[k] = orig - step
        fm = float(fn().data)
        flat[k] = orig
        return fp, fm

    errs, counts, worst, skips = [], [], [], []
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        order = np.arange(flat.size)
        want = flat.size
        if max_elements is not None and flat.size > max_elements:
            order = rng.permutation(flat.size)
            want = max_elements
        idx, num, skipped = [], [], 0
        for k in order:
            if len(idx) == want:
                break
            fp, fm = pair(flat, k, h)
            n = (fp - fm) / (2 * h)
            if kink_guard:
                hp, hm = pair(flat, k, h / 2)
                n2 = (hp - hm) / h
                curve = ((fp - 2 * f0 + fm) - 4 * (hp - 2 * f0 + hm)) / h
                bound = max(kink_tol * max(abs(n), abs(n2)), noise)
                if abs(n - n2) > bound or abs(curve) > bound:
                    skipped += 1
                    continue
            idx.append(int(k))
            num.append(n)
        idx, num = np.asarray(idx, dtype=int), np.asarray(num)
        skips.append(skipped)
        an = ga.reshape(-1)[idx]
        err = rel_error(an, num)
        errs.append(float(err.max()) if err.size else 0.0)
        counts.append(int(idx.size))
        if err.size:
            j = int(err.argmax())
            worst.append((int(idx[j]), float(an[j]), float(num[j])))
        else:
            worst.append(())
    return GradReport(names, errs, counts, rel_tol, worst, skips)
