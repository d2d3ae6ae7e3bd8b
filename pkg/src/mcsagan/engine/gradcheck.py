"""Central finite-difference gradient checking (f64).

``gradcheck`` compares analytic gradients of a scalarized function
against central differences.  Vector-valued functions are scalarized by
a fixed random projection so one backward pass covers every output.
Relative error uses max(|analytic|, |numeric|, floor) in the denominator
so near-zero gradients fall back to an absolute comparison.

The floor matters: central differences carry absolute noise of roughly
|f| * ulp / eps no matter how small the true derivative is, so a
coordinate whose gradient sits below the floor is effectively checked
at absolute tolerance tol * floor.  That product has to stay above the
noise (~1e-9 for |f| ~ 10 at eps = 1e-5) or exact gradients fail.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mcsagan.engine.tensor import Tensor


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-3) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
              wrt: Sequence[int] | None = None, eps: float = 1e-5,
              tol: float = 1e-4, max_coords: int = 64,
              seed: int = 0, floor: float = 1e-3) -> float:
    """Check d(proj . fn)/d(inputs[i]) for i in ``wrt``; returns worst error.

    All checked inputs must be f64 leaves with requires_grad=True.
    ``max_coords`` caps the number of perturbed coordinates per input
    (deterministically subsampled) to keep large-tensor checks fast.
    Raises AssertionError above ``tol``.
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    for i in wrt:
        t = inputs[i]
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck input {i} must be f64, got {t.dtype}")
        if not t.requires_grad or t.node is not None:
            raise ValueError(f"gradcheck input {i} must be a requires_grad leaf")

    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)
    proj_t = Tensor(proj, dtype="f64")

    def scalarize(o: Tensor) -> float:
        return float(np.sum(o.data * proj))

    loss = (out * proj_t).sum()
    for t in inputs:
        t.grad = None
    loss.backward()

    worst = 0.0
    for i in wrt:
        t = inputs[i]
        if t.grad is None:
            raise AssertionError(f"gradcheck: input {i} received no gradient")
        analytic = t.grad.data.reshape(-1)
        flat = t.data.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else np.sort(rng.choice(n, size=max_coords, replace=False)))
        numeric = np.empty(coords.size)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = scalarize(fn(*inputs))
            flat[c] = orig - eps
            f_minus = scalarize(fn(*inputs))
            flat[c] = orig
            numeric[j] = (f_plus - f_minus) / (2 * eps)
        err = max_rel_error(analytic[coords], numeric, floor=floor)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradcheck failed for input {i}: max rel error {err:.3e} > {tol:.1e}")
    return worst
