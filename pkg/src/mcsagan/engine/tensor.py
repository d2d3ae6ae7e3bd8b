"""Reverse-mode autodiff tensor.

The tape is implicit: every recorded operation creates a :class:`Node`
holding its parent tensors and a vector-Jacobian product (VJP) callback.
VJPs are themselves written in terms of engine ops, so running backward
with ``create_graph=True`` records a new differentiable graph over the
gradients — that is what powers the second-order path needed by the
gradient penalty.

Gradient flow rules:

* a tensor participates in the tape iff ``requires_grad`` is true;
* results of ops require grad iff any input does and grad mode is on;
* ``backward`` accumulates ``.grad`` on leaves; :func:`grad` returns
  gradients for arbitrary (possibly intermediate) tensors instead.

A graph is consumed by a plain ``backward``/``grad`` call; touching it
again without ``retain_graph``/``create_graph`` raises, which catches
the classic re-backward-without-re-forward bug.
"""

from __future__ import annotations

import functools
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(dtype) -> np.dtype:
    """Accepts 'f32'/'f64', numpy dtypes, or None (-> f32)."""
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str) and dtype in _DTYPES:
        return np.dtype(_DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"unsupported dtype {dtype!r}; engine is f32/f64 only")
    return dt


class GradMode:
    """Global tape switch (single thread of control per run)."""

    enabled: bool = True


class no_grad:
    """Context manager / decorator that disables tape recording."""

    def __enter__(self):
        self._prev = GradMode.enabled
        GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        GradMode.enabled = self._prev
        return False

    def __call__(self, fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            with no_grad():
                return fn(*args, **kwargs)

        return wrapper


class Node:
    """One recorded operation: parents + VJP callback."""

    __slots__ = ("op", "inputs", "vjp", "consumed")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.consumed = False


class Tensor:
    """N-d array with optional tape participation.

    ``data`` is always a contiguous-enough numpy array of f32/f64;
    ``grad`` (leaves only, after ``backward``) is another Tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None or arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.node: Node | None = None

    # ---- construction helpers -------------------------------------------
    @staticmethod
    def from_op(op: str, inputs: Sequence["Tensor"], out_data: np.ndarray,
                vjp: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.grad = None
        if GradMode.enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = Node(op, tuple(inputs), vjp)
        else:
            out.requires_grad = False
            out.node = None
        return out

    # ---- basic introspection --------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The raw buffer (no copy); treat as read-only for graph tensors."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        return out

    def clone_detached(self) -> "Tensor":
        out = self.detach()
        out.data = self.data.copy()
        return out

    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---- autodiff entry points ------------------------------------------
    def backward(self, gradient: "Tensor | None" = None, *,
                 retain_graph: bool = False, create_graph: bool = False) -> None:
        if self.node is None:
            raise RuntimeError(
                "backward on a detached graph: tensor has no recorded operation")
        if gradient is None:
            if self.data.size != 1:
                raise RuntimeError(
                    f"backward needs an explicit gradient for non-scalar output "
                    f"of shape {self.data.shape}")
            gradient = Tensor(np.ones_like(self.data))
        _backprop([self], [gradient], inputs=None,
                  retain_graph=retain_graph, create_graph=create_graph,
                  accumulate_leaves=True)

    # Arithmetic dunders are attached by mcsagan.engine.ops at import time
    # (the ops module owns the graph-building implementations).


def grad(outputs: "Tensor | Sequence[Tensor]",
         inputs: "Tensor | Sequence[Tensor]",
         grad_outputs: "Tensor | Sequence[Tensor] | None" = None,
         *, retain_graph: bool | None = None, create_graph: bool = False,
         allow_unused: bool = False) -> tuple["Tensor | None", ...]:
    """Gradients of ``outputs`` w.r.t. ``inputs`` without touching ``.grad``.

    ``inputs`` may be intermediate graph tensors.  With
    ``create_graph=True`` the returned gradients are themselves
    differentiable (and the graph is implicitly retained).
    """
    outs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    ins = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if grad_outputs is None:
        seeds = []
        for o in outs:
            if o.data.size != 1:
                raise RuntimeError("grad needs grad_outputs for non-scalar outputs")
            seeds.append(Tensor(np.ones_like(o.data)))
    else:
        seeds = [grad_outputs] if isinstance(grad_outputs, Tensor) else list(grad_outputs)
    if retain_graph is None:
        retain_graph = create_graph
    gmap = _backprop(outs, seeds, inputs=ins,
                     retain_graph=retain_graph, create_graph=create_graph,
                     accumulate_leaves=False)
    result = []
    for t in ins:
        g = gmap.get(id(t))
        if g is None and not allow_unused:
            raise RuntimeError(
                "one of the requested tensors does not participate in the graph "
                "(pass allow_unused=True to get None instead)")
        result.append(g)
    return tuple(result)


def _topo_order(roots: Iterable[Tensor]) -> list[Tensor]:
    """Tensors with nodes, parents before children (iterative DFS)."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # id(node) -> 0 in progress, 1 done
    stack: list[tuple[Tensor, bool]] = [(r, False) for r in roots if r.node is not None]
    while stack:
        t, expanded = stack.pop()
        nid = id(t.node)
        if expanded:
            if state.get(nid) != 1:
                state[nid] = 1
                order.append(t)
            continue
        if nid in state:
            continue
        state[nid] = 0
        stack.append((t, True))
        for p in t.node.inputs:
            if p.node is not None and id(p.node) not in state:
                stack.append((p, False))
    return order


def _backprop(outputs: list[Tensor], seeds: list[Tensor],
              inputs: list[Tensor] | None, retain_graph: bool,
              create_graph: bool, accumulate_leaves: bool) -> dict[int, Tensor]:
    from mcsagan.engine import ops  # late import; ops depends on this module

    for o, s in zip(outputs, seeds):
        if o.data.shape != s.data.shape:
            raise RuntimeError(
                f"gradient shape {s.data.shape} does not match output {o.data.shape}")

    grads: dict[int, Tensor] = {}
    for o, s in zip(outputs, seeds):
        grads[id(o)] = s if id(o) not in grads else ops.add(grads[id(o)], s)

    wanted = {id(t) for t in inputs} if inputs is not None else None
    order = _topo_order(outputs)
    leaves: dict[int, Tensor] = {}

    def run_vjps():
        for t in reversed(order):
            node = t.node
            g = grads.pop(id(t), None)
            if wanted is not None and id(t) in wanted and g is not None:
                grads[id(t)] = g  # keep requested intermediates
            if g is None:
                continue
            if node.consumed:
                raise RuntimeError(
                    f"graph already consumed at op '{node.op}'; re-run forward or "
                    f"use retain_graph=True")
            parent_grads = node.vjp(g)
            for p, pg in zip(node.inputs, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.data.shape != p.data.shape:
                    raise RuntimeError(
                        f"VJP of '{node.op}' produced shape {pg.data.shape} for "
                        f"parent of shape {p.data.shape}")
                cur = grads.get(id(p))
                grads[id(p)] = pg if cur is None else ops.add(cur, pg)
                if accumulate_leaves and p.node is None:
                    leaves[id(p)] = p

    if create_graph:
        run_vjps()
    else:
        with no_grad():
            run_vjps()

    if not (retain_graph or create_graph):
        for t in order:
            node = t.node
            node.consumed = True
            # drop closure and parent references: VJP closures capture
            # activations (sometimes their own output), and waiting for the
            # cycle collector would pin large volumes for many steps
            node.vjp = None
            node.inputs = ()

    if accumulate_leaves:
        for tid, p in leaves.items():
            total = grads.get(tid)
            if total is None:
                continue
            if p.grad is None:
                p.grad = total
            elif create_graph:
                p.grad = ops.add(p.grad, total)
            else:
                with no_grad():
                    p.grad = ops.add(p.grad, total)
    return grads
