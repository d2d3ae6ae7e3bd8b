"""Parameter containers.

A :class:`Module` tracks parameters, buffers, and child modules in
declaration order — that order is the checkpoint blob order, so it must
be stable across runs (plain attribute assignment gives us that via dict
ordering).  Buffers are non-differentiable state that still belongs in
checkpoints (spectral-norm power-iteration vectors, for instance).
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from mcsagan.engine.tensor import Tensor, resolve_dtype


class Parameter(Tensor):
    """A Tensor registered as trainable state when assigned to a Module."""

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Buffer(Tensor):
    """Module state saved in checkpoints but never differentiated."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=False, dtype=dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "frozen", False)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Buffer):
            self._buffers[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    # ---- traversal -------------------------------------------------------
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def named_state(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters then buffers, both in declaration order."""
        yield from self.named_parameters()
        yield from self.named_buffers()

    # ---- bulk operations -------------------------------------------------
    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> "Module":
        """Disable gradients permanently (segmenter contract)."""
        for _, m in self.named_modules():
            object.__setattr__(m, "frozen", True)
        for p in self.parameters():
            p.requires_grad = False
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def to_dtype(self, dtype) -> "Module":
        """In-place cast of parameters and float buffers (gradcheck uses f64)."""
        dt = resolve_dtype(dtype)
        for _, t in self.named_state():
            t.data = t.data.astype(dt)
            t.grad = None
        return self

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values into existing parameters/buffers by name (strict)."""
        own = dict(self.named_state())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise KeyError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in own.items():
            src = arrays[name]
            if tuple(src.shape) != t.shape:
                raise ValueError(
                    f"state '{name}': shape {src.shape} != expected {t.shape}")
            t.data = np.ascontiguousarray(src, dtype=t.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_state()}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Ordered child-module container (indexed like a list)."""

    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]
