"""Dense-tensor engine: reverse-mode autodiff, numeric primitives, Adam."""

from mcsagan.engine.tensor import (
    GradMode,
    Node,
    Tensor,
    grad,
    no_grad,
)
from mcsagan.engine import ops
from mcsagan.engine.module import Buffer, Module, Parameter
from mcsagan.engine.optim import Adam, MultiStepLR
from mcsagan.engine.gradcheck import gradcheck, max_rel_error

__all__ = [
    "Adam",
    "Buffer",
    "GradMode",
    "Module",
    "MultiStepLR",
    "Node",
    "Parameter",
    "Tensor",
    "grad",
    "gradcheck",
    "max_rel_error",
    "no_grad",
    "ops",
]
