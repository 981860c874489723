"""Reverse-mode differentiation substrate.

Thin contract layer over torch.autograd: named parameter stores, gradient
records, and helpers for differentiating scalar programs with respect to
parameters and to spatial inputs (including double backprop, needed by the
Eikonal term and by surface normals fed into the radiance network).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np
import torch


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(AutodiffError):
    """A forward or backward value became NaN/Inf; carries the component name."""

    def __init__(self, component: str):
        super().__init__(f"non-finite value in '{component}'")
        self.component = component


class UnsupportedPrimitiveError(AutodiffError):
    pass


# Primitives the differentiable programs in this package are allowed to use.
SUPPORTED_PRIMITIVES = frozenset(
    {
        "affine", "add", "sub", "mul", "div", "neg", "pow", "square", "sqrt",
        "sum", "mean", "dot", "norm", "concat", "clamp",
        "softplus", "relu", "tanh", "sigmoid", "sin", "cos", "abs", "min",
        "exp", "log",
    }
)


def require_supported(primitive: str) -> None:
    """Reject program construction on primitives outside the supported set."""
    if primitive not in SUPPORTED_PRIMITIVES:
        raise UnsupportedPrimitiveError(
            f"primitive '{primitive}' is not supported; allowed: "
            f"{sorted(SUPPORTED_PRIMITIVES)}"
        )


def check_finite(value: torch.Tensor, component: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NonFiniteError(component)
    return value


class ParameterStore:
    """Named flat float arrays (weights, biases, latent codes) with locked shapes.

    Values are torch tensors with requires_grad=True so arbitrary scalar
    programs over them can be differentiated. Shapes are immutable after
    creation and all values must be finite.
    """

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self._params: Dict[str, torch.Tensor] = {}

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise AutodiffError(f"parameter '{name}' already exists")
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone()
        check_finite(t, name)
        t.requires_grad_(True)
        self._params[name] = t
        return t

    def set_(self, name: str, value) -> None:
        old = self._params[name]
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype)
        if tuple(t.shape) != tuple(old.shape):
            raise AutodiffError(
                f"shape of '{name}' is immutable: {tuple(old.shape)} != {tuple(t.shape)}"
            )
        check_finite(t, name)
        with torch.no_grad():
            old.copy_(t)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> Iterable[str]:
        return self._params.keys()

    def tensors(self) -> Mapping[str, torch.Tensor]:
        return dict(self._params)

    def numpy(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self._params.items()}

    def to_dtype(self, dtype: torch.dtype) -> "ParameterStore":
        out = ParameterStore(dtype=dtype)
        for k, v in self._params.items():
            out.add(k, v.detach().to(dtype).numpy())
        return out


@dataclass
class GradientRecord:
    """Loss value plus per-parameter gradients, shapes matching the store."""

    loss: float
    grads: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]


Program = Callable[..., torch.Tensor]


def grad_params(
    program: Program,
    store: ParameterStore,
    inputs: Optional[torch.Tensor] = None,
) -> GradientRecord:
    """Gradient of a scalar program with respect to every store parameter.

    ``program`` is called as ``program(store, inputs)`` (or ``program(store)``
    when inputs is None) and must return a 0-dim tensor.
    """
    out = program(store, inputs) if inputs is not None else program(store)
    if out.dim() != 0:
        raise AutodiffError("program must return a scalar")
    check_finite(out, "program output")
    names = list(store.names())
    params = [store[n] for n in names]
    grads = torch.autograd.grad(out, params, allow_unused=True)
    rec: Dict[str, np.ndarray] = {}
    for name, p, g in zip(names, params, grads):
        if g is None:
            g = torch.zeros_like(p)
        check_finite(g, f"grad[{name}]")
        rec[name] = g.detach().numpy().copy()
    return GradientRecord(loss=float(out.detach()), grads=rec)


def grad_input(
    program: Program,
    store: ParameterStore,
    x,
    create_graph: bool = True,
) -> torch.Tensor:
    """Spatial gradient of a scalar program with respect to its input point(s).

    The result stays attached to the graph (create_graph=True) so scalars
    built from it, e.g. the Eikonal residual, can be pushed back through
    grad_params (double backprop).
    """
    xt = torch.as_tensor(np.asarray(x), dtype=store.dtype) if not torch.is_tensor(x) else x
    if not xt.requires_grad:
        xt = xt.clone().requires_grad_(True)
    out = program(store, xt)
    if out.dim() != 0:
        out = out.sum()
    check_finite(out, "program output")
    (g,) = torch.autograd.grad(out, xt, create_graph=create_graph)
    if not create_graph:
        check_finite(g, "input gradient")
    return g


def spatial_gradient(
    field: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    create_graph: bool = True,
) -> torch.Tensor:
    """Per-point gradient of a batched scalar field, shape matching x."""
    if not x.requires_grad:
        x = x.clone().requires_grad_(True)
    y = field(x)
    (g,) = torch.autograd.grad(y.sum(), x, create_graph=create_graph)
    return g


def deterministic_mode(seed: int = 0) -> None:
    """Single-threaded, seeded torch state for bit-reproducible runs."""
    torch.set_num_threads(1)
    torch.manual_seed(seed)
