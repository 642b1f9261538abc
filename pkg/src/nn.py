"""
Parameter containers shared by the encoder, alignment and fusion components
"""

from typing import Dict, List

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import ShapeError


class Module:
    """
    Base class for anything that owns parameter tensors.

    Parameters are discovered from instance attributes in definition order:
    tensors with `requires_grad`, nested modules and lists of modules.
    """

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[key] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{key}.{i}."))
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """x @ W + b over the last axis; W has shape (d_in, d_out)"""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = ad.uniform_fan_in(rng, (d_in, d_out), d_in, name="weight")
        self.bias = ad.zeros_parameter((d_out,), name="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError("linear", [x.shape, self.weight.shape])
        out = ad.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias

    def zero_(self) -> "Linear":
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)
        return self


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ad.ones_parameter((d,), name="gamma")
        self.beta = ad.zeros_parameter((d,), name="beta")
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)
