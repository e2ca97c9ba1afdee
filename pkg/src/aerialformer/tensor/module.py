"""Parameter containers and the small set of layers shared by the model."""
from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.is_leaf = True


def trunc_normal(shape, std: float = 0.02, rng: np.random.Generator | None = None) -> np.ndarray:
    """Normal(0, std) truncated to [-2*std, 2*std]."""
    rng = rng or np.random.default_rng()
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng or np.random.default_rng()
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Base class: parameters, buffers and child modules found via attributes.

    Attribute insertion order defines parameter path order. Names starting
    with ``_`` and plain lists are not traversed.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _buffer_names(self) -> tuple[str, ...]:
        return ()

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if not name.startswith("_") and isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names():
            yield f"{prefix}{name}", getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own and k not in dict(self.named_buffers())]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise KeyError(f"{name}: checkpoint shape {list(arr.shape)} != "
                                   f"parameter shape {list(p.shape)}")
                p.data = np.ascontiguousarray(arr).copy()
        for module_path, module in self._named_modules():
            for bname in module._buffer_names():
                key = f"{module_path}{bname}"
                if key in state:
                    getattr(module, bname)[...] = state[key]

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child._named_modules(f"{prefix}{name}.")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        self.weight = Parameter(trunc_normal((out_features, in_features), 0.02, rng))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 dilation: int = 1, bias: bool = True, rng: np.random.Generator | None = None):
        self.weight = Parameter(kaiming_normal((cout, cin, k, k), cin * k * k, rng))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 2, stride: int = 2, padding: int = 0,
                 bias: bool = True, rng: np.random.Generator | None = None):
        self.weight = Parameter(kaiming_normal((cin, cout, k, k), cin, rng))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        # length-1 array so it round-trips through checkpoints like the other buffers
        self.num_batches_tracked = np.zeros(1)
        self.momentum, self.eps = momentum, eps

    def _buffer_names(self) -> tuple[str, ...]:
        return ("running_mean", "running_var", "num_batches_tracked")

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            out = F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                               True, self.momentum, self.eps)
            self.num_batches_tracked += 1
            return out
        ready = self.num_batches_tracked[0] > 0
        return F.batch_norm(x, self.weight, self.bias,
                            self.running_mean if ready else None,
                            self.running_var if ready else None, False, self.momentum, self.eps)
