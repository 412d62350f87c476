"""Parameter containers and affine layers built on :mod:`spikegan.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter, Tensor


class StateDictError(KeyError):
    """A state mapping does not match a module's parameters."""

    def __init__(self, message: str, keys: list[str], kind: str = "mismatched"):
        super().__init__(message)
        self.keys = keys
        self.kind = kind  # "missing", "unknown", "mismatched"

    def __str__(self) -> str:
        return self.args[0]


class Module:
    """Attribute-walking parameter container.

    Parameters are discovered in attribute-assignment order, recursing into
    sub-modules and lists of sub-modules, which makes the naming stable.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise StateDictError(f"missing parameters: {', '.join(missing)}", missing, "missing")
        unknown = sorted(set(state) - set(own))
        if unknown:
            raise StateDictError(f"unknown parameters: {', '.join(unknown)}", unknown, "unknown")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise StateDictError(f"shape mismatch for {name}: {value.shape} vs {p.shape}", [name])
            p.data = np.require(value, p.dtype, "C")

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0,
                 bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (n_in, n_out), n_in, gain))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + T.expand(T.reshape(self.bias, (1, -1)), y.shape)
        return y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, gain: float = 1.0):
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, gain))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, gain: float = 1.0):
        # each output pixel sees c_in * (kernel / stride)**2 taps
        fan_in = max(1, c_in * (kernel // stride) ** 2)
        self.weight = Parameter(uniform_init(rng, (c_in, c_out, kernel, kernel), fan_in, gain))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class ParameterRegistry:
    """Ordered name -> Parameter mapping that refuses duplicate names."""

    def __init__(self):
        self._items: dict[str, Parameter] = {}

    def add(self, name: str, param: Parameter) -> None:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if any(p is param for p in self._items.values()):
            raise ConfigError(f"parameter registered twice (second name {name!r})")
        param.name = name
        self._items[name] = param

    def rename(self, old: str, new: str) -> None:
        if new in self._items:
            raise ConfigError(f"cannot rename {old!r}: {new!r} already exists")
        items = list(self._items.items())
        self._items = {new if k == old else k: v for k, v in items}
        self._items[new].name = new

    def items(self) -> list[tuple[str, Parameter]]:
        return list(self._items.items())

    def names(self) -> list[str]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items.values())
