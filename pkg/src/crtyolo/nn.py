"""Parameter containers and the small layer set the detector is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .errors import InvalidArgumentError, InvalidShapeError
from .tensor import Tensor, relu, sigmoid, silu

ACTIVATIONS = {"silu": silu, "sigmoid": sigmoid, "relu": relu, "identity": lambda x: x}


def get_activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")


def parameter(data: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``.

    Buffers (non-trainable state such as running statistics) are numpy arrays
    registered through :meth:`register_buffer`.
    """

    training = True

    def __init__(self):
        self._buffer_names: list[str] = []
        self.training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffer_names" not in self.__dict__:
            self._buffer_names = []
        self._buffer_names.append(name)
        setattr(self, name, value)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self.__dict__.get("_buffer_names", []):
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
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

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (e.g. float64 for gradcheck)."""
        dtype = np.dtype(dtype)
        for m in self.modules():
            for key, value in vars(m).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for key in m.__dict__.get("_buffer_names", []):
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        expected = set(own_params) | set(own_buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in own_params.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != p.shape:
                    raise InvalidShapeError(f"{name}: checkpoint shape {value.shape} vs model {p.shape}")
                p.data = value.astype(p.dtype).copy()
        for name, buf in own_buffers.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != buf.shape:
                    raise InvalidShapeError(f"{name}: checkpoint shape {value.shape} vs model {buf.shape}")
                buf[...] = value.astype(buf.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True):
        super().__init__()
        if cin % groups or cout % groups:
            raise InvalidShapeError(f"Conv2d: groups={groups} must divide cin={cin} and cout={cout}")
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        fan_in = cin // groups * kernel * kernel
        self.weight = parameter(uniform_fan_in(rng, (cout, cin // groups, kernel, kernel), fan_in))
        self.bias = parameter(uniform_fan_in(rng, (cout,), fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm(Module):
    """Batch normalisation over axis 1 of ``[N, C, ...]`` inputs."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.03):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.eps, self.momentum, self.training)


class GroupNorm(Module):
    def __init__(self, num_groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.num_groups, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = parameter(uniform_fan_in(rng, (cout, cin), cin))
        self.bias = parameter(uniform_fan_in(rng, (cout,), cin)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


class ConvBNAct(Module):
    """Convolution (no bias) -> batch norm -> activation."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 act: str = "silu"):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, bias=False)
        self.bn = BatchNorm(cout)
        self.act_name = act
        self.act = get_activation(act)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(x)))
