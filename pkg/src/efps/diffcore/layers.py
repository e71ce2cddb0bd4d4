"""Parameterized layers built on the autodiff tensor.

Modules own their parameters as Tensors and expose `parameters()` /
`named_parameters()` by walking attributes, nested modules, and module
lists.  Weights draw from a caller-supplied numpy Generator so a seed fixes
every parameter in the model.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DiffError, Tensor, batch_norm, conv2d


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / fan_in), the ReLU-gain fan-in rule."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class: parameter discovery, train/eval switching."""

    def __init__(self):
        self.training = True

    def modules(self):
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield value
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item
                        yield from item.modules()

    def named_parameters(self, prefix: str = ""):
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def train(self):
        self.training = True
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        self.training = False
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self, prefix: str = ""):
        """(name, array) pairs covering parameters and persistent buffers."""
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value.data
            elif isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.state_arrays(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.state_arrays(f"{full}.{i}.")

    def load_state_arrays(self, mapping: dict):
        """Copy arrays from a name -> array mapping into the live model."""
        for name, array in self.state_arrays():
            if name not in mapping:
                raise DiffError(f"checkpoint missing entry {name}")
            src = mapping[name]
            if tuple(src.shape) != tuple(array.shape):
                raise DiffError(
                    f"checkpoint entry {name} has shape {src.shape}, expected {array.shape}"
                )
            np.copyto(array, src)


class Conv2d(Module):
    """2-d cross-correlation with optional padding and stride."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(
            kaiming_uniform(
                rng,
                (out_channels, in_channels, kernel_size, kernel_size),
                fan_in,
                dtype,
            ),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    """Fully connected layer on (N, F_in) inputs."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(
            kaiming_uniform(rng, (in_features, out_features), in_features, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.weight.data.shape[0]:
            raise DiffError(
                f"linear expects {self.weight.data.shape[0]} features, got {x.data.shape[1]}"
            )
        return x.matmul(self.weight) + self.bias
