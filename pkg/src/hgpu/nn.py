"""Parameter containers and the small set of layers the model is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import BatchNormState, Tensor, batch_norm, conv2d, parameter


class Module:
    """Attribute-registered parameter tree with a train/eval switch."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable state (BN running statistics)."""
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, BatchNormState):
                yield full + ".running_mean", value.running_mean
                yield full + ".running_var", value.running_var
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 dilation: int = 1, bias: bool = True):
        if k % 2 == 0:
            raise ValueError("only odd kernel sizes are supported")
        fan_in = cin * k * k
        # He init for ReLU stacks
        self.weight = parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k)))
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.state = BatchNormState(channels, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, self.training)


def is_decay_exempt(name: str) -> bool:
    """Biases and BN affine parameters are not weight-decayed."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "gamma", "beta") or leaf.startswith("b_")
