"""Stateful layer objects that own parameters and call into ``functional``."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from patchforge import functional as F
from patchforge.tensor import Tensor, flatten, tensor_create


class Module:
    """Minimal container: named children, named parameters, train/eval mode."""

    def __init__(self):
        self._children: dict[str, Module] = {}
        self.training = True

    def add(self, name: str, module: "Module") -> "Module":
        if name in self._children:
            raise ValueError(f"duplicate child name {name!r}")
        self._children[name] = module
        return module

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._children.items())

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def own_parameters(self) -> dict[str, Tensor]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for path, mod in self.modules():
            for name, p in mod.own_parameters().items():
                out[f"{path}.{name}" if path else name] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for path, mod in self.modules():
            for name, b in mod.own_buffers().items():
                out[f"{path}.{name}" if path else name] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.modules():
            mod.training = mode
            mod._on_mode_change()
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _on_mode_change(self) -> None:
        pass

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *named: tuple[str, Module]):
        super().__init__()
        for name, mod in named:
            self.add(name, mod)

    def forward(self, x):
        for _, mod in self.children():
            x = mod(x)
        return x


class Conv2d(Module):
    kind = "conv"

    def __init__(self, spec: F.ConvSpec, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.weight = tensor_create(spec.weight_shape, dtype=dtype, requires_grad=True)
        self.bias = (tensor_create((spec.out_channels,), dtype=dtype, requires_grad=True)
                     if spec.bias else None)

    @property
    def fan_in(self) -> int:
        return self.spec.in_channels * self.spec.kernel[0] * self.spec.kernel[1]

    def own_parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.spec)


class Linear(Module):
    kind = "fc"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = tensor_create((out_features, in_features), dtype=dtype, requires_grad=True)
        self.bias = tensor_create((out_features,), dtype=dtype, requires_grad=True) if bias else None

    @property
    def fan_in(self) -> int:
        return self.in_features

    def own_parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x):
        if x.ndim != 2:
            x = flatten(x)
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.state = F.BatchNormState.create(channels, dtype=dtype, momentum=momentum, eps=eps)

    def _on_mode_change(self):
        self.state.training = self.training

    def own_parameters(self):
        return {"scale": self.state.scale, "shift": self.state.shift}

    def own_buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self.state, name, np.array(value, dtype=self.state.scale.dtype))

    def forward(self, x):
        return F.batch_norm(x, self.state)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25, dtype=np.float32):
        super().__init__()
        self.state = F.PReLUState.create(channels, init=init, dtype=dtype)

    def own_parameters(self):
        return {"slope": self.state.slope}

    def forward(self, x):
        return F.prelu(x, self.state)


class MaxPool(Module):
    def __init__(self, window: int = 2, stride: Optional[int] = None):
        super().__init__()
        self.window = window
        self.stride = stride if stride is not None else window

    def forward(self, x):
        return F.max_pool2d(x, self.window, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x):
        return flatten(F.global_avg_pool2d(x))
