"""Network assembly: RefineNet, the atrous dense connection block and ADN.

Architectures are described by plain JSON-serialisable dicts so that a
checkpoint can rebuild the exact graph it was saved from.
"""
from __future__ import annotations

import copy
from typing import Optional, Sequence

import numpy as np

from patchforge import functional as F
from patchforge.errors import ContractError
from patchforge.layers import (
    BatchNorm,
    Conv2d,
    GlobalAvgPool,
    Linear,
    MaxPool,
    Module,
    PReLU,
    Sequential,
)
from patchforge.tensor import Tensor

REFINENET_WIDTHS = (16, 32, 64, 64, 128, 128)
ADC_DILATIONS = (2, 1, 3, 1)
DEFAULT_GROWTH = (8, 16, 32)


class DenseUnit(Module):
    """Pre-activation composite: BN -> PReLU -> 3x3 (possibly atrous) conv."""

    def __init__(self, in_channels: int, growth: int, dilation: int = 1, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = growth
        self.dilation = dilation
        self.bn = self.add("bn", BatchNorm(in_channels, dtype=dtype))
        self.act = self.add("act", PReLU(in_channels, dtype=dtype))
        self.conv = self.add("conv", Conv2d(
            F.ConvSpec.same(in_channels, growth, 3, dilation, bias=False), dtype=dtype))

    def forward(self, x):
        return self.conv(self.act(self.bn(x)))


class DenseBlock(Module):
    """Unit ``i`` sees the concatenation of the block input and all earlier unit outputs."""

    def __init__(self, in_channels: int, growth: int, dilations: Sequence[int], dtype=np.float32):
        super().__init__()
        if in_channels < 1:
            raise ContractError("block input channels must be >= 1")
        self.in_channels = in_channels
        self.growth = growth
        self.dilations = tuple(int(d) for d in dilations)
        self.units: list[DenseUnit] = []
        for i, d in enumerate(self.dilations):
            unit = DenseUnit(in_channels + growth * i, growth, d, dtype=dtype)
            self.units.append(self.add(f"unit{i + 1}", unit))

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.growth * len(self.units)

    def unit_input_channels(self) -> list[int]:
        return [u.in_channels for u in self.units]

    def forward(self, x):
        feats = [x]
        for unit in self.units:
            inp = feats[0] if len(feats) == 1 else F.concat_channels(feats)
            feats.append(unit(inp))
        return F.concat_channels(feats)


def build_adc_block(in_channels: int, growth: int, dilations: Sequence[int] = ADC_DILATIONS,
                    dtype=np.float32) -> DenseBlock:
    """Four densely connected units; atrous (rates 2, 3) units each followed by a plain 3x3."""
    return DenseBlock(in_channels, growth, dilations, dtype=dtype)


class Transition(Module):
    """BN -> PReLU -> 1x1 conv (channel reduction) -> 2x2 max pool."""

    def __init__(self, in_channels: int, out_channels: int, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.bn = self.add("bn", BatchNorm(in_channels, dtype=dtype))
        self.act = self.add("act", PReLU(in_channels, dtype=dtype))
        self.conv = self.add("conv", Conv2d(
            F.ConvSpec(in_channels, out_channels, 1, 1, 1, 0, bias=False), dtype=dtype))
        self.pool = self.add("pool", MaxPool(2))

    def forward(self, x):
        return self.pool(self.conv(self.act(self.bn(x))))


class Network(Module):
    """An assembled classifier. ``forward`` returns N x K logits."""

    def __init__(self, arch: dict):
        super().__init__()
        self.arch = copy.deepcopy(arch)
        self.num_classes = int(arch["num_classes"])
        self.input_channels = int(arch.get("input_channels", 3))
        self.min_size = 1
        self.body: Sequential
        self.head: Sequential

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.body(x))

    def features(self, x: Tensor, layer: str = "penultimate") -> Tensor:
        """Activations feeding the final classifier layer (or a named head stage)."""
        layers = self.feature_layers()
        if layer not in layers:
            raise ContractError(f"unknown layer {layer!r}; choose from {sorted(layers)}")
        h = self.body(x)
        for name, mod in self.head.children():
            h = mod(h)
            if name == layers[layer]:
                return h
        raise ContractError(f"layer {layer!r} not reached")

    def feature_layers(self) -> dict[str, str]:
        raise NotImplementedError

    @property
    def dtype(self):
        return self.parameters()[0].dtype


class RefineNet(Network):
    """Six 3x3 convolutions with five 2x2 max pools, global average pool, FC 256, FC K.

    Each convolution is followed by its pool (where present), then BN and
    PReLU.
    """

    def __init__(self, arch: dict, dtype=np.float32):
        super().__init__(arch)
        widths = tuple(arch.get("widths", REFINENET_WIDTHS))
        hidden = int(arch.get("hidden", 256))
        layers = []
        c = self.input_channels
        for i, w in enumerate(widths):
            n = i + 1
            layers.append((f"conv{n}", Conv2d(F.ConvSpec.same(c, w, 3, bias=False), dtype=dtype)))
            if i < len(widths) - 1:
                layers.append((f"pool{n}", MaxPool(2)))
            layers.append((f"bn{n}", BatchNorm(w, dtype=dtype)))
            layers.append((f"act{n}", PReLU(w, dtype=dtype)))
            c = w
        self.body = self.add("body", Sequential(*layers))
        self.head = self.add("head", Sequential(
            ("gap", GlobalAvgPool()),
            ("fc1", Linear(c, hidden, dtype=dtype)),
            ("act_fc1", PReLU(hidden, dtype=dtype)),
            ("fc2", Linear(hidden, self.num_classes, dtype=dtype)),
        ))
        self.min_size = 2 ** (len(widths) - 1)

    def feature_layers(self):
        return {"penultimate": "act_fc1", "fc1": "act_fc1", "gap": "gap"}


class ADN(Network):
    """Stem conv, three ADC blocks each closed by a transition, NIN head, GAP, FC K."""

    def __init__(self, arch: dict, dtype=np.float32):
        super().__init__(arch)
        stem = int(arch.get("stem_channels", 16))
        growth = tuple(int(g) for g in arch.get("growth_rates", DEFAULT_GROWTH))
        dilations = tuple(int(d) for d in arch.get("dilations", ADC_DILATIONS))
        nin = tuple(int(w) for w in arch.get("nin_channels", (128, 128)))
        ratio = float(arch.get("transition_ratio", 0.5))

        layers = [("stem", Conv2d(F.ConvSpec.same(self.input_channels, stem, 3, bias=False),
                                  dtype=dtype))]
        c = stem
        self.blocks: list[DenseBlock] = []
        self.transitions: list[Transition] = []
        for b, k in enumerate(growth):
            block = build_adc_block(c, k, dilations, dtype=dtype)
            self.blocks.append(block)
            layers.append((f"adc{b + 1}", block))
            c = block.out_channels
            trans = Transition(c, max(1, int(c * ratio)), dtype=dtype)
            self.transitions.append(trans)
            layers.append((f"trans{b + 1}", trans))
            c = trans.out_channels
        for i, w in enumerate(nin):
            unit = Sequential(
                ("bn", BatchNorm(c, dtype=dtype)),
                ("act", PReLU(c, dtype=dtype)),
                ("conv", Conv2d(F.ConvSpec(c, w, 1, 1, 1, 0, bias=False), dtype=dtype)),
            )
            layers.append((f"nin{i + 1}", unit))
            c = w
        self.body = self.add("body", Sequential(*layers))
        self.head = self.add("head", Sequential(
            ("bn", BatchNorm(c, dtype=dtype)),
            ("act", PReLU(c, dtype=dtype)),
            ("gap", GlobalAvgPool()),
            ("fc", Linear(c, self.num_classes, dtype=dtype)),
        ))
        self.min_size = 2 ** len(growth)

    def feature_layers(self):
        return {"penultimate": "gap", "gap": "gap"}

    def channel_trace(self) -> list[tuple[str, int]]:
        trace = [("stem", self.blocks[0].in_channels)]
        for i, (blk, tr) in enumerate(zip(self.blocks, self.transitions), start=1):
            trace.append((f"adc{i}", blk.out_channels))
            trace.append((f"trans{i}", tr.out_channels))
        return trace


_ARCHES = {"refinenet": RefineNet, "adn": ADN}


def build_model(arch: dict, dtype=np.float32, seed: Optional[int] = 0) -> Network:
    """Construct from a descriptor and (unless ``seed`` is None) initialise it."""
    name = arch.get("type")
    if name not in _ARCHES:
        raise ContractError(f"unknown architecture type {name!r}")
    if int(arch.get("num_classes", 0)) < 2:
        raise ContractError("num_classes must be >= 2")
    model = _ARCHES[name](arch, dtype=dtype)
    if seed is not None:
        init_parameters(model, seed)
    return model


def build_refinenet(input_channels: int = 3, num_classes: int = 4, dtype=np.float32,
                    seed: Optional[int] = 0, **extra) -> RefineNet:
    arch = {"type": "refinenet", "input_channels": input_channels, "num_classes": num_classes,
            "widths": list(REFINENET_WIDTHS), "hidden": 256}
    arch.update(extra)
    return build_model(arch, dtype=dtype, seed=seed)


def build_adn(num_classes: int = 4, growth_rates: Sequence[int] = DEFAULT_GROWTH,
              stem_channels: int = 16, input_channels: int = 3, dtype=np.float32,
              seed: Optional[int] = 0, **extra) -> ADN:
    arch = {"type": "adn", "input_channels": input_channels, "num_classes": num_classes,
            "stem_channels": stem_channels, "growth_rates": list(growth_rates),
            "dilations": list(ADC_DILATIONS), "nin_channels": [128, 128],
            "transition_ratio": 0.5}
    arch.update(extra)
    return build_model(arch, dtype=dtype, seed=seed)


def init_parameters(model: Module, seed: int) -> None:
    """He (fan-in) normal weights, zero biases/shifts, unit BN scales, 0.25 PReLU slopes."""
    rng = np.random.default_rng(seed)
    for _, mod in model.modules():
        if isinstance(mod, (Conv2d, Linear)):
            std = np.sqrt(2.0 / mod.fan_in)
            w = mod.weight
            w.data = _frozen(rng.normal(0.0, std, size=w.shape).astype(w.dtype))
            if mod.bias is not None:
                mod.bias.data = _frozen(np.zeros(mod.bias.shape, dtype=w.dtype))
        elif isinstance(mod, BatchNorm):
            st = mod.state
            st.scale.data = _frozen(np.ones(st.channels, dtype=st.scale.dtype))
            st.shift.data = _frozen(np.zeros(st.channels, dtype=st.scale.dtype))
            st.running_mean = np.zeros(st.channels, dtype=st.scale.dtype)
            st.running_var = np.ones(st.channels, dtype=st.scale.dtype)
        elif isinstance(mod, PReLU):
            s = mod.state.slope
            s.data = _frozen(np.full(s.shape, 0.25, dtype=s.dtype))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def weighted_layer_count(model: Module) -> int:
    """Convolutions plus fully connected layers."""
    return sum(1 for _, m in model.modules() if isinstance(m, (Conv2d, Linear)))


def clone_model(model: Network) -> Network:
    return copy.deepcopy(model)
