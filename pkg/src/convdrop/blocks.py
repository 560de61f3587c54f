"""Pre-activation building blocks with built-in drop operations.

Four block kinds are provided:

``traditional_preact``
    BN -> ReLU -> Conv -> Drop.  The mask perturbs whatever BN comes next.
``proposed_preact``
    BN -> ReLU -> Drop -> Conv.  The mask acts after normalization.
``droppath_bottleneck``
    1x1 reduce (C -> P*d), grouped 3x3 (P groups), 1x1 expand (P*d -> C),
    each conv preceded by BN and ReLU, plus a shortcut.  Path gates act on
    the P channel slices right before the expanding conv.
``residual_droplayer``
    Two proposed units with a shortcut; a layer gate can drop the whole
    residual transform.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .dropout import Drop, DropSpec, PathGate, apply_drop_layer
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, Layer, ReLU

KINDS = ("traditional_preact", "proposed_preact", "droppath_bottleneck", "residual_droplayer")


@dataclass
class BlockConfig:
    kind: str
    C: int
    P: int = 1
    d: int | None = None
    kernel: int = 3
    drops: tuple[DropSpec, ...] = ()
    c_in: int | None = None
    stride: int = 1
    order: str = "proposed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.C < 1:
            raise ConfigError("C must be positive")
        if self.c_in is None:
            self.c_in = self.C
        if isinstance(self.drops, DropSpec):
            self.drops = (self.drops,)
        self.drops = tuple(self.drops)
        if self.order not in ("proposed", "traditional"):
            raise ConfigError(f"unknown unit order {self.order!r}")
        if self.kind == "droppath_bottleneck":
            if self.P < 1 or self.P & (self.P - 1):
                raise ConfigError(f"path count P={self.P} must be a power of 2")
            if self.d is None:
                self.d = max(1, self.C // (2 * self.P))
            if self.d < 1:
                raise ConfigError("per-path width d must be >= 1")
            if 9 * self.d >= 2 * self.C:
                warnings.warn(f"9*d={9 * self.d} is not small against 2*C={2 * self.C}",
                              stacklevel=2)
        levels = [s.level for s in self.drops]
        if len(set(levels)) != len(levels):
            raise ConfigError("at most one DropSpec per level in a block")
        if "path" in levels and self.kind != "droppath_bottleneck":
            raise ConfigError("drop-path needs a droppath_bottleneck block")
        if "layer" in levels:
            if self.kind in ("traditional_preact", "proposed_preact"):
                raise ConfigError("drop-layer needs a block with a shortcut")
            if not self.identity_shortcut:
                raise ConfigError("drop-layer needs a shape-preserving residual transform")
        if self.kind in ("traditional_preact", "proposed_preact"):
            if sum(lv in ("neuron", "channel") for lv in levels) > 1:
                raise ConfigError("a plain unit holds exactly one drop op")

    @property
    def identity_shortcut(self) -> bool:
        return self.c_in == self.C and self.stride == 1

    def spec(self, level: str) -> DropSpec | None:
        for s in self.drops:
            if s.level == level:
                return s
        return None

    @property
    def unit_spec(self) -> DropSpec | None:
        return self.spec("neuron") or self.spec("channel")


class PreActUnit(Layer):
    """BN -> ReLU -> Conv with an optional drop op before or after the conv."""

    def __init__(self, c_in, c_out, kernel=3, stride=1, spec=None, order="proposed", groups=1):
        super().__init__()
        self.order = order
        self.bn = BatchNorm2d(c_in)
        self.relu = ReLU()
        self.conv = Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2,
                           groups=groups, floor=stride > 1)
        self.drop = Drop(spec) if spec is not None else None
        if order == "proposed":
            seq = [self.bn, self.relu, self.drop, self.conv]
        else:
            seq = [self.bn, self.relu, self.conv, self.drop]
        self.seq = [m for m in seq if m is not None]

    def children(self):
        return self.seq

    def forward(self, x):
        for m in self.seq:
            x = m.forward(x)
        return x

    def backward(self, grad):
        for m in reversed(self.seq):
            grad = m.backward(grad)
        return grad

    def rescale_specs(self):
        return [self.drop.spec] if self.drop is not None else []

    def fold_rescale(self):
        # Before the conv the drop feeds it; after the conv it scales its output.
        # Either way the conv weights absorb the factor exactly.
        if self.drop is not None:
            self.conv.params["weight"] *= self.drop.spec.keep
            self.drop.folded = True


class LayerGated(Layer):
    """Mixin state for blocks that can drop their residual transform."""

    def _init_gate(self, spec):
        self.layer_spec = spec
        self.layer_id = 0
        self.stream = spec.seed_stream if spec else 0
        self.draw = (0, 0)
        self.frozen = False
        self.gate = 1
        self.folded = False

    def _draw_gate(self):
        spec = self.layer_spec
        if spec is None or not self.training:
            return 1
        if self.frozen:
            return self.gate
        if spec.p == 0:
            return 1
        key = (rng.MASK, self.stream, self.draw[0], self.draw[1], self.layer_id)
        return int(rng.bernoulli_keep(key, (1,), spec.keep)[0])

    def freeze(self, on=True):
        self.frozen = on


class ResidualBlock(LayerGated):
    """``Y = F(X) + shortcut(X)`` where F is two 3x3 pre-activation units."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        spec = cfg.unit_spec
        self.units = [
            PreActUnit(cfg.c_in, cfg.C, cfg.kernel, cfg.stride, spec, cfg.order),
            PreActUnit(cfg.C, cfg.C, cfg.kernel, 1, spec, cfg.order),
        ]
        self.proj = None if cfg.identity_shortcut else Conv2d(cfg.c_in, cfg.C, 1, stride=cfg.stride,
                                                                  floor=cfg.stride > 1)
        self._init_gate(cfg.spec("layer"))

    def children(self):
        return self.units + ([self.proj] if self.proj else [])

    def transform(self, x):
        for u in self.units:
            x = u.forward(x)
        return x

    def forward(self, x):
        self.gate = self._draw_gate()
        if self.layer_spec is not None:
            if self.training and self.gate == 0:
                return x.copy()
            fx = self.transform(x)
            scaling = self.layer_spec if not self.folded else DropSpec("layer", 0.0)
            return apply_drop_layer(x, fx, self.gate, scaling, self.training)
        fx = self.transform(x)
        return fx + (self.proj.forward(x) if self.proj else x)

    def backward(self, grad):
        spec = self.layer_spec
        if spec is not None and self.training and self.gate == 0:
            return grad
        gf = grad
        if spec is not None and not self.folded:
            gf = grad * (spec.train_scale if self.training else
                         (1.0 if spec.scaling == "inverted" else spec.keep))
        for u in reversed(self.units):
            gf = u.backward(gf)
        return gf + (self.proj.backward(grad) if self.proj else grad)

    def rescale_specs(self):
        return [self.layer_spec] if self.layer_spec is not None else []

    def fold_rescale(self):
        if self.layer_spec is not None:
            self.units[-1].conv.params["weight"] *= self.layer_spec.keep
            self.folded = True


class BottleneckBlock(LayerGated):
    """Grouped-conv bottleneck whose P groups act as independent paths."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        C, P, d, c_in = cfg.C, cfg.P, cfg.d, cfg.c_in
        spec = cfg.unit_spec
        k = cfg.kernel
        self.reduce = PreActUnit(c_in, P * d, 1, 1, spec)
        self.group = PreActUnit(P * d, P * d, k, cfg.stride, spec, groups=P)
        self.expand = PreActUnit(P * d, C, 1, 1, spec)
        self.path_gate = PathGate(cfg.spec("path"), P) if cfg.spec("path") else None
        if self.path_gate is not None:
            # Gates sit after the pre-activation, right before the expanding conv.
            seq = self.expand.seq
            self.expand.seq = seq[:-1] + [self.path_gate, seq[-1]]
        self.proj = None if cfg.identity_shortcut else Conv2d(c_in, C, 1, stride=cfg.stride,
                                                              floor=cfg.stride > 1)
        self._init_gate(cfg.spec("layer"))

    def children(self):
        return [self.reduce, self.group, self.expand] + ([self.proj] if self.proj else [])

    def transform(self, x):
        return self.expand.forward(self.group.forward(self.reduce.forward(x)))

    def forward(self, x):
        self.gate = self._draw_gate()
        if self.layer_spec is not None:
            if self.training and self.gate == 0:
                return x.copy()
            fx = self.transform(x)
            scaling = self.layer_spec if not self.folded else DropSpec("layer", 0.0)
            return apply_drop_layer(x, fx, self.gate, scaling, self.training)
        fx = self.transform(x)
        return fx + (self.proj.forward(x) if self.proj else x)

    def backward(self, grad):
        spec = self.layer_spec
        if spec is not None and self.training and self.gate == 0:
            return grad
        gf = grad
        if spec is not None and not self.folded:
            gf = grad * (spec.train_scale if self.training else
                         (1.0 if spec.scaling == "inverted" else spec.keep))
        gf = self.reduce.backward(self.group.backward(self.expand.backward(gf)))
        return gf + (self.proj.backward(grad) if self.proj else grad)

    def rescale_specs(self):
        specs = [self.layer_spec] if self.layer_spec is not None else []
        if self.path_gate is not None:
            specs.append(self.path_gate.spec)
        return specs

    def fold_rescale(self):
        w = self.expand.conv.params["weight"]
        if self.path_gate is not None:
            w *= self.path_gate.spec.keep
            self.path_gate.folded = True
        if self.layer_spec is not None:
            w *= self.layer_spec.keep
            self.folded = True


class PlainBlock(PreActUnit):
    """A single traditional or proposed pre-activation unit."""

    def __init__(self, cfg: BlockConfig):
        order = "traditional" if cfg.kind == "traditional_preact" else "proposed"
        super().__init__(cfg.c_in, cfg.C, cfg.kernel, cfg.stride, cfg.unit_spec, order)
        self.cfg = cfg


def build_block(cfg: BlockConfig) -> Layer:
    if cfg.kind in ("traditional_preact", "proposed_preact"):
        block = PlainBlock(cfg)
    elif cfg.kind == "droppath_bottleneck":
        block = BottleneckBlock(cfg)
    else:
        block = ResidualBlock(cfg)
    number_sites(block)
    return block


def number_sites(layer: Layer, start: int = 0) -> int:
    """Give every gate-drawing module a distinct ``layer_id``; returns the next id."""
    i = start
    for m in layer.modules():
        if hasattr(m, "layer_id"):
            m.layer_id = i
            i += 1
    return i


def block_forward(block: Layer, x, training: bool = True, draw_id=(0, 0)):
    """Run one block in the given mode with masks keyed by ``draw_id``."""
    block.train(training)
    for m in block.modules():
        if hasattr(m, "draw"):
            m.draw = tuple(draw_id[:2])
    return block.forward(x)


def conv_weight_count(block: Layer) -> int:
    """Number of conv weights found by walking the constructed block."""
    return sum(m.params["weight"].size for m in block.modules() if isinstance(m, Conv2d))


def count_params(cfg: BlockConfig) -> int:
    """Conv weight count of a block from its geometry (BN affine excluded)."""
    k2 = cfg.kernel * cfg.kernel
    proj = 0 if cfg.identity_shortcut else cfg.c_in * cfg.C
    if cfg.kind in ("traditional_preact", "proposed_preact"):
        return cfg.c_in * cfg.C * k2
    if cfg.kind == "residual_droplayer":
        return cfg.c_in * cfg.C * k2 + cfg.C * cfg.C * k2 + proj
    P, d = cfg.P, cfg.d
    if cfg.c_in == cfg.C and cfg.kernel == 3:
        return P * d * (2 * cfg.C + 9 * d) + proj
    return cfg.c_in * P * d + P * d * d * k2 + P * d * cfg.C + proj


def bn_param_count(cfg: BlockConfig) -> int:
    if cfg.kind in ("traditional_preact", "proposed_preact"):
        return 2 * cfg.c_in
    if cfg.kind == "residual_droplayer":
        return 2 * cfg.c_in + 2 * cfg.C
    return 2 * cfg.c_in + 4 * cfg.P * cfg.d


def eq8_width(C: int, P: int) -> int:
    """Per-path width keeping ``P * d`` at ``C / 2``."""
    return max(1, C // (2 * P))


@dataclass(frozen=True)
class ComponentCensus:
    neuron: int
    channel: int
    path: int
    layer: int

    def as_dict(self):
        return {"neuron": self.neuron, "channel": self.channel,
                "path": self.path, "layer": self.layer}


def census(L: int, P: int, d: int, W: int, H: int) -> ComponentCensus:
    """Gated-unit counts per dropout level for one stage."""
    if min(L, P, d, W, H) < 1:
        raise ConfigError("census dimensions must be positive")
    return ComponentCensus(neuron=L * P * d * W * H, channel=L * P * d, path=L * P, layer=L)
