"""Structured dropout at neuron, channel, path and layer granularity.

Gates are Bernoulli(1 - p) draws keyed by ``(seed_stream, epoch, step,
layer)``, so a mask can be reproduced from its key alone.  Two scaling
schemes are supported:

``inverted``
    Survivors are multiplied by ``1 / (1 - p)`` during training and
    inference is the identity.  This is the default.
``weight_rescale``
    Training applies the raw {0, 1} gates.  At inference the gated signal is
    multiplied by ``1 - p``, or the factor is folded into the consuming
    weights once with :func:`fold_rescale_into_weights`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .errors import ConfigError, StateError
from .layers import Layer

LEVELS = ("neuron", "channel", "path", "layer")
SCALINGS = ("inverted", "weight_rescale")


@dataclass(frozen=True)
class DropSpec:
    level: str
    p: float
    scaling: str = "inverted"
    seed_stream: int = 0

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown dropout level {self.level!r}; expected one of {LEVELS}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.p}")
        if self.scaling not in SCALINGS:
            raise ConfigError(f"unknown scaling {self.scaling!r}; expected one of {SCALINGS}")

    @property
    def keep(self) -> float:
        return 1.0 - self.p

    @property
    def train_scale(self) -> float:
        return 1.0 / (1.0 - self.p) if self.scaling == "inverted" else 1.0


@dataclass
class DropMask:
    gates: np.ndarray
    granularity: str
    draw_id: tuple = field(default=(0, 0, 0))


def sample_gates(spec: DropSpec, draw_id, shape) -> np.ndarray:
    epoch, step, layer = draw_id
    if spec.p == 0.0:
        return np.ones(shape)
    return rng.bernoulli_keep((rng.MASK, spec.seed_stream, epoch, step, layer),
                              shape, spec.keep)


def drop_neuron(x, spec: DropSpec, draw_id=(0, 0, 0), training=True, mask=None):
    """One gate per scalar activation.  Returns ``(output, DropMask)``."""
    if not training:
        return x.copy(), None
    gates = sample_gates(spec, draw_id, x.shape) if mask is None else np.asarray(mask, float)
    return x * (gates * spec.train_scale), DropMask(gates, "neuron", tuple(draw_id))


def drop_channel(x, spec: DropSpec, draw_id=(0, 0, 0), training=True, mask=None):
    """One gate per (sample, channel); dropped channels lose their whole map.

    ``mask`` may be given with shape ``(c,)`` or ``(n, c)``.
    """
    if not training:
        return x.copy(), None
    n, c = x.shape[:2]
    if mask is None:
        gates = sample_gates(spec, draw_id, (n, c))
    else:
        gates = np.broadcast_to(np.asarray(mask, float), (n, c))
    scaled = (gates * spec.train_scale).reshape((n, c) + (1,) * (x.ndim - 2))
    return x * scaled, DropMask(gates, "channel", tuple(draw_id))


def drop_path_gates(paths: int, spec: DropSpec, draw_id=(0, 0, 0), batch=None) -> DropMask:
    """One gate per path, or per (sample, path) when ``batch`` is given."""
    if paths < 1:
        raise ConfigError("path count must be >= 1")
    shape = (paths,) if batch is None else (batch, paths)
    return DropMask(sample_gates(spec, draw_id, shape), "path", tuple(draw_id))


def drop_layer_gate(spec: DropSpec, draw_id=(0, 0, 0), has_shortcut=True) -> int:
    if not has_shortcut:
        raise ConfigError("drop-layer needs an identity shortcut")
    return int(sample_gates(spec, draw_id, (1,))[0])


def apply_drop_layer(x, fx, gate: int, spec: DropSpec, training=True):
    """Residual output under a layer gate: ``X`` when dropped."""
    if x.shape != fx.shape:
        raise ConfigError("drop-layer requires a shape-preserving transform")
    if not training:
        return fx + x if spec.scaling == "inverted" else spec.keep * fx + x
    if gate == 0:
        return x.copy()
    return spec.train_scale * fx + x


class Drop(Layer):
    """Neuron- or channel-level dropout site inside a block.

    ``draw`` holds the current ``(epoch, step)``; together with ``layer_id``
    it forms the mask key.  ``freeze()`` pins the last mask so repeated
    forwards see identical gates (used by gradient checks).
    """

    def __init__(self, spec: DropSpec, layer_id: int = 0):
        super().__init__()
        if spec.level not in ("neuron", "channel"):
            raise ConfigError(f"Drop site supports neuron/channel levels, not {spec.level}")
        self.spec = spec
        self.layer_id = layer_id
        self.stream = spec.seed_stream
        self.draw = (0, 0)
        self.folded = False
        self.frozen = False
        self._gates = None
        self._scale = None

    @property
    def draw_id(self):
        return (self.draw[0], self.draw[1], self.layer_id)

    def _new_gates(self, x):
        spec = self.spec
        if spec.p == 0.0:
            return None
        key = (rng.MASK, self.stream) + self.draw_id
        if spec.level == "neuron":
            return rng.bernoulli_keep(key, x.shape, spec.keep)
        return rng.bernoulli_keep(key, x.shape[:2], spec.keep)

    def forward(self, x):
        spec = self.spec
        if not self.training:
            if spec.scaling == "weight_rescale" and not self.folded and spec.p > 0:
                self._scale = spec.keep
                return x * spec.keep
            self._scale = None
            return x
        if not (self.frozen and self._gates is not None):
            self._gates = self._new_gates(x)
        if self._gates is None:
            self._scale = None
            return x
        scale = (self._gates * spec.train_scale).astype(x.dtype, copy=False)
        if spec.level == "channel":
            scale = scale[:, :, None, None]
        self._scale = scale
        return x * scale

    def backward(self, grad):
        return grad if self._scale is None else grad * self._scale

    def freeze(self, on=True):
        self.frozen = on

    @property
    def last_mask(self) -> Optional[DropMask]:
        if self._gates is None:
            return None
        return DropMask(self._gates, self.spec.level, self.draw_id)


class PathGate(Layer):
    """Per-sample path gates on ``paths`` equal channel slices.

    Counts samples whose paths were all dropped in ``all_dropped``.
    """

    def __init__(self, spec: DropSpec, paths: int, layer_id: int = 0):
        super().__init__()
        if spec.level != "path":
            raise ConfigError("PathGate needs a path-level DropSpec")
        self.spec, self.paths, self.layer_id = spec, paths, layer_id
        self.stream = spec.seed_stream
        self.draw = (0, 0)
        self.folded = False
        self.frozen = False
        self.all_dropped = 0
        self._gates = None
        self._scale = None

    @property
    def draw_id(self):
        return (self.draw[0], self.draw[1], self.layer_id)

    def forward(self, x):
        n, c = x.shape[:2]
        if c % self.paths:
            raise ConfigError(f"{c} channels cannot be split into {self.paths} paths")
        spec = self.spec
        if not self.training:
            if spec.scaling == "weight_rescale" and not self.folded and spec.p > 0:
                self._scale = spec.keep
                return x * spec.keep
            self._scale = None
            return x
        if not (self.frozen and self._gates is not None):
            if spec.p == 0.0:
                self._gates = np.ones((n, self.paths))
            else:
                key = (rng.MASK, self.stream) + self.draw_id
                self._gates = rng.bernoulli_keep(key, (n, self.paths), spec.keep)
                self.all_dropped += int((self._gates.sum(axis=1) == 0).sum())
        d = c // self.paths
        scale = np.repeat(self._gates * spec.train_scale, d, axis=1)[:, :, None, None]
        scale = scale.astype(x.dtype, copy=False)
        self._scale = scale
        return x * scale

    def backward(self, grad):
        return grad if self._scale is None else grad * self._scale

    def freeze(self, on=True):
        self.frozen = on

    @property
    def last_mask(self) -> Optional[DropMask]:
        if self._gates is None:
            return None
        return DropMask(self._gates, "path", self.draw_id)


def fold_rescale_into_weights(net):
    """Multiply the weights consuming every gated unit by ``1 - p`` in place.

    Each block implements ``fold_rescale()`` for its own drop sites.  All
    sites must use ``weight_rescale`` scaling.  Folding twice is an error.
    """
    if getattr(net, "folded", False):
        raise StateError("dropout rescale already folded into weights")
    owners = [m for m in net.modules() if hasattr(m, "fold_rescale")]
    for m in owners:
        for spec in m.rescale_specs():
            if spec.scaling != "weight_rescale":
                raise ConfigError("weight folding requires weight_rescale scaling at every site")
    for m in owners:
        m.fold_rescale()
    net.folded = True
    return net


def drop_sites(net):
    return [m for m in net.modules() if isinstance(m, (Drop, PathGate))]


def set_draw(net, epoch: int, step: int):
    for m in net.modules():
        if hasattr(m, "draw"):
            m.draw = (epoch, step)


def set_stream(net, stream: int):
    for m in net.modules():
        if hasattr(m, "stream"):
            m.stream = stream


def freeze_masks(net, on=True):
    for m in net.modules():
        if hasattr(m, "freeze"):
            m.freeze(on)
