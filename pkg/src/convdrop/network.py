"""Network assembly from a declarative spec.

A network is ``stem conv -> stages of blocks -> BN -> ReLU -> global average
pool -> linear``.  The first block of every stage after the first downsamples
with a stride-2 conv; its shortcut becomes a 1x1 stride-2 projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .blocks import BlockConfig, KINDS, bn_param_count, build_block, count_params
from .dropout import DropSpec, drop_sites, set_draw
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, ReLU


@dataclass
class StageSpec:
    kind: str
    channels: int
    blocks: int = 1
    widen: int = 1
    paths: int = 1
    width: int | None = None
    stride: int | None = None
    drops: list[DropSpec] | None = None  # None inherits the network-wide specs

    @property
    def C(self) -> int:
        return self.channels * self.widen


@dataclass
class NetworkSpec:
    stages: list[StageSpec]
    stem_channels: int = 16
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    drops: list[DropSpec] = field(default_factory=list)
    dtype: str = "float64"

    def __post_init__(self):
        for st in self.stages:
            if st.kind not in KINDS:
                raise ConfigError(f"unknown block kind {st.kind!r}")
            if st.channels < 1 or st.blocks < 0 or st.widen < 1:
                raise ConfigError(f"invalid stage {st}")
        if self.num_classes < 1 or self.in_channels < 1 or self.image_size < 1:
            raise ConfigError("num_classes, in_channels and image_size must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    def block_configs(self) -> list[list[BlockConfig]]:
        """Per-stage block configs with the network's drop specs attached.

        Levels a block kind cannot host are skipped: path gates only go into
        bottlenecks, layer gates only into identity-shortcut residual blocks.
        """
        out = []
        c_prev = self.stem_channels
        for si, st in enumerate(self.stages):
            stride = st.stride if st.stride is not None else (1 if si == 0 else 2)
            stage = []
            for bi in range(st.blocks):
                c_in = c_prev if bi == 0 else st.C
                s = stride if bi == 0 else 1
                drops = []
                for spec in (st.drops if st.drops is not None else self.drops):
                    if spec.level == "path" and st.kind != "droppath_bottleneck":
                        continue
                    if spec.level == "layer" and (
                            st.kind in ("traditional_preact", "proposed_preact")
                            or c_in != st.C or s != 1):
                        continue
                    drops.append(spec)
                if st.kind in ("traditional_preact", "proposed_preact"):
                    unit = [d for d in drops if d.level in ("neuron", "channel")]
                    drops = unit[:1]
                stage.append(BlockConfig(kind=st.kind, C=st.C, P=st.paths, d=st.width,
                                         drops=tuple(drops), c_in=c_in, stride=s))
            if st.blocks:
                c_prev = st.C
            out.append(stage)
        return out


class Network(Layer):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.folded = False
        self.stem = Conv2d(spec.in_channels, spec.stem_channels, 3, padding=1)
        self.block_cfgs = spec.block_configs()
        self.blocks: list[Layer] = [build_block(c) for stage in self.block_cfgs for c in stage]
        c_last = self.block_cfgs[-1][-1].C if self.blocks else spec.stem_channels
        self.bn = BatchNorm2d(c_last)
        self.relu = ReLU()
        self.pool = GlobalAvgPool()
        self.fc = Linear(c_last, spec.num_classes)
        self.seq = [self.stem, *self.blocks, self.bn, self.relu, self.pool, self.fc]
        for i, m in enumerate(m for m in self.modules() if hasattr(m, "layer_id")):
            m.layer_id = i
        self._check_shapes()

    def children(self):
        return self.seq

    def _check_shapes(self):
        size = self.spec.image_size
        for cfgs in self.block_cfgs:
            for cfg in cfgs:
                if size % cfg.stride:
                    raise ShapeError(
                        f"spatial size {size} not divisible by stride {cfg.stride}")
                size //= cfg.stride
        self.final_size = size

    def forward(self, x):
        if x.shape[1:] != (self.spec.in_channels, self.spec.image_size, self.spec.image_size):
            raise ShapeError(f"network expects (n, {self.spec.in_channels}, "
                             f"{self.spec.image_size}, {self.spec.image_size}), got {x.shape}")
        x = x.astype(self.spec.dtype, copy=False)
        for m in self.seq:
            x = m.forward(x)
        return x

    def backward(self, grad):
        for m in reversed(self.seq):
            grad = m.backward(grad)
        return grad

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: owner.params[key] for name, owner, key in self.named_parameters()}
        for i, m in enumerate(m for m in self.modules() if isinstance(m, BatchNorm2d)):
            state[f"bn{i}.running_mean"] = m.running_mean
            state[f"bn{i}.running_var"] = m.running_var
        return state

    def load_state_dict(self, state):
        for name, owner, key in self.named_parameters():
            owner.params[key][...] = state[name]
        for i, m in enumerate(m for m in self.modules() if isinstance(m, BatchNorm2d)):
            m.running_mean = np.array(state[f"bn{i}.running_mean"])
            m.running_var = np.array(state[f"bn{i}.running_var"])


def build(spec: NetworkSpec, seed: int = 0) -> Network:
    """Construct a network with He-normal conv/linear weights.

    Weights are ``N(0, sqrt(2 / fan_in))`` with ``fan_in = c_in/groups*kh*kw``;
    BN starts at gamma=1, beta=0; linear bias at 0.  Every weight tensor has
    its own keyed stream, so the result depends only on ``seed``.
    """
    net = Network(spec)
    dtype = np.dtype(spec.dtype)
    idx = 0
    for m in net.modules():
        if isinstance(m, (Conv2d, Linear)):
            w = m.params["weight"]
            std = np.sqrt(2.0 / m.fan_in)
            m.params["weight"] = rng.keyed(rng.INIT, seed, idx).normal(0.0, std, w.shape)
            idx += 1
        for k, v in m.params.items():
            m.params[k] = np.ascontiguousarray(v, dtype=dtype)
        if isinstance(m, BatchNorm2d):
            m.running_mean = m.running_mean.astype(dtype)
            m.running_var = m.running_var.astype(dtype)
    return net


def forward(net: Network, x, training: bool = False, draw_id=(0, 0)):
    net.train(training)
    set_draw(net, *draw_id[:2])
    return net.forward(x)


def num_trainable(net: Layer) -> int:
    return net.num_trainable()


def expected_trainable(spec: NetworkSpec) -> int:
    """Trainable scalar count from the block geometry alone."""
    total = spec.in_channels * spec.stem_channels * 9
    cfgs = [c for stage in spec.block_configs() for c in stage]
    total += sum(count_params(c) + bn_param_count(c) for c in cfgs)
    c_last = cfgs[-1].C if cfgs else spec.stem_channels
    return total + 2 * c_last + c_last * spec.num_classes + spec.num_classes


def all_paths_dropped(net: Layer) -> int:
    return sum(getattr(m, "all_dropped", 0) for m in drop_sites(net))


def reset_path_counters(net: Layer):
    for m in drop_sites(net):
        if hasattr(m, "all_dropped"):
            m.all_dropped = 0


PRESETS = {
    "vgg-micro": dict(stem_channels=16, stages=[
        StageSpec("proposed_preact", 16, blocks=1, stride=1),
        StageSpec("proposed_preact", 32, blocks=1, stride=2),
        StageSpec("proposed_preact", 64, blocks=1, stride=2),
        StageSpec("proposed_preact", 64, blocks=1, stride=1),
    ]),
    # depth 10 = 6*1 + 4: one basic block per stage, widening factor 2 on
    # base widths 8/16/32.
    "wrn-micro": dict(stem_channels=16, stages=[
        StageSpec("residual_droplayer", 8, blocks=1, widen=2),
        StageSpec("residual_droplayer", 16, blocks=1, widen=2),
        StageSpec("residual_droplayer", 32, blocks=1, widen=2),
    ]),
    "resnext-micro": dict(stem_channels=32, stages=[
        StageSpec("droppath_bottleneck", 32, blocks=1, paths=8, width=2),
        StageSpec("droppath_bottleneck", 32, blocks=1, paths=8, width=2),
        StageSpec("droppath_bottleneck", 32, blocks=1, paths=8, width=2),
    ]),
}


def preset(name: str, drops=(), **overrides) -> NetworkSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    kw = dict(base)
    kw["stages"] = [replace(s) for s in base["stages"]]
    kw.update(overrides)
    return NetworkSpec(drops=list(drops), **kw)
