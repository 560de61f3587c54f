"""Experiment configuration files.

An experiment is one YAML document with the sections ``network``,
``train``, ``data``, ``augment``, ``drop`` and ``output_dir``::

    network:
      preset: wrn-micro        # or an explicit ``stages`` list
      image_size: 8
    train: {epochs: 2, batch_size: 64, seed: 0}
    data:
      synth: {n_train: 256, n_test: 128, snr: 1.0}
    augment: {enabled: false}
    drop:
      - {level: channel, p: 0.1}
      - {level: layer, p: 0.2, stages: [1, 2]}   # per-stage override
    output_dir: runs/demo

:func:`dump_config` writes the canonical form: presets expanded into
explicit stages and every field spelled out, so ``load -> dump -> load``
gives an equal :class:`ExperimentConfig`.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from .data import AugmentPolicy
from .dropout import DropSpec
from .errors import ConfigError
from .network import NetworkSpec, StageSpec, preset
from .trainer import TrainConfig


@dataclass
class SynthSource:
    n_train: int = 2000
    n_test: int = 1000
    classes: int = 10
    seed: int = 0
    snr: float = 1.0
    noise: float = 0.15
    label_noise: float = 0.0


@dataclass
class CifarSource:
    train_files: list[str] = field(default_factory=list)
    test_files: list[str] = field(default_factory=list)
    num_classes: int = 10


@dataclass
class DataConfig:
    synth: SynthSource | None = None
    cifar: CifarSource | None = None
    standardize: str = "channel"
    limit_train: int | None = None


@dataclass
class ExperimentConfig:
    network: NetworkSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(synth=SynthSource()))
    augment: AugmentPolicy = field(default_factory=lambda: AugmentPolicy(enabled=False))
    output_dir: str = "runs/default"


def _build(cls, raw, path: str, convert=None):
    """Instantiate dataclass ``cls`` from a mapping, naming the field on error."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {', '.join(unknown)}")
    kwargs = dict(raw)
    for key, fn in (convert or {}).items():
        if key in kwargs:
            kwargs[key] = fn(kwargs[key], f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def _drop_list(raw, path):
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: expected a list of drop specs")
    out = []
    for i, item in enumerate(raw):
        item = dict(item or {})
        stages = item.pop("stages", None)
        out.append((_build(DropSpec, item, f"{path}[{i}]"), stages))
    return out


def _stages(raw, path):
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: expected a list of stages")
    return [_build(StageSpec, s, f"{path}[{i}]",
                   {"drops": lambda v, p: None if v is None else
                    [d for d, _ in _drop_list(v, p)]})
            for i, s in enumerate(raw)]


def _network(raw, drops, path="network") -> NetworkSpec:
    raw = dict(raw or {})
    name = raw.pop("preset", None)
    global_drops = [d for d, stages in drops if stages is None]
    try:
        if name is not None:
            if "stages" in raw:
                raise ConfigError("give either preset or stages, not both")
            spec = preset(name, drops=global_drops, **raw)
        else:
            if "stages" not in raw:
                raise ConfigError("missing stages (or a preset name)")
            raw["stages"] = _stages(raw["stages"], f"{path}.stages")
            spec = _build(NetworkSpec, raw, path)
            spec.drops = list(spec.drops) + global_drops
    except ConfigError as e:
        msg = str(e)
        raise ConfigError(msg if msg.startswith(path) else f"{path}: {msg}") from None
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None
    for i, (d, stages) in enumerate(drops):
        if stages is None:
            continue
        for s in stages:
            if not isinstance(s, int) or not 0 <= s < len(spec.stages):
                raise ConfigError(f"drop[{i}].stages: no stage {s!r}")
            st = spec.stages[s]
            if st.drops is None:
                st.drops = list(global_drops)
            st.drops = [x for x in st.drops if x.level != d.level] + [d]
    return spec


def parse_config(doc: dict[str, Any], base_dir: str | None = None,
                 check_paths: bool = True) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    allowed = {"network", "train", "data", "augment", "drop", "output_dir"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown section(s) {', '.join(unknown)}")
    if "network" not in doc:
        raise ConfigError("config: missing section network")
    drops = _drop_list(doc.get("drop"), "drop")
    network = _network(doc["network"], drops)
    train = _build(TrainConfig, doc.get("train"), "train",
                   {"lr_drop_points": lambda v, p: tuple(v)})
    data = _build(DataConfig, doc.get("data", {"synth": {}}), "data", {
        "synth": lambda v, p: _build(SynthSource, v, p),
        "cifar": lambda v, p: _build(CifarSource, v, p),
    })
    if (data.synth is None) == (data.cifar is None):
        raise ConfigError("data: give exactly one of synth or cifar")
    if data.cifar is not None:
        if not data.cifar.train_files:
            raise ConfigError("data.cifar.train_files: at least one file required")
        if base_dir is not None:
            # Relative paths are relative to the config file.
            data.cifar.train_files = [os.path.join(base_dir, f) for f in data.cifar.train_files]
            data.cifar.test_files = [os.path.join(base_dir, f) for f in data.cifar.test_files]
        if check_paths:
            for f in data.cifar.train_files + data.cifar.test_files:
                if not os.path.exists(f):
                    raise ConfigError(f"data.cifar: file not found: {f}")
    augment = _build(AugmentPolicy, doc.get("augment", {"enabled": False}), "augment")
    out = doc.get("output_dir", "runs/default")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir: expected a non-empty path")
    return ExperimentConfig(network, train, data, augment, out)


def load_config(path: str, check_paths: bool = True) -> ExperimentConfig:
    """Read and validate a YAML experiment file.

    Syntax errors and invalid fields raise :class:`ConfigError` with the
    line or the dotted field path in the message.
    """
    if not os.path.exists(path):
        raise ConfigError(f"{path}: no such config file")
    with open(path) as fh:
        text = fh.read()
    return loads_config(text, base_dir=os.path.dirname(os.path.abspath(path)),
                        check_paths=check_paths, source=path)


def loads_config(text: str, base_dir: str | None = None, check_paths: bool = True,
                 source: str = "<string>") -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{source}: YAML syntax error at {where}: {e.problem}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: {e}") from None
    return parse_config(doc, base_dir, check_paths)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg: ExperimentConfig) -> dict:
    """Canonical mapping: explicit stages, network-wide drops under ``drop``."""
    net = _plain(cfg.network)
    drops = net.pop("drops")
    data = {k: v for k, v in _plain(cfg.data).items() if v is not None or k == "limit_train"}
    return {
        "network": net,
        "train": _plain(cfg.train),
        "data": data,
        "augment": _plain(cfg.augment),
        "drop": drops,
        "output_dir": cfg.output_dir,
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)
