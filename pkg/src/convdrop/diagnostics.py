"""Numerical evidence for the dropout/batch-norm behaviour of the blocks.

Every probe returns a report carrying its own pass criterion.  Monte-Carlo
probes state their error bars as a CLT standard error so a pass means
"within ``z_max`` standard errors", never a bare constant.
"""

from __future__ import annotations

import copy
import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .blocks import BlockConfig, BottleneckBlock, build_block
from .dropout import (DropSpec, apply_drop_layer, drop_channel, drop_layer_gate,
                      drop_neuron, freeze_masks, set_draw)
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, Layer, Linear, MaxPool2d, ReLU

Z_MAX = 4.0


@dataclass
class CheckRow:
    probe: str
    metric: str
    value: float
    bound: float
    passed: bool


def rows_to_csv(rows: list[CheckRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["probe", "metric", "value", "bound", "pass"])
    for r in rows:
        w.writerow([r.probe, r.metric, f"{r.value:.6g}", f"{r.bound:.6g}", int(r.passed)])
    return buf.getvalue()


# ---------------------------------------------------------------- gradients

@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    kinks_skipped: int = 0
    failure: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error <= self.tol

    def rows(self, probe="gradcheck"):
        return [CheckRow(probe, name, err, self.tol, err <= self.tol)
                for name, err in self.errors.items()]

    def __str__(self):
        lines = [f"{name:40s} max rel err {err:.3e} over {self.checked[name]} coords"
                 for name, err in self.errors.items()]
        status = "PASS" if self.passed else f"FAIL ({self.failure or 'tolerance exceeded'})"
        lines.append(f"gradcheck {status}: max {self.max_error:.3e} <= tol {self.tol:g}, "
                     f"{self.kinks_skipped} kink-crossing coords resampled")
        return "\n".join(lines)


def _kink_signature(unit: Layer):
    sig = []
    for m in unit.modules():
        if isinstance(m, ReLU):
            sig.append(m._mask.tobytes())
        elif isinstance(m, MaxPool2d):
            sig.append(m._cache[1].tobytes())
    return sig


def _cast_tree(unit: Layer, dtype):
    for m in unit.modules():
        for k, v in m.params.items():
            m.params[k] = v.astype(dtype)
        if isinstance(m, BatchNorm2d) and m.running_mean is not None:
            m.running_mean = m.running_mean.astype(dtype)
            m.running_var = m.running_var.astype(dtype)
    if hasattr(unit, "spec") and hasattr(unit.spec, "dtype"):
        unit.spec = copy.copy(unit.spec)
        unit.spec.dtype = np.dtype(dtype).name


def grad_check(unit: Layer, x: np.ndarray, tol: float = 1e-6, coords: int = 10,
               step: float = 1e-5, seed: int = 0, check_input: bool = True,
               floor: float = 1e-3, dtype=np.float64, training: bool = True) -> GradCheckReport:
    """Compare backward against central differences of ``sum(R * f(x))``.

    ``R`` is a fixed random projection of the output.  Masks are drawn once
    and frozen.  Up to ``coords`` random coordinates per parameter (and of
    the input) are checked; a coordinate whose perturbation flips a ReLU or
    max-pool decision is resampled because the loss is not differentiable
    across it.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.

    With ``dtype=float32`` the analytic gradient comes from a float32 copy
    of the unit and the reference differences from float64.
    ``training=False`` checks the eval-mode graph (BN on running stats).
    """
    report = GradCheckReport(tol)
    ref = copy.deepcopy(unit)
    _cast_tree(ref, np.float64)
    analytic = unit
    if np.dtype(dtype) != np.float64:
        analytic = copy.deepcopy(unit)
        _cast_tree(analytic, dtype)
    x64 = np.asarray(x, dtype=np.float64)

    for u in (ref, analytic):
        u.train(training)
    # Draw masks once in the reference, then share them with the analytic copy.
    ref.forward(x64)
    freeze_masks(ref)
    for a, b in zip(ref.modules(), analytic.modules()):
        if hasattr(a, "_gates"):
            b._gates = a._gates
        if hasattr(a, "gate"):
            b.gate = a.gate
    freeze_masks(analytic)

    out = ref.forward(x64)
    R = rng.keyed(rng.INIT, 99, seed).normal(size=out.shape)
    base_sig = _kink_signature(ref)

    xa = x64.astype(dtype)
    analytic.zero_grad()
    out_a = analytic.forward(xa)
    gx = analytic.backward(R.astype(out_a.dtype))

    def f(xv):
        return float((ref.forward(xv) * R).sum())

    targets = [(name, owner, key) for name, owner, key in ref.named_parameters()]
    a_params = {name: (owner, key) for name, owner, key in analytic.named_parameters()}
    gen = rng.keyed(rng.INIT, 98, seed)

    def check(name, arr, grad_of, evaluate):
        if not np.all(np.isfinite(grad_of)):
            report.failure = f"non-finite gradient in {name}"
            return
        size = arr.size
        pool = list(range(size)) if size <= coords else None
        worst, done, attempts = 0.0, 0, 0
        while done < min(coords, size) and attempts < 20 * coords:
            attempts += 1
            if pool is not None:
                if not pool:
                    break
                flat = pool.pop(0)
            else:
                flat = int(gen.integers(size))
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + step
            fp = evaluate()
            sig_p = _kink_signature(ref)
            arr[idx] = old - step
            fm = evaluate()
            sig_m = _kink_signature(ref)
            arr[idx] = old
            if sig_p != base_sig or sig_m != base_sig:
                report.kinks_skipped += 1
                continue
            num = (fp - fm) / (2 * step)
            ana = float(grad_of[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            done += 1
        report.errors[name] = worst
        report.checked[name] = done
        if done == 0 and report.failure is None:
            report.failure = f"no differentiable coordinate found in {name}"

    for name, owner, key in targets:
        a_owner, a_key = a_params[name]
        g = a_owner.grads[a_key].astype(np.float64)
        check(name, owner.params[key], g, lambda: f(x64))
    if check_input:
        check("input", x64, np.asarray(gx, dtype=np.float64), lambda: f(x64))
    freeze_masks(ref, False)
    freeze_masks(analytic, False)
    return report


# ------------------------------------------------------- batch-norm moments

@dataclass
class MomentProbe:
    layer: str
    block_kind: str
    p: float
    train_mean: np.ndarray
    train_var: np.ndarray
    eval_mean: np.ndarray
    eval_var: np.ndarray
    downstream_ratio: np.ndarray
    predicted: float

    @property
    def ratio(self) -> np.ndarray:
        return self.train_var / self.eval_var

    def max_deviation(self, target: float) -> float:
        return float(np.max(np.abs(self.ratio / target - 1.0)))

    def rows(self, target: float, rel_tol: float):
        dev = self.max_deviation(target)
        probe = f"bnvar[{self.block_kind};p={self.p:g}]"
        return [
            CheckRow(probe, "mean_ratio", float(self.ratio.mean()), target, dev <= rel_tol),
            CheckRow(probe, "max_rel_dev", dev, rel_tol, dev <= rel_tol),
            CheckRow(probe, "downstream_mean_ratio", float(self.downstream_ratio.mean()),
                     float("nan"), True),
        ]

    def __str__(self):
        return (f"{self.block_kind} p={self.p:g} site={self.layer}: train/eval variance ratio "
                f"per channel {np.array2string(self.ratio, precision=4)} "
                f"(mean {self.ratio.mean():.4f}, predicted {self.predicted:.4f}); "
                f"downstream BN input ratio mean {self.downstream_ratio.mean():.4f}")


def _init_probe_weights(block: Layer, seed: int):
    # He-normal kernels, centred per output filter so the block output has
    # zero mean and the gate's variance inflation is not masked by mean shift.
    for i, m in enumerate(m for m in block.modules() if isinstance(m, Conv2d)):
        w = rng.keyed(rng.INIT, seed, 1000 + i).normal(0.0, np.sqrt(2.0 / m.fan_in), m.params["weight"].shape)
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
        m.params["weight"] = w


def bn_variance_probe(block_kind: str, p: float, n_batches: int = 20, seed: int = 0,
                      batch: int = 256, channels: int = 16, spatial: int = 8,
                      level: str = "channel") -> MomentProbe:
    """Train-vs-eval variance of the BN input that a block's mask can reach.

    The block under test feeds a downstream BN.  Inputs are i.i.d. N(0, 1).
    For ``traditional_preact`` the mask sits between the conv and the next
    BN, so the probed site is that downstream BN's input.  For
    ``proposed_preact`` the mask sits between the block's own BN and its
    conv, so the probed site is the block's own BN input.  The downstream
    ratio is reported for both kinds.
    """
    if block_kind not in ("traditional_preact", "proposed_preact"):
        raise ConfigError("bn_variance_probe supports traditional_preact and proposed_preact")
    drops = (DropSpec(level, p),) if p > 0 else ()
    block = build_block(BlockConfig(block_kind, C=channels, drops=drops))
    _init_probe_weights(block, seed)
    own_bn = block.bn

    sums = {k: np.zeros(channels) for k in ("tm", "tv", "em", "ev", "dt", "de")}
    for b in range(n_batches):
        x = rng.keyed(rng.DATA, 7, seed, b).normal(size=(batch, channels, spatial, spatial))
        block.train()
        set_draw(block, 0, b)
        y_train = block.forward(x)
        block.eval()
        y_eval = block.forward(x)
        if block_kind == "traditional_preact":
            site_t, site_e = y_train, y_eval
        else:
            # Input of the block's own BN: identical in both modes by placement.
            site_t = site_e = x
        for key, arr in (("t", site_t), ("e", site_e)):
            sums[key + "m"] += arr.mean(axis=(0, 2, 3))
            sums[key + "v"] += arr.var(axis=(0, 2, 3))
        sums["dt"] += y_train.var(axis=(0, 2, 3))
        sums["de"] += y_eval.var(axis=(0, 2, 3))
    avg = {k: v / n_batches for k, v in sums.items()}
    keep = 1.0 - p
    if block_kind == "traditional_preact" and p > 0:
        # Var of a (1/keep)-scaled Bernoulli(keep) gate on a signal with
        # mean m and variance v:  (v + m^2) / keep - m^2.
        m2 = avg["em"] ** 2
        predicted = float(np.mean((avg["ev"] + m2) / keep - m2) / np.mean(avg["ev"]))
    else:
        predicted = 1.0
    return MomentProbe(
        layer="downstream_bn_input" if block_kind == "traditional_preact" else "block_bn_input",
        block_kind=block_kind, p=p,
        train_mean=avg["tm"], train_var=avg["tv"], eval_mean=avg["em"], eval_var=avg["ev"],
        downstream_ratio=avg["dt"] / avg["de"], predicted=predicted)


# ------------------------------------------------------------- Monte Carlo

@dataclass
class MCReport:
    name: str
    draws: int
    max_abs_dev: float
    max_rel_dev: float
    max_z: float
    z_max: float = Z_MAX
    exact: bool = False

    @property
    def passed(self) -> bool:
        return self.max_z <= self.z_max

    def rows(self):
        return [CheckRow(self.name, "max_z", self.max_z, self.z_max, self.passed),
                CheckRow(self.name, "max_rel_dev", self.max_rel_dev, float("nan"), True)]

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name}: {status} draws={self.draws} max|dev|={self.max_abs_dev:.3e} "
                f"rel={self.max_rel_dev:.3e} max z={self.max_z:.2f} (bound {self.z_max:g} SE)")


class _Moments:
    """Running sums of deviations from the first sample.

    The shift keeps the variance free of cancellation, so draws that are
    all identical give a standard error of exactly zero.
    """

    def __init__(self):
        self.n, self.s1, self.s2 = 0, 0.0, 0.0
        self.shift = 0.0

    def add(self, batch):
        if self.n == 0:
            self.shift = batch[0].copy()
        dev = batch - self.shift
        self.n += batch.shape[0]
        self.s1 = self.s1 + dev.sum(axis=0)
        self.s2 = self.s2 + (dev * dev).sum(axis=0)

    def mean_and_se(self):
        m = self.s1 / self.n
        var = np.maximum(self.s2 / self.n - m * m, 0.0)
        return self.shift + m, np.sqrt(var / self.n)


def _compare(name, moments: _Moments, target, exact_tol=1e-12) -> MCReport:
    mean, se = moments.mean_and_se()
    dev = np.abs(mean - target)
    scale = max(float(np.abs(target).max()), 1e-300)
    # Elements with no sampling variance must match to rounding.
    degenerate = se <= exact_tol * (1.0 + np.abs(target))
    z = np.where(degenerate, np.where(dev <= 1e-9 * (1.0 + np.abs(target)), 0.0, np.inf),
                 dev / np.where(degenerate, 1.0, se))
    return MCReport(name, moments.n, float(dev.max()), float(dev.max() / scale),
                    float(z.max()), exact=bool(degenerate.all()))


def _chunks(draws, chunk):
    done, i = 0, 0
    while done < draws:
        m = min(chunk, draws - done)
        yield i, m
        done += m
        i += 1


def ensemble_equivalence(unit: str = "conv", p: float = 0.5, draws: int = 100_000,
                         relu: bool = False, seed: int = 0, chunk: int = 5000) -> MCReport:
    """Monte-Carlo mean of raw-gated outputs against the weight-folded unit.

    Training applies {0, 1} gates without rescale; the folded unit has its
    weights multiplied by ``1 - p``.  Linear units make the two agree in
    expectation; appending a ReLU breaks that (Jensen gap).
    """
    if unit == "conv":
        layer = Conv2d(4, 3, 3, padding=1)
        x = rng.keyed(rng.DATA, 11, seed).normal(size=(1, 4, 5, 5))
        spec = DropSpec("channel", p, scaling="weight_rescale")
        drop = drop_channel
    elif unit == "linear":
        layer = Linear(8, 4)
        x = rng.keyed(rng.DATA, 11, seed).normal(size=(1, 8))
        spec = DropSpec("neuron", p, scaling="weight_rescale")
        drop = drop_neuron
    else:
        raise ConfigError(f"unknown unit {unit!r}")
    w = rng.keyed(rng.INIT, 12, seed).normal(0, np.sqrt(2.0 / layer.fan_in), layer.params["weight"].shape)
    layer.params["weight"] = w
    folded = copy.deepcopy(layer)
    folded.params["weight"] = w * spec.keep

    def act(y):
        return np.maximum(y, 0.0) if relu else y

    target = act(folded.forward(x))[0]
    mom = _Moments()
    for i, m in _chunks(draws, chunk):
        xs = np.repeat(x, m, axis=0)
        masked, _ = drop(xs, spec, (seed, i, 0))
        mom.add(act(layer.forward(masked)))
    name = f"ensemble[{unit}{'+relu' if relu else ''};p={p:g}]"
    return _compare(name, mom, target)


def _copy_params(src: Layer, dst: Layer):
    for (_, so, sk), (_, do, dk) in zip(src.named_parameters(), dst.named_parameters()):
        do.params[dk] = so.params[sk].copy()


def _bottleneck_pair(C, P, d, p):
    gated = BottleneckBlock(BlockConfig("droppath_bottleneck", C=C, P=P, d=d,
                                        drops=(DropSpec("path", p),)))
    return gated, BottleneckBlock(BlockConfig("droppath_bottleneck", C=C, P=P, d=d))


def droppath_expectation(P: int = 8, p: float = 0.25, draws: int = 100_000, d: int = 2,
                         seed: int = 0, chunk: int = 5000, spatial: int = 4) -> MCReport:
    """MC mean of the gated bottleneck transform against the ungated one.

    The input is replicated along the batch axis; per-sample path gates make
    each copy an independent draw.  BN sits upstream of the gates, so its
    batch statistics equal those of the single input.
    """
    C = 2 * P * d
    with warnings.catch_warnings():
        # Tiny probe geometries trip the bottleneck-width warning on purpose.
        warnings.simplefilter("ignore")
        block, plain = _bottleneck_pair(C, P, d, p)
    for i, m in enumerate(m for m in block.modules() if isinstance(m, Conv2d)):
        m.params["weight"] = rng.keyed(rng.INIT, 13, seed, i).normal(
            0, np.sqrt(2.0 / m.fan_in), m.params["weight"].shape)
    _copy_params(block, plain)
    x = rng.keyed(rng.DATA, 14, seed).normal(size=(1, C, spatial, spatial))
    plain.train()
    target = (plain.forward(x) - x)[0]
    block.train()
    mom = _Moments()
    for i, m in _chunks(draws, chunk):
        set_draw(block, seed, i)
        xs = np.repeat(x, m, axis=0)
        mom.add(block.forward(xs) - xs)
    return _compare(f"droppath[P={P};p={p:g}]", mom, target)


def unbiasedness(level: str, p: float = 0.25, draws: int = 100_000, seed: int = 0,
                 chunk: int = 10_000) -> MCReport:
    """MC mean of an inverted-scaled drop operator against its input."""
    if level == "path":
        return droppath_expectation(P=4, p=p, draws=draws, seed=seed, chunk=chunk)
    spec = DropSpec(level, p)
    x = rng.keyed(rng.DATA, 15, seed).normal(size=(1, 4, 3, 3))
    mom = _Moments()
    if level in ("neuron", "channel"):
        op = drop_neuron if level == "neuron" else drop_channel
        for i, m in _chunks(draws, chunk):
            out, _ = op(np.repeat(x, m, axis=0), spec, (seed, i, 0))
            mom.add(out)
        return _compare(f"unbiased[{level};p={p:g}]", mom, x[0])
    if level == "layer":
        fx = rng.keyed(rng.DATA, 16, seed).normal(size=x.shape)
        # One gate per forward pass; gate statistics fold in as a two-point mix.
        gates = np.array([drop_layer_gate(spec, (seed, i, 0)) for i in range(draws)])
        on = int(gates.sum())
        mom.n = draws
        y1 = apply_drop_layer(x, fx, 1, spec)[0]
        y0 = apply_drop_layer(x, fx, 0, spec)[0]
        mom.s1 = on * y1 + (draws - on) * y0
        mom.s2 = on * y1 ** 2 + (draws - on) * y0 ** 2
        return _compare(f"unbiased[layer;p={p:g}]", mom, (fx + x)[0])
    raise ConfigError(f"unknown level {level!r}")
