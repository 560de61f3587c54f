"""Command-line entry point: ``convdrop {train,eval,diagnose,inspect}``.

Exit codes: 0 success, 1 a diagnostic failed its criterion, 2 bad config or
usage, 3 training diverged (non-finite loss).  ``CONVDROP_NUM_THREADS`` caps
the BLAS/OpenMP worker threads; ``--threads`` overrides it.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import diagnostics as diag
from .blocks import build_block, census, conv_weight_count, count_params
from .config import ExperimentConfig, dump_config, load_config
from .data import Dataset, FormatError, read_cifar_files, standardize, synth_dataset
from .dropout import DropSpec, fold_rescale_into_weights
from .errors import ConfigError, ShapeError, StateError
from .network import NetworkSpec, build, num_trainable, preset
from .trainer import TrainingDiverged, evaluate, train, write_metrics_csv

THREADS_ENV = "CONVDROP_NUM_THREADS"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("convdrop")


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    net = cfg.network
    if cfg.data.synth is not None:
        s = cfg.data.synth
        if s.classes != net.num_classes:
            raise ConfigError("data.synth.classes must equal network.num_classes")
        kw = dict(classes=s.classes, size=net.image_size, channels=net.in_channels,
                  snr=s.snr, noise=s.noise)
        tr = synth_dataset(s.n_train, seed=s.seed, label_noise=s.label_noise, **kw)
        # Test labels stay clean: the test split measures the true task.
        te = synth_dataset(s.n_test, seed=s.seed + 1_000_003, **kw)
    else:
        c = cfg.data.cifar
        if net.image_size != 32 or net.in_channels != 3:
            raise ConfigError("CIFAR data needs network.image_size 32 and in_channels 3")
        tr = read_cifar_files(c.train_files, c.num_classes)
        te = (read_cifar_files(c.test_files, c.num_classes) if c.test_files
              else Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, np.int64), c.num_classes))
    if cfg.data.limit_train is not None:
        tr = tr.subset(slice(0, cfg.data.limit_train))
    if len(te):
        tr, te = standardize(tr, te, mode=cfg.data.standardize)
    else:
        (tr,) = standardize(tr, mode=cfg.data.standardize)
    return tr, te


def _out_dir(args, cfg: ExperimentConfig) -> str:
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        cfg.train = dataclasses.replace(cfg.train, **overrides)
    tr, te = load_data(cfg)
    out = _out_dir(args, cfg)
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        fh.write(dump_config(cfg))
    net = build(cfg.network, cfg.train.seed)
    metrics_path = os.path.join(out, "metrics.csv")
    try:
        records = train(net, tr, te, cfg.train, augment=cfg.augment)
    except TrainingDiverged as e:
        write_metrics_csv(metrics_path, e.metrics, cfg.train.record_wall_time)
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    write_metrics_csv(metrics_path, records, cfg.train.record_wall_time)
    np.savez(os.path.join(out, "model.npz"), **net.state_dict())
    summary = {
        "trainable_params": int(num_trainable(net)),
        "epochs": len(records),
        "best_test_error": min((r.test_error for r in records), default=None),
        "final_test_error": records[-1].test_error if records else None,
        "final_train_error": records[-1].train_error if records else None,
        "all_paths_dropped": int(sum(r.all_paths_dropped for r in records)),
    }
    summary = {k: (float(v) if isinstance(v, np.floating) else v) for k, v in summary.items()}
    with open(os.path.join(out, "summary.yaml"), "w") as fh:
        yaml.safe_dump(summary, fh, sort_keys=False)
    print(f"params {summary['trainable_params']}  best test error "
          f"{summary['best_test_error']}  -> {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    model = args.model or os.path.join(out, "model.npz")
    if not os.path.exists(model):
        raise ConfigError(f"{model}: no saved model (run train first or pass --model)")
    _, te = load_data(cfg)
    net = build(cfg.network, cfg.train.seed)
    with np.load(model) as state:
        net.load_state_dict(state)
    if args.fold:
        fold_rescale_into_weights(net)
    loss, err = evaluate(net, te)
    with open(os.path.join(out, "eval.csv"), "w") as fh:
        fh.write("split,loss,error\n")
        fh.write(f"test,{loss:.6g},{err:.6g}\n")
    print(f"test loss {loss:.4f}  test error {err:.2f}%")
    return EXIT_OK


def _gradcheck_rows(args):
    drops = [DropSpec(args.level, args.p)] if args.p > 0 else []
    spec = preset(args.preset, drops=drops, image_size=args.image_size)
    net = build(spec, args.seed)
    x = np.random.default_rng(args.seed).normal(size=(4, 3, args.image_size, args.image_size))
    report = diag.grad_check(net, x, tol=args.tol)
    return str(report), report.rows(f"gradcheck[{args.preset}]"), report.passed


def _bnvar_rows(args):
    probe = diag.bn_variance_probe(args.block_kind, args.p, n_batches=args.batches,
                                   seed=args.seed)
    if args.block_kind == "traditional_preact":
        target, tol = 1.0 / (1.0 - args.p), 0.10
    else:
        target, tol = 1.0, 0.02
    rows = probe.rows(target, tol)
    return str(probe), rows, all(r.passed for r in rows)


def _ensemble_rows(args):
    report = diag.ensemble_equivalence(args.unit, args.p, draws=args.draws, relu=args.relu,
                                       seed=args.seed)
    text = str(report)
    if args.relu and not report.passed:
        text += ("\nThe ReLU makes the unit nonlinear, so the mean over masks no longer "
                 "equals the folded-weight output (Jensen gap); the equivalence only "
                 "holds before the nonlinearity.")
    return text, report.rows(), report.passed


def _droppath_rows(args):
    report = diag.droppath_expectation(args.paths, args.p, draws=args.draws, seed=args.seed)
    return str(report), report.rows(), report.passed


PROBES = {"gradcheck": _gradcheck_rows, "bnvar": _bnvar_rows,
          "ensemble": _ensemble_rows, "droppath": _droppath_rows}


def cmd_diagnose(args) -> int:
    text, rows, passed = PROBES[args.probe](args)
    print(text)
    csv_text = diag.rows_to_csv(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"diagnose_{args.probe}.csv"), "w") as fh:
            fh.write(csv_text)
    if args.csv:
        print(csv_text, end="")
    return EXIT_OK if passed else EXIT_FAIL


def inspect_table(spec: NetworkSpec) -> str:
    """Per-block conv parameter counts and the per-stage gated-unit census."""
    lines = [f"{'stage':>5} {'block':>5} {'kind':22s} {'c_in':>5} {'C':>5} {'P':>4} {'d':>4} "
             f"{'stride':>6} {'conv_params':>11} {'formula':>9}"]
    size = spec.image_size
    census_rows = []
    for si, stage in enumerate(spec.block_configs()):
        for bi, cfg in enumerate(stage):
            n = conv_weight_count(build_block(cfg))
            formula = count_params(cfg)
            P, d = (cfg.P, cfg.d) if cfg.kind == "droppath_bottleneck" else (1, cfg.C)
            lines.append(f"{si:>5} {bi:>5} {cfg.kind:22s} {cfg.c_in:>5} {cfg.C:>5} {P:>4} {d:>4} "
                         f"{cfg.stride:>6} {n:>11,} {formula:>9,}"
                         + ("" if n == formula else "  MISMATCH"))
            size //= cfg.stride
        if stage:
            cfg = stage[0]
            P, d = (cfg.P, cfg.d) if cfg.kind == "droppath_bottleneck" else (1, cfg.C)
            c = census(len(stage), P, d, size, size)
            census_rows.append(f"{si:>5} {len(stage):>3} {P:>4} {d:>4} {size:>3}x{size:<3} "
                               f"{c.neuron:>10,} {c.channel:>8,} {c.path:>6,} {c.layer:>6,}")
    lines.append("")
    lines.append(f"{'stage':>5} {'L':>3} {'P':>4} {'d':>4} {'WxH':>7} "
                 f"{'neuron':>10} {'channel':>8} {'path':>6} {'layer':>6}")
    lines.extend(census_rows)
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    cfg = load_config(args.config, check_paths=False)
    print(inspect_table(cfg.network))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="convdrop", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help=f"cap worker threads (overrides ${THREADS_ENV})")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on the test split")
    p.add_argument("config")
    p.add_argument("--model", help="model .npz (default: <out>/model.npz)")
    p.add_argument("--out")
    p.add_argument("--fold", action="store_true",
                   help="fold weight_rescale dropout into the weights before evaluating")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", help="run a numerical probe")
    p.add_argument("--probe", required=True, choices=sorted(PROBES))
    p.add_argument("--preset", default="wrn-micro")
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--level", default="channel", choices=["neuron", "channel"])
    p.add_argument("--block-kind", default="traditional_preact",
                   choices=["traditional_preact", "proposed_preact"])
    p.add_argument("--unit", default="conv", choices=["conv", "linear"])
    p.add_argument("--p", type=float, default=0.25)
    p.add_argument("--paths", type=int, default=8)
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--relu", action="store_true")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true", help="also print CSV rows")
    p.add_argument("--out", help="directory for the CSV report")
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("inspect", help="print parameter counts and the dropout census")
    p.add_argument("config")
    p.set_defaults(fn=cmd_inspect)
    return ap


def _thread_cap(args) -> int | None:
    if args.threads is not None:
        return args.threads
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cap = _thread_cap(args)
        with threadpool_limits(limits=cap):
            return args.fn(args)
    except (ConfigError, FormatError, ShapeError, StateError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
