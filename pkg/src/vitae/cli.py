"""Command-line entry point: ``vitae <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DataFormatError, NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "VITAE_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Data helpers
# ---------------------------------------------------------------------------

def _load_data(directory: str, split: str, limit: int | None = None):
    """Detect MNIST or CIFAR-10 under ``directory``; return ``(dataset, info)`` normalized."""
    from . import data as D

    d = Path(directory)
    if not d.is_dir():
        raise DataFormatError(f"data directory {d} does not exist")
    names = {p.name for p in d.iterdir()}
    if any(n.startswith("train-images") for n in names):
        ds = D.load_mnist(d, split)
        info = {"name": "mnist", "mean": list(D.MNIST_MEAN), "std": list(D.MNIST_STD)}
    elif "data_batch_1.bin" in names:
        files = [d / f"data_batch_{i}.bin" for i in range(1, 6) if f"data_batch_{i}.bin" in names]
        ds = D.read_cifar10(files if split == "train" else [d / "test_batch.bin"])
        info = {"name": "cifar10", "mean": list(D.CIFAR_MEAN), "std": list(D.CIFAR_STD)}
    else:
        raise DataFormatError(f"{d} holds neither MNIST IDX files nor CIFAR-10 binary batches")
    if limit:
        ds = ds.subset(slice(0, limit))
    ds = D.Dataset(D.normalize(ds.images, info["mean"], info["std"]), ds.labels, ds.num_classes)
    return ds, info


def _augmenter(info: dict):
    from . import data as D

    if info["name"] != "cifar10":
        return None
    ops = [D.PadCrop(4), D.HFlip(0.5)]
    return lambda images, seed: D.augment(images, ops, seed)


def _config_for(args, ds):
    from .config import parse_config, preset

    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text())
    else:
        cfg = preset(args.preset)
    overrides = {"in_chans": ds.images.shape[1], "num_classes": ds.num_classes, "input_size": ds.images.shape[2]}
    return cfg.copy(**overrides)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .checkpoint import describe, load_checkpoint, model_from_checkpoint, save_checkpoint
    from .model import build
    from .training import OptimConfig, evaluate, fit

    train, info = _load_data(args.data, "train", args.limit)
    test, _ = _load_data(args.data, "test", args.test_limit)
    if args.init:
        model = model_from_checkpoint(load_checkpoint(args.init))
    else:
        model = build(_config_for(args, train), seed=args.seed)
    optim = OptimConfig(lr=args.lr, batch_size=args.batch_size, weight_decay=args.weight_decay,
                        layer_decay=args.layer_decay)

    def show(rec):
        if "acc" in rec:
            print(f"epoch {rec['epoch']}: test accuracy {rec['acc']:.4f}", flush=True)
        elif rec["step"] % args.print_every == 0:
            print(f"step {rec['step']}: loss {rec['loss']:.4f} lr {rec['lr']:.2e}", flush=True)

    augment = None if args.no_augment else _augmenter(info)
    log = fit(model, train, args.epochs, seed=args.seed, optim=optim, eval_set=test, augment=augment,
              log_path=args.log, on_record=show)
    acc = log.accuracies[-1] if log.accuracies else evaluate(model, test)
    if args.out:
        save_checkpoint(model, args.out, {**describe(model), "data": info})
    print(json.dumps({"final_loss": log.losses[-1], "test_accuracy": acc}))
    return EXIT_OK


def cmd_pretrain_mim(args) -> int:
    from .checkpoint import describe, save_checkpoint
    from .mim import build_mim, pretrain_step
    from .training import AdamW, cosine_lr

    train, info = _load_data(args.data, "train", args.limit)
    cfg = _config_for(args, train)
    enc, dec = build_mim(cfg, patch=args.patch, seed=args.seed)

    class Pair:
        def named_parameters(self):
            yield from enc.named_parameters("encoder.")
            yield from dec.named_parameters("decoder.")

    opt = AdamW(Pair(), lr=args.lr, weight_decay=args.weight_decay)
    steps = math.ceil(len(train) / args.batch_size) * args.epochs
    warmup = int(0.05 * steps)
    step = 0
    from .rng import make_rng

    for epoch in range(args.epochs):
        for images, _ in train.batches(args.batch_size, make_rng(args.seed, 10, epoch)):
            loss = pretrain_step(enc, dec, images, args.ratio, (args.seed << 32) | step)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite reconstruction loss at step {step}")
            opt.step(cosine_lr(step, steps, args.lr, 0.0, warmup))
            opt.zero_grad()
            if step % args.print_every == 0:
                print(f"step {step}: mim loss {loss:.4f}", flush=True)
            step += 1
    if args.out:
        save_checkpoint(enc, args.out, {**describe(enc), "data": info})
    print(json.dumps({"final_loss": loss, "steps": step}))
    return EXIT_OK


def cmd_inflate(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .mim import inflate_checkpoint

    try:
        out = inflate_checkpoint(load_checkpoint(args.inp))
    except (ShapeError, ConfigError) as exc:
        raise CheckpointError(str(exc)) from None
    save_checkpoint(out, args.out)
    print(f"inflated {sum(1 for n in out.tensors if n.endswith('weight') and '.pcm.' in '.' + n)} PCM kernels -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, model_from_checkpoint
    from .training import evaluate

    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    test, _ = _load_data(args.data, "test", args.limit)
    print(json.dumps({"test_accuracy": evaluate(model, test)}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .analysis import model_report
    from .config import PRESET_NAMES

    names = list(PRESET_NAMES) if args.all else (args.preset or ["vitae-t"])
    report = model_report(names)
    sys.stdout.write(report.text)
    if args.jsonl:
        Path(args.jsonl).write_text(report.jsonl())
    return EXIT_OK


def cmd_attn_dist(args) -> int:
    from . import tensor as T
    from .analysis import attention_distances
    from .checkpoint import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.ckpt)).eval()
    test, _ = _load_data(args.data, "test", args.limit)
    with T.no_grad():
        _, stats = model(T.Tensor(test.images.astype(model.dtype)), capture_stats=True)
    dists = attention_distances(stats)
    if args.layer != "all":
        if args.layer not in dists:
            raise UsageError(f"unknown layer {args.layer!r}; choose from {', '.join(dists)}")
        dists = {args.layer: dists[args.layer]}
    for name, v in dists.items():
        print(f"{name:<14} {v:8.3f} px")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import OPS, check_cell, grad_check, op_cases

    if args.op and args.op != "all" and args.op not in OPS:
        raise UsageError(f"unknown op {args.op!r}; choose from {', '.join(OPS)}")
    ops = [] if args.cell and not args.op else (list(OPS) if args.op in (None, "all") else [args.op])
    cells = [args.cell] if args.cell else ([] if args.op else ["rc", "nc"])
    failed = 0
    for seed in range(args.seeds):
        cases = op_cases(seed) if ops else {}
        for op in ops:
            for label, f, x in cases[op]:
                rep = grad_check(f, x, args.tol)
                failed += not rep.passed
                print(f"seed {seed} {op:<14} {label:<16} max_rel_err {rep.max_rel_err:.2e} {'ok' if rep else 'FAIL'}")
        for kind in cells:
            reps = check_cell(kind, seed, args.tol)
            worst = max(r.max_rel_err for r in reps.values())
            bad = [n for n, r in reps.items() if not r.passed]
            failed += len(bad)
            print(f"seed {seed} cell {kind}: {len(reps)} tensors, max_rel_err {worst:.2e} {'ok' if not bad else 'FAIL ' + ','.join(bad)}")
    if failed:
        raise NumericError(f"{failed} gradient checks failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every stochastic path")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for a fixed reduction order")
    common.add_argument("--threads", type=int, default=None, help=f"BLAS thread count (env {THREADS_ENV})")

    p = _Parser(prog="vitae", description="ViTAE / ViTAEv2 at desk scale.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def model_flags(sp):
        sp.add_argument("--preset", default="tiny-desk")
        sp.add_argument("--config", help="JSON model config file (overrides --preset)")
        sp.add_argument("--data", required=True, help="directory with MNIST IDX or CIFAR-10 binary files")
        sp.add_argument("--epochs", type=int, default=1)
        sp.add_argument("--batch-size", type=int, default=128)
        sp.add_argument("--weight-decay", type=float, default=0.05)
        sp.add_argument("--limit", type=int, default=None, help="use the first N training samples")
        sp.add_argument("--out", help="checkpoint path to write")
        sp.add_argument("--print-every", type=int, default=50)

    sp = sub.add_parser("train", parents=[common], help="supervised training")
    model_flags(sp)
    sp.add_argument("--lr", type=float, default=None, help="peak learning rate (default: 5e-4 * batch / 512)")
    sp.add_argument("--test-limit", type=int, default=None)
    sp.add_argument("--log", help="line-delimited JSON training log")
    sp.add_argument("--init", help="initialize from a checkpoint (e.g. an inflated MIM encoder)")
    sp.add_argument("--layer-decay", type=float, default=None)
    sp.add_argument("--no-augment", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("pretrain-mim", parents=[common], help="masked-image-modeling pretraining")
    model_flags(sp)
    sp.add_argument("--ratio", type=float, default=0.75)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--patch", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain_mim)

    sp = sub.add_parser("inflate", parents=[common], help="zero-pad 1x1 PCM kernels to 3x3")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_inflate)

    sp = sub.add_parser("eval", parents=[common], help="test accuracy of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--limit", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", parents=[common], help="parameter and MAC report against reference values")
    sp.add_argument("--preset", action="append")
    sp.add_argument("--all", action="store_true")
    sp.add_argument("--jsonl", help="also write the records as line-delimited JSON")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("attn-dist", parents=[common], help="mean attention distance per layer")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--layer", default="all")
    sp.add_argument("--limit", type=int, default=32, help="number of test images")
    sp.set_defaults(func=cmd_attn_dist)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    sp.add_argument("--op", help="primitive name or 'all'")
    sp.add_argument("--cell", choices=["rc", "nc"])
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit(args):
    n = 1 if args.deterministic else args.threads
    if n is None and os.environ.get(THREADS_ENV):
        n = int(os.environ[THREADS_ENV])
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        with _thread_limit(args):
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
