"""``omniquant`` command line: pretrain, calibrate, eval, report, inspect.

Machine-readable results go to stdout as JSON; human-oriented text goes to
stderr. Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import BASELINES, CalibConfig, ConfigError, NumericalFailure, calibrate_model
from .equivalent import LET_PAIRS
from .metrics import (DataError, Report, act_range_report, block_error_report, clip_histogram, fp_forward,
                      l1_report, perplexity, quant_forward, sample_calibration_segments, stack_segments)
from .model import CheckpointError, TinyModelConfig, canonical_json, read_fp_checkpoint, write_fp_checkpoint
from .packing import (CheckpointFormatError, QuantizedCheckpoint, is_quantized_checkpoint, read_checkpoint,
                      size_report, write_checkpoint)
from .pretrain import CorpusTooSmall, PretrainConfig, pretrain_tiny

log = logging.getLogger("omniquant")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
CLI_METHODS = ("omniquant", "rtn", "smoothquant", "grid-clip")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int(v, lo: int, hi: int | None = None) -> int:
    try:
        n = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"must be an integer, got {v!r}") from None
    if n < lo or (hi is not None and n > hi):
        bound = f">= {lo}" if hi is None else f"in [{lo}, {hi}]"
        raise argparse.ArgumentTypeError(f"must be {bound}, got {n}")
    return n


def _positive(v):
    return _int(v, 1)


def _nonneg(v):
    return _int(v, 0)


def _bits(v):
    return _int(v, 2, 16)


def _group_size(v):
    if v == "channel":
        return None
    return _positive(v)


def _let_pairs(v):
    if v in ("", "none"):
        return ()
    if v == "all":
        return LET_PAIRS
    pairs = tuple(p.strip() for p in v.split(",") if p.strip())
    bad = [p for p in pairs if p not in LET_PAIRS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown pair(s) {bad}; choose from {list(LET_PAIRS)}, 'all' or 'none'")
    return pairs


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="omniquant",
                description="Post-training quantization of a tiny byte-level LM with "
                            "learnable weight clipping and equivalent transforms.")
    p.add_argument("--version", action="version", version=f"omniquant {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="train the tiny byte-level LM")
    s.add_argument("--corpus", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--steps", type=_positive, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--d-model", type=_positive, default=64)
    s.add_argument("--blocks", type=_positive, default=4)
    s.add_argument("--heads", type=_positive, default=4)
    s.add_argument("--context", type=_positive, default=128)
    s.add_argument("--batch-size", type=_positive, default=8)

    s = sub.add_parser("calibrate", help="quantize an FP checkpoint")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--corpus", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--method", choices=CLI_METHODS, default="omniquant")
    s.add_argument("--w-bits", type=_bits, default=4)
    s.add_argument("--a-bits", type=_bits, default=16)
    s.add_argument("--group-size", type=_group_size, default=None, help="INT or 'channel'")
    s.add_argument("--epochs", type=_nonneg, default=None)
    s.add_argument("--samples", type=_nonneg, default=32)
    s.add_argument("--seqlen", type=_positive, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--let-pairs", type=_let_pairs, default=None,
                   help="comma list of qkv,out,qk,fc1, or 'all'/'none'")
    s.add_argument("--scale-init", choices=("smoothquant", "ones"), default="smoothquant")
    s.add_argument("--shift-init", choices=("osplus", "zeros"), default="osplus")
    s.add_argument("--schedule", choices=("simultaneous", "alt-iter", "alt-epoch"), default="simultaneous")
    s.add_argument("--softmax-bits", type=int, choices=(16, 8, 6, 4), default=16)
    s.add_argument("--clip-mode", choices=("lwc", "pact", "lsq", "grid", "minmax"), default=None)
    s.add_argument("--trace", type=Path, default=None, help="also write the per-block loss trace here")

    s = sub.add_parser("eval", help="held-out perplexity")
    s.add_argument("--model", required=True, type=Path, help="FP or quantized checkpoint")
    s.add_argument("--corpus", required=True, type=Path)
    s.add_argument("--seqlen", type=_positive, default=128)

    s = sub.add_parser("report", help="analysis reports")
    s.add_argument("--fp", required=True, type=Path)
    s.add_argument("--quant", required=True, help="QCKPT[,QCKPT...]")
    s.add_argument("--kind", required=True, choices=("l1", "clip-hist", "act-range", "block-error"))
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--corpus", type=Path, default=None, help="probe text (needed except for clip-hist)")
    s.add_argument("--samples", type=_positive, default=8)
    s.add_argument("--seqlen", type=_positive, default=128)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--csv", action="store_true", help="write CSV instead of JSON")

    s = sub.add_parser("inspect", help="dump a quantized checkpoint header")
    s.add_argument("--qckpt", required=True, type=Path)
    return p


def _provenance(args: argparse.Namespace) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v)
           for k, v in sorted(vars(args).items()) if k != "verbose"}
    return {"run_config": cfg, "tool_version": __version__}


def _emit(obj) -> None:
    sys.stdout.write(canonical_json(obj).decode("utf-8") + "\n")
    sys.stdout.flush()


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _read_corpus(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc.strerror}") from None


def _cmd_pretrain(args) -> int:
    corpus = _read_corpus(args.corpus)
    try:
        config = TinyModelConfig(d_model=args.d_model, heads=args.heads, blocks=args.blocks, context=args.context)
    except ValueError as exc:
        raise UsageError(f"--d-model/--heads: {exc}") from None
    train = PretrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed)

    def cb(step, loss):
        if args.verbose and (step % 100 == 0 or step == train.steps - 1):
            _say(f"step {step:5d}  loss {loss:.4f}")

    model, losses = pretrain_tiny(corpus, config, train, cb)
    if not np.isfinite(losses[-1]):
        raise NumericalFailure("pretraining loss is not finite", {"last_loss": losses[-1]})
    write_fp_checkpoint(args.out, model, _provenance(args))
    _emit({"out": str(args.out), "steps": train.steps, "final_loss": losses[-1]})
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    if args.method in BASELINES and args.epochs is not None:
        _say(f"warning: epochs ignored for {args.method}")
    try:
        cfg = CalibConfig(w_bits=args.w_bits, a_bits=args.a_bits, group_size=args.group_size,
                          method=args.method, clip_mode=args.clip_mode, epochs=args.epochs,
                          schedule=args.schedule, let_pairs=args.let_pairs, scale_init=args.scale_init,
                          shift_init=args.shift_init, softmax_bits=args.softmax_bits, seed=args.seed)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    model, _ = read_fp_checkpoint(args.model)
    if args.seqlen > model.config.context:
        raise UsageError(f"--seqlen {args.seqlen} exceeds the model context {model.config.context}")
    if args.group_size and model.config.d_model % args.group_size:
        raise UsageError(f"--group-size {args.group_size} must divide d_model {model.config.d_model}")
    corpus = _read_corpus(args.corpus)
    seg = stack_segments(sample_calibration_segments(corpus, args.samples, args.seqlen, args.seed))
    if len(seg) == 0:
        seg = np.zeros((0, args.seqlen), dtype=np.int64)

    def progress(tr):
        if tr["initial_loss"] is not None:
            _say(f"block {tr['block_index']}: loss {tr['initial_loss']:.6g} -> {tr['final_loss']:.6g} "
                 f"({tr['steps']} steps, {tr['wall_seconds']:.1f}s)")

    qm, traces = calibrate_model(model, seg, cfg, progress)
    ckpt = QuantizedCheckpoint.from_model(qm, _provenance(args))
    write_checkpoint(args.out, ckpt)
    if args.trace:
        args.trace.write_bytes(canonical_json({"blocks": traces, **_provenance(args)}) + b"\n")
    _emit({"out": str(args.out), "blocks": traces})
    return EXIT_OK


def _load_any(path: Path):
    if is_quantized_checkpoint(path):
        return read_checkpoint(path).to_model()
    return read_fp_checkpoint(path)[0]


def _cmd_eval(args) -> int:
    m = _load_any(args.model)
    fwd = quant_forward(m) if hasattr(m, "quant") else fp_forward(m)
    if args.seqlen > m.config.context:
        raise UsageError(f"--seqlen {args.seqlen} exceeds the model context {m.config.context}")
    ppl = perplexity(fwd, _read_corpus(args.corpus), args.seqlen)
    _say(f"ppl {ppl:.4f}")
    _emit({"ppl": ppl})
    return EXIT_OK


def _cmd_report(args) -> int:
    fp, _ = read_fp_checkpoint(args.fp)
    paths = [Path(p) for p in args.quant.split(",") if p]
    quants = {p.stem: read_checkpoint(p).to_model() for p in paths}
    probes = None
    if args.kind != "clip-hist":
        if args.corpus is None:
            raise UsageError(f"--corpus is required for --kind {args.kind}")
        probes = stack_segments(sample_calibration_segments(_read_corpus(args.corpus), args.samples,
                                                            args.seqlen, args.seed))
    if args.kind == "block-error":
        report = block_error_report(fp, quants, probes)
    else:
        parts = {}
        for name, qm in quants.items():
            if args.kind == "l1":
                r = l1_report(fp, qm, probes)
            elif args.kind == "act-range":
                r = act_range_report(fp, qm, probes)
            else:
                r = clip_histogram(qm)
            parts[name] = r.payload
        report = Report(args.kind, parts if len(parts) > 1 else next(iter(parts.values())))
    report.payload["provenance"] = _provenance(args)
    if args.csv:
        args.out.write_text(report.to_csv())
    else:
        args.out.write_bytes(report.to_json() + b"\n")
    _emit({"out": str(args.out), "kind": args.kind})
    return EXIT_OK


def _cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.qckpt)
    sizes = size_report(ckpt)
    header = {k: v for k, v in ckpt.header.items() if k != "tensors"}
    header["n_tensors"] = len(ckpt.manifest)
    for k, v in sizes.items():
        _say(f"{k:>24}: {v:.2f}" if isinstance(v, float) else f"{k:>24}: {v}")
    _emit({"header": header, "sizes": sizes})
    return EXIT_OK


COMMANDS = {"pretrain": _cmd_pretrain, "calibrate": _cmd_calibrate, "eval": _cmd_eval,
            "report": _cmd_report, "inspect": _cmd_inspect}


def _thread_limit():
    n = os.environ.get("OMNIQUANT_THREADS")
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional dependency
        log.warning("OMNIQUANT_THREADS set but threadpoolctl is unavailable")
        return nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _say(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return EXIT_USAGE
    except NumericalFailure as exc:
        _say(f"numerical failure: {exc}")
        _say(json.dumps(exc.snapshot, sort_keys=True))
        return EXIT_NUMERICAL
    except (DataError, CorpusTooSmall, CheckpointError, CheckpointFormatError, FileNotFoundError) as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA
    except ValueError as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())
