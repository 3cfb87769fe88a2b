"""Calibration sampling, perplexity, and analysis reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .calibrate import QuantizedModel
from .equivalent import flatness_ratio
from .model import LINEARS, ModelWeights, block_core, canonical_json, embed, head, logits

SCHEMA_VERSION = 1
REPORT_KINDS = ("l1", "clip-hist", "act-range", "block-error", "ppl")
HIST_BINS = 32


class DataError(ValueError):
    pass


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    offset: int
    ids: np.ndarray = field(repr=False, compare=False)


def sample_calibration_segments(corpus: bytes, n: int = 32, length: int = 128, seed: int = 0) -> list[Segment]:
    """``n`` windows of ``length`` bytes at uniform seeded offsets (duplicates allowed)."""
    if len(corpus) < length:
        raise DataError(f"corpus has {len(corpus)} bytes, shorter than segment length {length}")
    if n < 0:
        raise DataError("n must be >= 0")
    data = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, len(data) - length + 1, size=n)
    return [Segment(int(o), data[o:o + length]) for o in offsets]


def stack_segments(segments: Sequence[Segment]) -> np.ndarray:
    if not segments:
        return np.zeros((0, 0), dtype=np.int64)
    return np.stack([s.ids for s in segments])


def perplexity(forward: Callable[[np.ndarray], np.ndarray], corpus: bytes, length: int = 128,
               stride: int | None = None, batch: int = 32) -> float:
    """``exp`` of the mean next-byte NLL (natural log).

    A window starting at ``s`` feeds ``corpus[s:s+L]`` and is scored on
    ``corpus[s+1:s+L+1]``. With ``stride < L`` only positions not scored by an
    earlier window count, so every target byte is scored exactly once.
    """
    data = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
    if len(data) < 2:
        raise DataError("corpus is empty (need at least two bytes)")
    stride = length if stride is None else stride
    if not 0 < stride <= length:
        raise DataError(f"stride must lie in (0, {length}]")
    span = min(length, len(data) - 1)
    starts = list(range(0, len(data) - span, stride))
    nll_sum, count, scored_to = 0.0, 0, 0
    for b0 in range(0, len(starts), batch):
        chunk = starts[b0:b0 + batch]
        x = np.stack([data[s:s + span] for s in chunk])
        y = np.stack([data[s + 1:s + span + 1] for s in chunk])
        lg = np.asarray(forward(x), dtype=np.float64)
        lg = lg - lg.max(axis=-1, keepdims=True)
        logp = lg - np.log(np.exp(lg).sum(axis=-1, keepdims=True))
        tok = np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
        for row, s in zip(tok, chunk):
            first = max(0, scored_to - s)
            nll_sum -= float(row[first:].sum())
            count += span - first
            scored_to = s + span
    return math.exp(nll_sum / count)


def fp_forward(model: ModelWeights) -> Callable[[np.ndarray], np.ndarray]:
    m = model.astype(np.float32)
    return lambda ids: logits(m, ids)


def quant_forward(qm: QuantizedModel) -> Callable[[np.ndarray], np.ndarray]:
    m = qm.dense_model(np.float32)
    heads, a_bits, sm = qm.config.heads, qm.quant.a_bits, qm.quant.softmax_bits

    def fwd(ids):
        x = embed(m, ids)
        for b in m.blocks:
            x = block_core(x, b, heads, a_bits, sm)
        return head(m, x).data

    return fwd


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class Report:
    kind: str
    payload: dict
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in REPORT_KINDS:
            raise ValueError(f"report kind must be one of {REPORT_KINDS}, got {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "schema_version": self.schema_version, "payload": self.payload}

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict())

    def to_csv(self) -> str:
        """Flatten nested payload into ``key,value`` rows (dotted keys, list indices)."""
        rows = []

        def walk(prefix, v):
            if isinstance(v, Mapping):
                for k in sorted(v):
                    walk(f"{prefix}.{k}" if prefix else str(k), v[k])
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    walk(f"{prefix}.{i}", item)
            else:
                rows.append((prefix, v))

        walk("", self.payload)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(rows)
        return buf.getvalue()


def _as_quantized(m) -> QuantizedModel | None:
    return m if isinstance(m, QuantizedModel) else None


def _dense(m) -> ModelWeights:
    return m.dense_model(np.float64) if isinstance(m, QuantizedModel) else m.astype(np.float64)


def _run_blocks(model, ids: np.ndarray, capture: bool = False):
    """Final hidden state and (optionally) per-block captures, in float64."""
    d = _dense(model)
    q = _as_quantized(model)
    a_bits, sm = (q.quant.a_bits, q.quant.softmax_bits) if q else (16, 16)
    x = embed(d, ids)
    caps = []
    for b in d.blocks:
        cap = {} if capture else None
        x = block_core(x, b, d.config.heads, a_bits, sm, cap)
        caps.append(cap)
    return x.data, caps


def l1_report(fp: ModelWeights, quant, probes: np.ndarray) -> Report:
    """Mean absolute weight distance per linear, and last-block output distance over probes."""
    q = _dense(quant)
    if fp.config != q.config:
        raise ArchitectureMismatch(f"model configs differ: {fp.config} vs {q.config}")
    f = fp.astype(np.float64)
    weights = {}
    for i, (bf, bq) in enumerate(zip(f.blocks, q.blocks)):
        for name in LINEARS:
            weights[f"blocks.{i}.{name}"] = float(np.abs(getattr(bf, name) - getattr(bq, name)).mean())
    probes = np.asarray(probes)
    out_fp, _ = _run_blocks(fp, probes)
    out_q, _ = _run_blocks(quant, probes)
    act = float(np.abs(out_fp - out_q).mean())
    return Report("l1", {"weight_l1": weights, "weight_l1_mean": float(np.mean(list(weights.values()))),
                         "last_block_activation_l1": act, "n_probes": int(len(probes))})


def clip_histogram(strengths: Mapping[int, Mapping[str, tuple]] | QuantizedModel) -> Report:
    """32-bin histograms on [0, 1] of learned ``gamma``/``beta`` per block.

    Accepts either a quantized model or ``{block: {linear: (gamma, beta)}}``
    with strengths already passed through the sigmoid.
    """
    if isinstance(strengths, QuantizedModel):
        strengths = {i: b.strengths for i, b in enumerate(strengths.blocks)}
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    blocks = {}
    for i in sorted(strengths):
        entry = {}
        for which, idx in (("gamma", 0), ("beta", 1)):
            vals = [np.asarray(v[idx], dtype=np.float64).reshape(-1) for _, v in sorted(strengths[i].items())]
            vals = np.concatenate(vals) if vals else np.zeros(0)
            counts, _ = np.histogram(vals, bins=edges)
            entry[which] = {"counts": counts.astype(int).tolist(), "groups": int(vals.size),
                            "mean": float(vals.mean()) if vals.size else None}
        blocks[str(i)] = entry
    return Report("clip-hist", {"bins": HIST_BINS, "edges": edges.tolist(), "blocks": blocks})


def act_range_report(fp: ModelWeights, quant, probes: np.ndarray) -> Report:
    """Per-channel range ratio (max/median) of each linear input, FP vs transformed model.

    Both models see the same FP-stream input at every block, so differences
    reflect only the block's own transformation.
    """
    f, q = fp.astype(np.float64), _dense(quant)
    if f.config != q.config:
        raise ArchitectureMismatch(f"model configs differ: {f.config} vs {q.config}")
    x = embed(f, np.asarray(probes)).data
    blocks = {}
    for i, (bf, bq) in enumerate(zip(f.blocks, q.blocks)):
        cf, cq = {}, {}
        nxt = block_core(x, bf, f.config.heads, capture=cf).data
        block_core(x, bq, f.config.heads, capture=cq)
        blocks[str(i)] = {loc: {"fp": flatness_ratio(cf[loc]), "transformed": flatness_ratio(cq[loc])}
                          for loc in ("ln1", "attn", "ln2")}
        x = nxt
    return Report("act-range", {"blocks": blocks})


def block_errors(fp_blocks, q_blocks, x: np.ndarray, heads: int, quants) -> list[float]:
    """MSE of each quantized block against its FP block, both fed the FP-stream input."""
    out = []
    x = np.asarray(x, dtype=np.float64)
    for bf, bq, (a_bits, sm) in zip(fp_blocks, q_blocks, quants):
        y = block_core(x, bf, heads).data
        yq = block_core(x, bq, heads, a_bits, sm).data
        out.append(float(((y - yq) ** 2).mean()))
        x = y
    return out


def block_error_report(fp: ModelWeights, methods: Mapping[str, object], probes: np.ndarray) -> Report:
    """Per block index, MSE between FP and each method's block output on identical inputs."""
    f = fp.astype(np.float64)
    x = embed(f, np.asarray(probes)).data
    payload = {}
    for name in sorted(methods):
        m = methods[name]
        d = _dense(m)
        if d.config != f.config:
            raise ArchitectureMismatch(f"{name}: model config differs from the FP model")
        q = _as_quantized(m)
        bits = (q.quant.a_bits, q.quant.softmax_bits) if q else (16, 16)
        payload[name] = block_errors(f.blocks, d.blocks, x, f.config.heads, [bits] * len(d.blocks))
    return Report("block-error", {"methods": payload, "n_probes": int(len(probes))})


def ppl_report(values: Mapping[str, float], seqlen: int) -> Report:
    return Report("ppl", {"ppl": dict(values), "seqlen": seqlen})
