"""Minimal pre-norm decoder-only byte-level language model.

Every block exposes the quantizer insertion points used by calibration:
fake-quantized weights on all six linears, per-token activation quantization
on every linear input and on Q/K/V, and an optional Softmax-output quantizer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .equivalent import LETParams, TransformError, apply_let_attention, apply_let_linear, fuse_let
from .quantizer import QuantSpec, fake_quant_activations_per_token, fake_quant_weights

LINEARS = ("wq", "wk", "wv", "wo", "w1", "w2")
LN_EPS = 1e-5
FP_MAGIC = b"OMNIFP1\0"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TinyModelConfig:
    vocab: int = 256
    d_model: int = 64
    heads: int = 4
    blocks: int = 4
    context: int = 128

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class BlockWeights:
    ln1_w: np.ndarray
    ln1_b: np.ndarray | None
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_w: np.ndarray
    ln2_b: np.ndarray | None
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def map(self, fn: Callable) -> BlockWeights:
        return replace(self, **{k: None if v is None else fn(v) for k, v in self.items()})

    def items(self):
        return [(k, getattr(self, k)) for k in self.field_names()]

    def numpy(self, dtype=None) -> BlockWeights:
        return self.map(lambda v: np.array(ad._lift(v).data, dtype=dtype))


@dataclass
class ModelWeights:
    config: TinyModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    blocks: list[BlockWeights]
    lnf_w: np.ndarray
    lnf_b: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, b in enumerate(self.blocks):
            for k, v in b.items():
                if v is not None:
                    out[f"blocks.{i}.{k}"] = v
        out["lnf_w"], out["lnf_b"] = self.lnf_w, self.lnf_b
        return out

    @classmethod
    def from_tensors(cls, config: TinyModelConfig, tensors: Mapping[str, np.ndarray]) -> ModelWeights:
        blocks = []
        for i in range(config.blocks):
            kw = {k: tensors.get(f"blocks.{i}.{k}") for k in BlockWeights.field_names()}
            blocks.append(BlockWeights(**kw))
        return cls(config, tensors["tok_emb"], tensors["pos_emb"], blocks,
                   tensors["lnf_w"], tensors["lnf_b"])

    def astype(self, dtype) -> ModelWeights:
        return ModelWeights(self.config, self.tok_emb.astype(dtype), self.pos_emb.astype(dtype),
                            [b.numpy(dtype) for b in self.blocks],
                            self.lnf_w.astype(dtype), self.lnf_b.astype(dtype))


@dataclass(frozen=True)
class QuantConfig:
    """Which quantizers are live inside a block. 16 bits means off."""

    w_bits: int = 16
    a_bits: int = 16
    group_size: int | None = None
    softmax_bits: int = 16

    @property
    def weight_spec(self) -> QuantSpec:
        return QuantSpec.weights(min(self.w_bits, 16), self.group_size)


FP = QuantConfig()


def init_weights(config: TinyModelConfig, seed: int = 0, std: float = 0.02) -> ModelWeights:
    rng = np.random.default_rng(seed)
    c = config.d_model
    proj_std = std / np.sqrt(2 * config.blocks)

    def normal(shape, s=std):
        return rng.normal(0.0, s, size=shape)

    blocks = []
    for _ in range(config.blocks):
        blocks.append(BlockWeights(
            ln1_w=np.ones(c), ln1_b=np.zeros(c),
            wq=normal((c, c)), bq=np.zeros(c), wk=normal((c, c)), bk=np.zeros(c),
            wv=normal((c, c)), bv=np.zeros(c), wo=normal((c, c), proj_std), bo=np.zeros(c),
            ln2_w=np.ones(c), ln2_b=np.zeros(c),
            w1=normal((c, 4 * c)), b1=np.zeros(4 * c), w2=normal((4 * c, c), proj_std), b2=np.zeros(c),
        ))
    return ModelWeights(config, normal((config.vocab, c)), normal((config.context, c)), blocks,
                        np.ones(c), np.zeros(c))


def outlier_model(config: TinyModelConfig = TinyModelConfig(blocks=1), factor: float = 50.0,
                  channel: int = 3, seed: int = 0) -> ModelWeights:
    """Random model whose norm outputs carry one channel magnified by ``factor``.

    The outlier sits in both LayerNorm scales (and, weaker, their biases), so
    every transformable linear input has a dominant channel, like the
    systematic outliers of large trained LMs.
    """
    m = init_weights(config, seed, std=0.08)
    rng = np.random.default_rng([seed, 1])
    for b in m.blocks:
        for ln in ("ln1", "ln2"):
            w = 1.0 + 0.1 * rng.standard_normal(config.d_model)
            w[channel] *= factor
            setattr(b, f"{ln}_w", w)
            bias = 0.05 * rng.standard_normal(config.d_model)
            bias[channel] = 0.2 * factor
            setattr(b, f"{ln}_b", bias)
    return m


def _causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, c = x.shape
    n = len(lead)
    x = ad.reshape(x, (*lead, t, heads, c // heads))
    return ad.transpose(x, [*range(n), n + 1, n, n + 2])


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, d = x.shape
    n = len(lead)
    x = ad.transpose(x, [*range(n), n + 1, n, n + 2])
    return ad.reshape(x, (*lead, t, h * d))


def quantize_block_weights(weights: BlockWeights, spec: QuantSpec, clips: Mapping | None = None,
                           linears=LINEARS) -> BlockWeights:
    """Fake-quantize the linear weights (stored ``(C_in, C_out)``, quantized per output channel)."""
    if not spec.enabled:
        return weights
    clips = clips or {}
    upd = {}
    for name in linears:
        w = getattr(weights, name)
        upd[name] = ad.transpose(fake_quant_weights(ad.transpose(w), spec, clips.get(name)))
    return replace(weights, **upd)


def block_core(x, w: BlockWeights, heads: int, a_bits: int = 16, softmax_bits: int = 16,
               capture: dict | None = None) -> Tensor:
    """Transformer block on already-transformed (and possibly quantized) weights."""
    x = ad._lift(x)

    def qa(t):
        return fake_quant_activations_per_token(t, a_bits)

    def keep(name, t):
        if capture is not None:
            capture[name] = t.data
        return t

    t = x.shape[-2]
    h = keep("ln1", ad.layernorm(x, w.ln1_w, w.ln1_b, LN_EPS))
    a = qa(h)
    q = qa(a @ w.wq + w.bq)
    k = qa(a @ w.wk + w.bk)
    v = qa(a @ w.wv + w.bv)
    qh, kh, vh = (_split_heads(m, heads) for m in (q, k, v))
    scores = (qh * (1.0 / np.sqrt(qh.shape[-1]))) @ ad.transpose(kh)
    p = ad.softmax(scores, _causal_mask(t))
    if softmax_bits < 16:
        p = fake_quant_activations_per_token(p, softmax_bits)
    o = keep("attn", _merge_heads(p @ vh))
    x = x + (qa(o) @ w.wo + w.bo)
    h2 = keep("ln2", ad.layernorm(x, w.ln2_w, w.ln2_b, LN_EPS))
    f = keep("fc1", ad.gelu(qa(h2) @ w.w1 + w.b1))
    x = x + (qa(f) @ w.w2 + w.b2)
    return keep("out", x)


def block_forward(x, weights: BlockWeights, quant: QuantConfig = FP, let: LETParams | None = None,
                  lwc: Mapping | None = None, heads: int = 4, capture: dict | None = None) -> Tensor:
    """One block: fuse LET into the weights, fake-quantize them, run with activation quantizers.

    With all quantizers off and no LET this is the plain FP block.
    """
    if let is not None and not let.is_empty():
        bad = set(let.active) - {"qkv", "out", "qk", "fc1"}
        if bad:
            raise TransformError(f"LET not allowed on {sorted(bad)}")
    w = fuse_let(weights, let)
    w = quantize_block_weights(w, quant.weight_spec, lwc)
    return block_core(x, w, heads, quant.a_bits, quant.softmax_bits, capture)


def block_forward_unfused(x, w: BlockWeights, let: LETParams | None, heads: int = 4) -> Tensor:
    """FP reference block with every transformation applied to activations at run time.

    Nothing is folded into the weights: each transformed linear computes
    ``X~ W~ + B~`` and the attention pair rescales ``Q``/``K`` explicitly.
    """
    x = ad._lift(x)
    pairs = let.pairs if let is not None else {}

    def linear(inp, pair, names):
        if pair is None:
            return [inp @ getattr(w, n) + getattr(w, "b" + n[1:]) for n in names]
        delta = pair.shift if pair.shift is not None else np.zeros(np.shape(ad._lift(pair.scale_logit).data))
        outs = []
        for n in names:
            xt, wt, bt = apply_let_linear(inp, getattr(w, n), getattr(w, "b" + n[1:]), pair.scale, delta)
            outs.append(xt @ wt + bt)
        return outs

    t = x.shape[-2]
    h = ad.layernorm(x, w.ln1_w, w.ln1_b, LN_EPS)
    q, k, v = linear(h, pairs.get("qkv"), ("wq", "wk", "wv"))
    if let is not None and let.qk_logit is not None:
        q, k = apply_let_attention(q, k, ad.exp(let.qk_logit))
    qh, kh, vh = (_split_heads(m, heads) for m in (q, k, v))
    p = ad.softmax((qh * (1.0 / np.sqrt(qh.shape[-1]))) @ ad.transpose(kh), _causal_mask(t))
    o = _merge_heads(p @ vh)
    x = x + linear(o, pairs.get("out"), ("wo",))[0]
    h2 = ad.layernorm(x, w.ln2_w, w.ln2_b, LN_EPS)
    f = ad.gelu(linear(h2, pairs.get("fc1"), ("w1",))[0])
    return x + (f @ w.w2 + w.b2)


def embed(model: ModelWeights, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab):
        raise ValueError(f"token ids must lie in [0, {model.config.vocab - 1}]")
    t = ids.shape[-1]
    if t > model.config.context:
        raise ValueError(f"sequence length {t} exceeds context {model.config.context}")
    return ad.embedding(model.tok_emb, ids) + ad.embedding(model.pos_emb, np.arange(t))


def head(model: ModelWeights, x) -> Tensor:
    x = ad.layernorm(x, model.lnf_w, model.lnf_b, LN_EPS)
    return x @ ad.transpose(model.tok_emb)


def model_forward(model: ModelWeights, ids, quant: QuantConfig = FP, block_params=None) -> Tensor:
    """Logits ``(..., T, vocab)``. ``block_params[i]`` optionally gives ``(let, lwc)`` per block."""
    x = embed(model, ids)
    for i, b in enumerate(model.blocks):
        let, lwc = block_params[i] if block_params else (None, None)
        x = block_forward(x, b, quant, let, lwc, model.config.heads)
    return head(model, x)


def logits(model: ModelWeights, ids, quant: QuantConfig = FP) -> np.ndarray:
    return model_forward(model, ids, quant).data


def greedy_generate(model: ModelWeights, prompt: bytes, n: int) -> bytes:
    ids = list(prompt)
    for _ in range(n):
        window = np.array(ids[-model.config.context:])
        ids.append(int(np.argmax(logits(model, window)[-1])))
    return bytes(ids)


# --------------------------------------------------------------------------
# FP checkpoint
# --------------------------------------------------------------------------


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def write_fp_checkpoint(path, model: ModelWeights, extra: Mapping | None = None) -> None:
    """``OMNIFP1\\0`` + u64 header length + canonical JSON header + raw LE float32 data."""
    manifest, blobs, offset = [], [], 0
    for name, arr in model.tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f32",
                         "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"format": "omniquant-fp", "version": 1, "config": asdict(model.config),
              "tensors": manifest}
    if extra:
        header.update(extra)
    hbytes = canonical_json(header)
    with open(path, "wb") as f:
        f.write(FP_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes)
        for b in blobs:
            f.write(b)


def read_fp_checkpoint(path) -> tuple[ModelWeights, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != FP_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start, end = base + e["offset"], base + e["offset"] + e["nbytes"]
        if end > len(raw) or e["nbytes"] != 4 * int(np.prod(e["shape"])):
            raise CheckpointError(f"{path}: tensor {e['name']} out of bounds")
        tensors[e["name"]] = np.frombuffer(raw[start:end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    config = TinyModelConfig(**header["config"])
    return ModelWeights.from_tensors(config, tensors), header
