"""Learnable equivalent transformations (channel-wise scale/shift) and their fusion.

Linear weights use the ``(C_in, C_out)`` layout, ``Y = X @ W + B``. A
transformed linear sees ``X~ = (X - delta) / s`` and ``W~ = s * W`` (rows
scaled), ``B~ = B + delta @ W``. The attention pair rescales queries and
keys, ``Q~ = Q / s_a`` and ``K~ = K * s_a``, which leaves ``Q K^T`` intact.

Placement pairs:

``qkv``  ln1 -> (q, k, v) projections
``out``  v projection -> output projection
``qk``   queries -> keys (scale only)
``fc1``  ln2 -> first FFN linear
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LET_PAIRS = ("qkv", "out", "qk", "fc1")
SCALE_FLOOR = 1e-5

# which captured activation and which consuming weights each pair is sized from
PAIR_SOURCES = {"qkv": ("ln1", ("wq", "wk", "wv")), "out": ("attn", ("wo",)), "fc1": ("ln2", ("w1",))}


class TransformError(ValueError):
    pass


@dataclass
class ScaleShift:
    """Scale logit (``s = exp(logit)``) and optional shift for one linear pair."""

    scale_logit: np.ndarray | Tensor
    shift: np.ndarray | Tensor | None = None

    @property
    def scale(self) -> Tensor:
        return ad.exp(self.scale_logit)


@dataclass
class LETParams:
    pairs: dict[str, ScaleShift] = field(default_factory=dict)
    qk_logit: np.ndarray | Tensor | None = None

    @property
    def active(self) -> tuple[str, ...]:
        names = [p for p in LET_PAIRS if p in self.pairs]
        if self.qk_logit is not None:
            names.append("qk")
        return tuple(sorted(names, key=LET_PAIRS.index))

    def is_empty(self) -> bool:
        return not self.pairs and self.qk_logit is None

    def tensors(self) -> dict[str, np.ndarray | Tensor]:
        out = {}
        for name, p in self.pairs.items():
            out[f"{name}.scale_logit"] = p.scale_logit
            if p.shift is not None:
                out[f"{name}.shift"] = p.shift
        if self.qk_logit is not None:
            out["qk.scale_logit"] = self.qk_logit
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray | Tensor]) -> LETParams:
        let = cls()
        for key, val in tensors.items():
            name, kind = key.split(".")
            if name == "qk":
                let.qk_logit = val
            else:
                pair = let.pairs.setdefault(name, ScaleShift(None))
                if kind == "scale_logit":
                    pair.scale_logit = val
                else:
                    pair.shift = val
        return let

    def numpy(self) -> LETParams:
        return LETParams.from_tensors({k: np.array(ad._lift(v).data) for k, v in self.tensors().items()})


@dataclass
class ChannelStats:
    absmax: np.ndarray
    max: np.ndarray
    min: np.ndarray

    @classmethod
    def of(cls, x: np.ndarray) -> ChannelStats:
        x = np.asarray(x).reshape(-1, np.shape(x)[-1])
        return cls(np.abs(x).max(axis=0), x.max(axis=0), x.min(axis=0))

    def merge(self, other: ChannelStats) -> ChannelStats:
        return ChannelStats(np.maximum(self.absmax, other.absmax),
                            np.maximum(self.max, other.max), np.minimum(self.min, other.min))


def smoothquant_scale(act_absmax: np.ndarray, weight_absmax: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    s = act_absmax**alpha / np.maximum(weight_absmax, SCALE_FLOOR) ** (1.0 - alpha)
    return np.maximum(s, SCALE_FLOOR)


def init_let(stats: Mapping[str, ChannelStats], weights, pairs=LET_PAIRS,
             scale_init: str = "smoothquant", shift_init: str = "osplus",
             alpha: float = 0.5, out_shift: bool = True) -> LETParams:
    """Initial LET parameters for a block.

    ``stats`` maps ``ln1``/``attn``/``ln2`` to per-channel statistics of the
    corresponding linear inputs; ``weights`` is the block's weight set.
    """
    if scale_init not in ("smoothquant", "ones"):
        raise TransformError(f"unknown scale init {scale_init!r}")
    if shift_init not in ("osplus", "zeros"):
        raise TransformError(f"unknown shift init {shift_init!r}")
    let = LETParams()
    for name in pairs:
        if name not in LET_PAIRS:
            raise TransformError(f"unknown LET pair {name!r}; fc2 and others are not transformable")
        if name == "qk":
            let.qk_logit = np.zeros(np.shape(ad._lift(weights.wq).data)[1])
            continue
        loc, wnames = PAIR_SOURCES[name]
        if loc not in stats:
            raise TransformError(f"missing activation statistics {loc!r} for pair {name!r}")
        st = stats[loc]
        if scale_init == "smoothquant":
            wabs = np.max([np.abs(ad._lift(getattr(weights, w)).data).max(axis=1) for w in wnames], axis=0)
            logit = np.log(smoothquant_scale(st.absmax, wabs, alpha))
        else:
            logit = np.zeros_like(st.absmax, dtype=np.float64)
        shift = None
        if name != "out" or out_shift:
            shift = (st.max + st.min) / 2.0 if shift_init == "osplus" else np.zeros_like(logit)
        let.pairs[name] = ScaleShift(np.asarray(logit, dtype=np.float64),
                                     None if shift is None else np.asarray(shift, dtype=np.float64))
    return let


def _positive(s: Tensor, what: str) -> None:
    if not (s.data > 0).all():
        raise TransformError(f"{what} must be strictly positive")


def apply_let_linear(X, W, B, s, delta):
    """On-the-fly transform of one linear: returns ``(X~, W~, B~)``."""
    X, W, B, s, delta = map(ad._lift, (X, W, B, s, delta))
    _positive(s, "scale s")
    c_in = W.shape[0]
    s_row, d_row = ad.reshape(s, (1, c_in)), ad.reshape(delta, (1, c_in))
    Xt = (X - ad.reshape(delta, (c_in,))) / ad.reshape(s, (c_in,))
    Wt = ad.reshape(s_row, (c_in, 1)) * W
    Bt = B + ad.reshape(d_row @ W, B.shape)
    return Xt, Wt, Bt


def apply_let_attention(Q, K, s_a):
    """Query/key rescaling: returns ``(Q~, K~)`` with ``Q~ K~^T == Q K^T``."""
    Q, K, s_a = map(ad._lift, (Q, K, s_a))
    _positive(s_a, "attention scale s_a")
    if Q.shape[-1] != K.shape[-1]:
        raise TransformError(f"head dims differ: {Q.shape} vs {K.shape}")
    return Q / s_a, K * s_a


def _fold_input_side(W, B, s: Tensor, delta):
    c_in = ad._lift(W).shape[0]
    Wn = ad.reshape(s, (c_in, 1)) * W
    if delta is None:
        return Wn, B
    return Wn, B + ad.reshape(ad.reshape(delta, (1, c_in)) @ W, ad._lift(B).shape)


def fuse_let(weights, let: LETParams | None):
    """Block weights with every LET parameter absorbed; differentiable in ``let``.

    Shifts of the ``qkv``/``fc1`` pairs go into the preceding norm bias,
    scales into the norm weight; the ``out`` pair folds into the v
    projection's output channels (valid because attention rows sum to one);
    ``s_a`` folds into the q/k projections' output channels.
    """
    if let is None or let.is_empty():
        return weights
    w = {f: getattr(weights, f) for f in weights.field_names()}
    for name in let.pairs:
        if name not in PAIR_SOURCES:
            raise TransformError(f"LET pair {name!r} cannot be fused")

    def fold_norm(prefix, pair: ScaleShift, targets):
        s = pair.scale
        _positive(s, f"{prefix} scale")
        delta = pair.shift
        nb = w[f"{prefix}_b"]
        if nb is None:
            if delta is not None and np.any(ad._lift(delta).data != 0):
                raise TransformError(f"{prefix} has no bias; cannot absorb a non-zero shift")
            delta = None
        w[f"{prefix}_w"] = w[f"{prefix}_w"] / s
        if nb is not None:
            w[f"{prefix}_b"] = (nb - (0.0 if delta is None else delta)) / s
        for t in targets:
            wt, bt = "w" + t[1:], "b" + t[1:]
            w[wt], w[bt] = _fold_input_side(w[wt], w[bt], s, delta)

    if "qkv" in let.pairs:
        fold_norm("ln1", let.pairs["qkv"], ("wq", "wk", "wv"))
    if "fc1" in let.pairs:
        fold_norm("ln2", let.pairs["fc1"], ("w1",))
    if "out" in let.pairs:
        pair = let.pairs["out"]
        s = pair.scale
        _positive(s, "out scale")
        bv = w["bv"] if pair.shift is None else w["bv"] - pair.shift
        w["wv"], w["bv"] = w["wv"] / s, bv / s
        w["wo"], w["bo"] = _fold_input_side(w["wo"], w["bo"], s, pair.shift)
    if let.qk_logit is not None:
        s_a = ad.exp(let.qk_logit)
        _positive(s_a, "s_a")
        w["wq"], w["bq"] = w["wq"] / s_a, w["bq"] / s_a
        w["wk"], w["bk"] = w["wk"] * s_a, w["bk"] * s_a
    return replace(weights, **w)


def flatness_ratio(x: np.ndarray) -> float:
    """max_j(range_j) / median_j(range_j) of per-channel dynamic ranges."""
    x = np.asarray(x).reshape(-1, np.shape(x)[-1])
    rng = x.max(axis=0) - x.min(axis=0)
    return float(rng.max() / max(np.median(rng), 1e-30))
