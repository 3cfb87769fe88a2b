"""Uniform asymmetric quantization with learnable weight clipping.

Weights are quantized row-wise (one row per output channel), optionally in
contiguous groups of ``group_size`` elements; activations are quantized per
token (last axis). Every quantizer here is written with :mod:`autodiff`
ops so the same code path serves the differentiable calibration forward and
the integer export, which keeps the two bit-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

EPS = 1e-12
LWC_INIT_LOGIT = 4.0
GRID_CANDIDATES = tuple(round(1.0 - 0.05 * i, 2) for i in range(11))

GRANULARITIES = ("per_tensor", "per_channel", "per_token", "group")
CLIP_MODES = ("minmax", "lwc", "pact", "lsq", "grid")


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    """Fully determines a quantizer. ``bits >= 16`` means disabled."""

    bits: int
    granularity: str = "per_channel"
    group_size: int | None = None
    clip_mode: str = "minmax"
    symmetric: bool = False

    def __post_init__(self):
        if self.bits < 2:
            raise QuantizationError(f"bits must be >= 2, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise QuantizationError(f"unknown granularity {self.granularity!r}")
        if self.clip_mode not in CLIP_MODES:
            raise QuantizationError(f"unknown clip mode {self.clip_mode!r}")
        if self.granularity == "group" and not (self.group_size and self.group_size > 0):
            raise QuantizationError("group granularity needs a positive group_size")

    @classmethod
    def weights(cls, bits: int, group_size: int | None = None, clip_mode: str = "minmax") -> QuantSpec:
        if group_size:
            return cls(bits, "group", group_size, clip_mode)
        return cls(bits, "per_channel", None, clip_mode)

    @property
    def enabled(self) -> bool:
        return self.bits < 16

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    def group_len(self, rows: int, cols: int) -> int:
        if self.granularity == "group":
            if cols % self.group_size:
                raise QuantizationError(
                    f"group size {self.group_size} does not divide row length {cols}")
            return self.group_size
        if self.granularity == "per_tensor":
            return rows * cols
        return cols

    def n_groups(self, rows: int, cols: int) -> tuple[int, int]:
        """Shape ``(group_rows, groups_per_row)`` of the per-group parameters."""
        g = self.group_len(rows, cols)
        if self.granularity == "per_tensor":
            return 1, 1
        return rows, cols // g


@dataclass
class LWCParams:
    """Clipping-strength logits, one pair per quantization group."""

    gamma_logit: np.ndarray | Tensor
    beta_logit: np.ndarray | Tensor

    @classmethod
    def init(cls, shape: tuple[int, int], value: float = LWC_INIT_LOGIT) -> LWCParams:
        return cls(np.full(shape, value), np.full(shape, value))

    def strengths(self) -> tuple[Tensor, Tensor]:
        return ad.sigmoid(self.gamma_logit), ad.sigmoid(self.beta_logit)


@dataclass
class PACTParams:
    """Directly learned clipping thresholds per group."""

    alpha_max: np.ndarray | Tensor
    alpha_min: np.ndarray | Tensor


@dataclass
class LSQParams:
    """Directly learned step size and real-valued zero-point per group."""

    step: np.ndarray | Tensor
    zero: np.ndarray | Tensor


@dataclass
class QuantParams:
    h: np.ndarray
    z: np.ndarray
    flagged: np.ndarray | None = field(default=None, repr=False)


Clip = Union[None, LWCParams, PACTParams, LSQParams, tuple]


def _check_finite(x: Tensor, what: str) -> None:
    if not np.isfinite(x.data).all():
        raise QuantizationError(f"non-finite values in {what}")


def _expand(p, shape) -> Tensor:
    p = p if isinstance(p, Tensor) else Tensor(np.broadcast_to(np.asarray(p, dtype=np.float64), shape))
    return ad.reshape(p, tuple(shape) + (1,))


def _minmax_params(up: Tensor, lo: Tensor, qmax: int) -> tuple[Tensor, Tensor]:
    rng = up - lo
    h = ad.where(rng.data < EPS, EPS, rng / float(qmax))
    z = ad.ste_clamp(-ad.ste_round(lo / h), 0.0, float(qmax))
    return h, z


def group_params(xg: Tensor, qmax: int, clip: Clip = None, symmetric: bool = False):
    """Scale ``h``, zero-point ``z`` (as reals) and a flag mask for groups on the last axis.

    ``xg`` has shape ``(..., g)``; parameters come back with shape ``(..., 1)``.
    """
    lead = xg.shape[:-1]
    flagged = None
    if isinstance(clip, PACTParams):
        h, z = _minmax_params(_expand(clip.alpha_max, lead), _expand(clip.alpha_min, lead), qmax)
        return h, z, flagged
    if isinstance(clip, LSQParams):
        step = _expand(clip.step, lead)
        flagged = step.data <= EPS
        if flagged.any():
            log.warning("lsq step size non-positive in %d group(s); clamped to eps", int(flagged.sum()))
        h = ad.where(flagged, EPS, step)
        z = ad.ste_clamp(ad.ste_round(_expand(clip.zero, lead)), 0.0, float(qmax))
        return h, z, flagged
    mx = ad.reduce_max(xg, axis=-1, keepdims=True)
    mn = ad.reduce_min(xg, axis=-1, keepdims=True)
    if isinstance(clip, LWCParams):
        gamma, beta = clip.strengths()
    elif isinstance(clip, tuple):
        gamma, beta = clip
    else:
        gamma = beta = None
    if symmetric:
        amax = ad.where(mx.data >= -mn.data, mx, -mn)
        up = amax if gamma is None else _expand(gamma, lead) * amax
        h = ad.where(up.data < EPS, EPS, up * (2.0 / qmax))
        z = Tensor(np.full(h.shape, float(2 ** (qmax.bit_length() - 1)), dtype=h.dtype))
        return h, z, flagged
    up = mx if gamma is None else _expand(gamma, lead) * mx
    lo = mn if beta is None else _expand(beta, lead) * mn
    h, z = _minmax_params(up, lo, qmax)
    return h, z, flagged


def quantize_to_codes(xg: Tensor, h: Tensor, z: Tensor, qmax: int) -> Tensor:
    return ad.ste_clamp(ad.ste_round(xg / h) + z, 0.0, float(qmax))


def _grouped(W: Tensor, spec: QuantSpec) -> Tensor:
    if W.ndim != 2:
        raise QuantizationError(f"weights must be 2-D, got shape {W.shape}")
    rows, cols = W.shape
    g = spec.group_len(rows, cols)
    gr, ng = spec.n_groups(rows, cols)
    return ad.reshape(W, (gr, ng, g))


def _weight_quant(W, spec: QuantSpec, lwc: Clip):
    W = ad._lift(W)
    _check_finite(W, "weights")
    wg = _grouped(W, spec)
    h, z, flagged = group_params(wg, spec.qmax, lwc, spec.symmetric)
    codes = quantize_to_codes(wg, h, z, spec.qmax)
    return W, codes, h, z, flagged


def fake_quant_weights(W, spec: QuantSpec, lwc: Clip = None) -> Tensor:
    """Quantize-dequantize a 2-D weight (rows = output channels).

    ``lwc`` may be :class:`LWCParams` (logits), a ``(gamma, beta)`` tuple of
    strengths, :class:`PACTParams`, :class:`LSQParams`, or ``None`` for MinMax.
    """
    if not spec.enabled:
        return ad._lift(W)
    W, codes, h, z, _ = _weight_quant(W, spec, lwc)
    return ad.reshape((codes - z) * h, W.shape)


def fake_quant_activations_per_token(X, bits: int) -> Tensor:
    """Dynamic MinMax quantize-dequantize of each row along the last axis."""
    X = ad._lift(X)
    if bits >= 16:
        return X
    if bits < 2:
        raise QuantizationError(f"bits must be >= 2, got {bits}")
    _check_finite(X, "activations")
    qmax = 2**bits - 1
    h, z, _ = group_params(X, qmax)
    return (quantize_to_codes(X, h, z, qmax) - z) * h


def integer_quantize(W, spec: QuantSpec, lwc: Clip = None) -> tuple[np.ndarray, QuantParams]:
    """Integer codes ``(rows, cols)`` and per-group ``(h, z)`` of shape ``n_groups``."""
    if not spec.enabled:
        raise QuantizationError("integer_quantize needs bits < 16")
    W, codes, h, z, flagged = _weight_quant(Tensor(ad._lift(W).data), spec, lwc)
    gshape = spec.n_groups(*W.shape)
    codes = codes.data.reshape(W.shape).astype(np.uint8 if spec.bits <= 8 else np.uint16)
    qp = QuantParams(h.data.reshape(gshape).copy(), z.data.reshape(gshape).astype(np.int64),
                     None if flagged is None else flagged.reshape(gshape))
    return codes, qp


def dequantize(codes: np.ndarray, qp: QuantParams, spec: QuantSpec, dtype=None) -> np.ndarray:
    """``(code - z) * h`` group-wise; bit-identical to :func:`fake_quant_weights` at equal dtype."""
    rows, cols = codes.shape
    gr, ng = spec.n_groups(rows, cols)
    g = spec.group_len(rows, cols)
    h = np.asarray(qp.h, dtype=dtype or np.asarray(qp.h).dtype).reshape(gr, ng, 1)
    c = codes.reshape(gr, ng, g).astype(h.dtype)
    z = np.asarray(qp.z).reshape(gr, ng, 1).astype(h.dtype)
    return ((c - z) * h).reshape(rows, cols)


def compute_quant_params(values, bits: int, gamma: float = 1.0, beta: float = 1.0) -> QuantParams:
    """Scale and zero-point of a single group of values."""
    x = Tensor(np.asarray(values, dtype=np.float64).reshape(1, -1))
    if x.data.size == 0:
        raise QuantizationError("empty group")
    _check_finite(x, "group")
    clip = None if gamma == beta == 1.0 else (np.array([gamma]), np.array([beta]))
    h, z, _ = group_params(x, 2**bits - 1, clip)
    return QuantParams(float(h.data.reshape(-1)[0]), int(z.data.reshape(-1)[0]))


def clip_mode_params(mode: str, learnables, bits: int, shape: tuple[int, ...] = (1,)) -> QuantParams:
    """``(h, z)`` produced by a pact- or lsq-style parameterization."""
    if mode not in ("pact", "lsq"):
        raise QuantizationError(f"clip_mode_params handles pact/lsq, got {mode!r}")
    expected = PACTParams if mode == "pact" else LSQParams
    if not isinstance(learnables, expected):
        raise QuantizationError(f"{mode} needs {expected.__name__}")
    dummy = Tensor(np.zeros(tuple(shape) + (1,)))
    h, z, flagged = group_params(dummy, 2**bits - 1, learnables)
    return QuantParams(h.data.reshape(shape), z.data.reshape(shape).astype(np.int64),
                       None if flagged is None else flagged.reshape(shape))


def init_clip(mode: str, W: np.ndarray, spec: QuantSpec):
    """Starting learnables for a clip mode, all equivalent (or near) to MinMax."""
    rows, cols = W.shape
    gshape = spec.n_groups(rows, cols)
    if mode == "lwc":
        return LWCParams.init(gshape)
    wg = np.asarray(W, dtype=np.float64).reshape(gshape + (spec.group_len(rows, cols),))
    mx, mn = wg.max(axis=-1), wg.min(axis=-1)
    if mode == "pact":
        return PACTParams(mx, mn)
    if mode == "lsq":
        step = np.maximum((mx - mn) / spec.qmax, EPS)
        return LSQParams(step, -mn / step)
    raise QuantizationError(f"no learnable init for clip mode {mode!r}")


def grid_search_clip(W, spec: QuantSpec,
                     candidates: Sequence[float] = GRID_CANDIDATES) -> tuple[np.ndarray, np.ndarray]:
    """Per-group symmetric strength ``gamma = beta`` minimizing squared reconstruction error.

    Ties go to the earliest candidate.
    """
    if len(candidates) == 0:
        raise QuantizationError("empty candidate set")
    W = np.asarray(ad._lift(W).data, dtype=np.float64)
    rows, cols = W.shape
    gshape = spec.n_groups(rows, cols)
    g = spec.group_len(rows, cols)
    wg = W.reshape(gshape + (g,))
    best_err = np.full(gshape, np.inf)
    best = np.ones(gshape)
    for c in candidates:
        strength = np.full(gshape, float(c))
        wq = fake_quant_weights(W, spec, (strength, strength)).data.reshape(wg.shape)
        err = ((wq - wg) ** 2).sum(axis=-1)
        better = err < best_err
        best_err = np.where(better, err, best_err)
        best = np.where(better, c, best)
    return best, best.copy()
