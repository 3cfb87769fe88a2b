"""Sequential block-wise calibration of LWC and LET parameters, plus baselines.

Each block is optimized in turn against the full-precision block's outputs.
Two activation streams are kept: ``X_fp`` runs through the untouched FP
blocks, ``X_q`` through the already-quantized ones. A block's loss is the
MSE between ``F_fp(X_fp)`` and the quantized, transformed block applied to
``X_q``. Only the clipping logits and transformation parameters are trained;
the FP weights stay frozen.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .equivalent import LET_PAIRS, ChannelStats, LETParams, fuse_let, init_let
from .model import (LINEARS, BlockWeights, ModelWeights, QuantConfig, TinyModelConfig, block_core,
                    block_forward, embed, head)
from .optim import AdamWState, adamw_step, clip_grad_norm
from .quantizer import (LWC_INIT_LOGIT, LWCParams, QuantParams, QuantSpec,
                        dequantize, grid_search_clip, init_clip, integer_quantize)

log = logging.getLogger(__name__)

METHODS = ("omniquant", "rtn", "smoothquant", "grid-clip", "omniquant-lwc-only", "omniquant-let-only")
BASELINES = ("rtn", "smoothquant", "grid-clip")
SCHEDULES = ("simultaneous", "alt-iter", "alt-epoch")
CLIP_MODES = ("lwc", "pact", "lsq", "grid", "minmax")


class ConfigError(ValueError):
    pass


class NumericalFailure(ArithmeticError):
    """Calibration loss became NaN/inf; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: Mapping):
        super().__init__(message)
        self.snapshot = dict(snapshot)


@dataclass(frozen=True)
class CalibConfig:
    w_bits: int = 4
    a_bits: int = 16
    group_size: int | None = None
    method: str = "omniquant"
    clip_mode: str | None = None
    epochs: int | None = None
    lr_lwc: float = 5e-3
    lr_let: float = 1e-2
    weight_decay: float = 0.0
    schedule: str = "simultaneous"
    let_pairs: tuple[str, ...] | None = None
    scale_init: str = "smoothquant"
    shift_init: str = "osplus"
    out_shift: bool = True
    alpha: float = 0.5
    softmax_bits: int = 16
    lwc_init: float = LWC_INIT_LOGIT
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.clip_mode is not None and self.clip_mode not in CLIP_MODES:
            raise ConfigError(f"clip_mode must be one of {CLIP_MODES}, got {self.clip_mode!r}")
        if not (2 <= self.w_bits <= 16) or not (2 <= self.a_bits <= 16):
            raise ConfigError("w_bits and a_bits must lie in [2, 16]")
        if self.softmax_bits not in (4, 6, 8, 16):
            raise ConfigError(f"softmax_bits must be one of 16, 8, 6, 4, got {self.softmax_bits}")
        if self.lr_lwc <= 0 or self.lr_let <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.let_pairs is not None:
            bad = set(self.let_pairs) - set(LET_PAIRS)
            if bad:
                raise ConfigError(f"unknown LET pairs {sorted(bad)}; allowed: {LET_PAIRS}")

    @property
    def quant(self) -> QuantConfig:
        return QuantConfig(self.w_bits, self.a_bits, self.group_size, self.softmax_bits)

    @property
    def resolved_epochs(self) -> int:
        if self.method in BASELINES:
            return 0
        if self.epochs is not None:
            return self.epochs
        return 40 if self.w_bits == 2 else 20

    @property
    def resolved_clip(self) -> str:
        if self.clip_mode is not None:
            return self.clip_mode
        return {"omniquant": "lwc", "omniquant-lwc-only": "lwc", "grid-clip": "grid"}.get(self.method, "minmax")

    @property
    def resolved_pairs(self) -> tuple[str, ...]:
        if self.method in ("rtn", "grid-clip", "omniquant-lwc-only"):
            return ()
        if self.let_pairs is not None:
            return tuple(p for p in LET_PAIRS if p in self.let_pairs)
        if self.method == "smoothquant":
            return tuple(p for p in LET_PAIRS if p != "qk")
        return LET_PAIRS if self.a_bits < 16 else ()

    @property
    def resolved_shift_init(self) -> str:
        # the fixed-alpha baseline migrates scale only
        return "zeros" if self.method == "smoothquant" else self.shift_init

    def resolved(self) -> dict:
        """Every knob after defaults are applied, for provenance headers."""
        d = asdict(self)
        d.update(epochs=self.resolved_epochs, clip_mode=self.resolved_clip,
                 let_pairs=list(self.resolved_pairs), shift_init=self.resolved_shift_init)
        return d


# --------------------------------------------------------------------------
# quantized model container
# --------------------------------------------------------------------------


@dataclass
class QuantizedBlock:
    """A calibrated block: fused dense tensors plus integer codes for its linears.

    ``codes[name]`` is ``(C_out, C_in)`` with rows in output-channel order;
    ``dense`` holds norms, biases, and (when weights are unquantized) the
    fused linear weights themselves.
    """

    dense: dict[str, np.ndarray]
    codes: dict[str, np.ndarray] = field(default_factory=dict)
    qparams: dict[str, QuantParams] = field(default_factory=dict)
    strengths: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def weights(self, spec: QuantSpec, dtype=np.float32) -> BlockWeights:
        kw = {k: None if v is None else np.asarray(v, dtype=dtype) for k, v in self.dense.items()}
        for name, codes in self.codes.items():
            kw[name] = dequantize(codes, self.qparams[name], spec, dtype=dtype).T
        return BlockWeights(**{k: kw.get(k) for k in BlockWeights.field_names()})


@dataclass
class QuantizedModel:
    config: TinyModelConfig
    quant: QuantConfig
    embeddings: dict[str, np.ndarray]
    blocks: list[QuantizedBlock]
    meta: dict = field(default_factory=dict)

    def block_weights(self, dtype=np.float32) -> list[BlockWeights]:
        spec = self.quant.weight_spec
        return [b.weights(spec, dtype) for b in self.blocks]

    def dense_model(self, dtype=np.float32) -> ModelWeights:
        e = {k: np.asarray(v, dtype=dtype) for k, v in self.embeddings.items()}
        return ModelWeights(self.config, e["tok_emb"], e["pos_emb"], self.block_weights(dtype),
                            e["lnf_w"], e["lnf_b"])

    def forward(self, ids, dtype=np.float32) -> np.ndarray:
        """Logits with dequantized weights and the configured activation quantizers."""
        m = self.dense_model(dtype)
        x = embed(m, ids)
        for b in m.blocks:
            x = block_core(x, b, self.config.heads, self.quant.a_bits, self.quant.softmax_bits)
        return head(m, x).data


# --------------------------------------------------------------------------
# per-block calibration
# --------------------------------------------------------------------------


@dataclass
class BlockResult:
    let: LETParams
    clips: dict
    initial_loss: float | None
    final_loss: float | None
    losses: list[float]
    epoch_losses: list[float]
    steps: int
    best_epoch: int


def _activation_stats(block: BlockWeights, x_fp: np.ndarray, heads: int) -> dict[str, ChannelStats]:
    cap: dict = {}
    block_core(x_fp, block, heads, capture=cap)
    return {k: ChannelStats.of(cap[k]) for k in ("ln1", "attn", "ln2")}


def _init_clips(weights: BlockWeights, spec: QuantSpec, mode: str, init_logit: float) -> dict:
    if not spec.enabled or mode in ("minmax", "grid"):
        return {}
    clips = {}
    for name in LINEARS:
        wt = np.asarray(getattr(weights, name)).T
        if mode == "lwc":
            clips[name] = LWCParams.init(spec.n_groups(*wt.shape), init_logit)
        else:
            clips[name] = init_clip(mode, wt, spec)
    return clips


def _grid_clips(fused: BlockWeights, spec: QuantSpec) -> dict:
    return {name: grid_search_clip(np.asarray(getattr(fused, name)).T, spec) for name in LINEARS}


def _flatten(let: LETParams, clips: Mapping) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    params, group = {}, {}
    for k, v in let.tensors().items():
        params[f"let.{k}"] = np.array(v, dtype=np.float64)
        group[f"let.{k}"] = "let"
    for name, c in clips.items():
        for attr, v in vars(c).items():
            params[f"clip.{name}.{attr}"] = np.array(v, dtype=np.float64)
            group[f"clip.{name}.{attr}"] = "clip"
    return params, group


def _unflatten(params: Mapping, template_clips: Mapping) -> tuple[LETParams, dict]:
    let = LETParams.from_tensors({k[4:]: v for k, v in params.items() if k.startswith("let.")})
    clips = {}
    for name, c in template_clips.items():
        kw = {attr: params[f"clip.{name}.{attr}"] for attr in vars(c)}
        clips[name] = type(c)(**kw)
    return let, clips


def _active_groups(schedule: str, step: int, epoch: int, available: set[str]) -> set[str]:
    if schedule == "simultaneous" or len(available) < 2:
        return available
    k = step if schedule == "alt-iter" else epoch
    return {"clip" if k % 2 == 0 else "let"}


def _snapshot(params: Mapping, cfg: CalibConfig) -> dict:
    return {"lr_lwc": cfg.lr_lwc, "lr_let": cfg.lr_let,
            "params": {k: {"min": float(np.nanmin(v)), "max": float(np.nanmax(v)),
                           "finite": bool(np.isfinite(v).all())} for k, v in params.items()}}


def calibrate_block(block: BlockWeights, x_fp: np.ndarray, x_q: np.ndarray, cfg: CalibConfig,
                    heads: int = 4, block_index: int = 0) -> BlockResult:
    """Learn clipping and transformation parameters for one frozen block.

    ``x_fp``/``x_q`` are ``(n, T, C)`` stacks of calibration samples; each
    optimizer step uses one sample (batch size 1). After every epoch the
    full-set loss is evaluated and the best parameters seen so far (the
    initial ones included) are what gets returned, so the final loss never
    exceeds the initial one.
    """
    x_fp = np.asarray(x_fp, dtype=np.float64)
    x_q = np.asarray(x_q, dtype=np.float64)
    if x_fp.shape != x_q.shape:
        raise ValueError(f"X_fp {x_fp.shape} and X_q {x_q.shape} must have identical shapes")
    block = block.numpy(np.float64)
    quant = cfg.quant
    spec = quant.weight_spec
    pairs = cfg.resolved_pairs
    clip_mode = cfg.resolved_clip
    if len(x_q) == 0:
        # data-free baselines: nothing to measure or learn
        if pairs or clip_mode in ("lwc", "pact", "lsq"):
            raise ConfigError("calibration samples are required for learned or data-driven parameters")
        return BlockResult(LETParams(), {}, None, None, [], [], 0, 0)
    target = block_core(x_fp, block, heads).data
    if pairs:
        let0 = init_let(_activation_stats(block, x_fp, heads), block, pairs, cfg.scale_init,
                        cfg.resolved_shift_init, cfg.alpha, cfg.out_shift)
    else:
        let0 = LETParams()
    clips0 = _init_clips(fuse_let(block, let0).numpy(np.float64), spec, clip_mode, cfg.lwc_init)
    params, group = _flatten(let0, clips0)

    grid = {"clips": {}}

    def full_loss(p) -> float:
        let, clips = _unflatten(p, clips0)
        if clip_mode == "grid" and spec.enabled:
            # grid clipping is re-derived from the current fused weights, then held fixed
            grid["clips"] = _grid_clips(fuse_let(block, let.numpy()).numpy(np.float64), spec)
            clips = grid["clips"]
        y = block_forward(x_q, block, quant, let, clips, heads)
        return float(ad.mse(y, target).data)

    initial = full_loss(params)
    best_grid = grid["clips"]
    if not np.isfinite(initial):
        raise NumericalFailure(f"block {block_index}: initial loss is not finite", _snapshot(params, cfg))
    best, best_loss, best_epoch = dict(params), initial, 0
    epochs = cfg.resolved_epochs if params else 0
    lr = {k: cfg.lr_let if g == "let" else cfg.lr_lwc for k, g in group.items()}
    states = {"let": AdamWState(), "clip": AdamWState()}
    available = set(group.values())
    rng = np.random.default_rng([cfg.seed, block_index])
    losses, epoch_losses, step = [], [], 0
    for epoch in range(epochs):
        for i in rng.permutation(len(x_q)):
            active = _active_groups(cfg.schedule, step, epoch, available)
            with ad.Tape() as tape:
                tv = {k: tape.variable(v) for k, v in params.items()}
                let, clips = _unflatten(tv, clips0)
                clips = clips or grid["clips"]
                loss = ad.mse(block_forward(x_q[i], block, quant, let, clips, heads), target[i])
                lval = float(loss.data)
                if not np.isfinite(lval):
                    raise NumericalFailure(
                        f"block {block_index}: loss became {lval} at epoch {epoch} step {step}",
                        _snapshot(params, cfg))
                grads = tape.backward(loss)
            losses.append(lval)
            step += 1
            for gname in active:
                names = [k for k in params if group[k] == gname]
                g = {k: grads[tv[k].node].data for k in names}
                g, _ = clip_grad_norm(g, cfg.grad_clip)
                params.update(adamw_step({k: params[k] for k in names}, g, states[gname],
                                         {k: lr[k] for k in names}, cfg.weight_decay))
        cur = full_loss(params)
        epoch_losses.append(cur)
        if np.isfinite(cur) and cur < best_loss:
            best, best_loss, best_epoch, best_grid = dict(params), cur, epoch + 1, grid["clips"]
    let, clips = _unflatten(best, clips0)
    clips = clips or best_grid
    return BlockResult(let.numpy(), clips, initial, best_loss, losses, epoch_losses, step, best_epoch)


def _finalize_block(block: BlockWeights, res: BlockResult, cfg: CalibConfig) -> QuantizedBlock:
    """Fuse the learned transform, then export integer codes with the learned clipping."""
    fused = fuse_let(block.numpy(np.float64), res.let).numpy(np.float64)
    spec = cfg.quant.weight_spec
    dense = {k: v for k, v in fused.items() if k not in LINEARS or not spec.enabled}
    qb = QuantizedBlock(dense)
    if not spec.enabled:
        return qb
    for name in LINEARS:
        wt = getattr(fused, name).T
        clip = res.clips.get(name)
        if cfg.resolved_clip == "grid":
            clip = clip if clip is not None else grid_search_clip(wt, spec)
            qb.strengths[name] = clip
        elif isinstance(clip, LWCParams):
            g, b = clip.strengths()
            qb.strengths[name] = (g.data.copy(), b.data.copy())
        qb.codes[name], qb.qparams[name] = integer_quantize(wt, spec, clip)
    return qb


def _trace(i: int, cfg: CalibConfig, res: BlockResult, seconds: float) -> dict:
    return {"block_index": i, "method": cfg.method, "initial_loss": res.initial_loss,
            "final_loss": res.final_loss, "steps": res.steps, "wall_seconds": seconds,
            "best_epoch": res.best_epoch, "epoch_losses": res.epoch_losses}


def calibrate_model(model: ModelWeights, segments: np.ndarray, cfg: CalibConfig,
                    progress: Callable[[dict], None] | None = None
                    ) -> tuple[QuantizedModel, list[dict]]:
    """Quantize every block in order; returns the model and one trace dict per block.

    ``segments`` is an ``(n, L)`` array of token ids.
    """
    segments = np.asarray(segments)
    if segments.ndim != 2:
        raise ValueError(f"segments must be (n, L), got shape {segments.shape}")
    fp = model.astype(np.float64)
    x_fp = embed(fp, segments).data if len(segments) else np.zeros((0, segments.shape[1], fp.config.d_model))
    x_q = x_fp.copy()
    heads = fp.config.heads
    quant = cfg.quant
    blocks, traces = [], []
    for i, block in enumerate(fp.blocks):
        t0 = time.perf_counter()
        res = calibrate_block(block, x_fp, x_q, cfg, heads, i)
        qb = _finalize_block(block, res, cfg)
        trace = _trace(i, cfg, res, time.perf_counter() - t0)
        traces.append(trace)
        log.info("block %d: loss %.6g -> %.6g (%d steps)", i, res.initial_loss, res.final_loss, res.steps)
        if progress is not None:
            progress(trace)
        qw = qb.weights(quant.weight_spec, np.float64)
        x_fp = block_core(x_fp, block, heads).data
        x_q = block_core(x_q, qw, heads, quant.a_bits, quant.softmax_bits).data
        blocks.append(qb)
    emb = {k: np.asarray(getattr(model, k), dtype=np.float32) for k in ("tok_emb", "pos_emb", "lnf_w", "lnf_b")}
    meta = {"calibration": cfg.resolved(), "n_segments": int(len(segments)),
            "seqlen": int(segments.shape[1])}
    return QuantizedModel(model.config, quant, emb, blocks, meta), traces


def baseline_quantize(model: ModelWeights, method: str, cfg: CalibConfig | None = None,
                      segments: np.ndarray | None = None) -> QuantizedModel:
    """RTN, fixed smoothing, or grid-searched clipping: no gradient steps.

    ``segments`` are only needed by ``smoothquant`` (activation statistics).
    """
    if method not in BASELINES:
        raise ConfigError(f"unknown baseline method {method!r}; expected one of {BASELINES}")
    cfg = replace(cfg or CalibConfig(), method=method)
    if segments is None:
        if method == "smoothquant":
            raise ConfigError("smoothquant needs calibration segments for activation statistics")
        segments = np.zeros((0, 1), dtype=np.int64)
    return calibrate_model(model, segments, cfg)[0]
