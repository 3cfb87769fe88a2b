"""Cross-entropy pretraining of the tiny byte LM with AdamW and cosine decay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ModelWeights, TinyModelConfig, head, embed, block_forward, init_weights
from .optim import AdamWState, adamw_step, clip_grad_norm

log = logging.getLogger(__name__)

MIN_CORPUS_BYTES = 64 * 1024


class CorpusTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    warmup: int = 50
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0


def lr_at(step: int, cfg: PretrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    cos = 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
    return cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos)


def lm_loss(model: ModelWeights, x: np.ndarray, y: np.ndarray) -> ad.Tensor:
    h = embed(model, x)
    for b in model.blocks:
        h = block_forward(h, b, heads=model.config.heads)
    return ad.cross_entropy(head(model, h), y)


def pretrain_tiny(corpus: bytes, config: TinyModelConfig = TinyModelConfig(),
                  train: PretrainConfig = PretrainConfig(), callback=None
                  ) -> tuple[ModelWeights, list[float]]:
    """Train from a seeded init; returns float32 weights and the per-step loss curve.

    Everything (init, batch sampling, update order) derives from ``train.seed``,
    so a fixed seed reproduces identical weights.
    """
    if len(corpus) < MIN_CORPUS_BYTES:
        raise CorpusTooSmall(f"corpus has {len(corpus)} bytes; need at least {MIN_CORPUS_BYTES}")
    data = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
    t = config.context
    rng = np.random.default_rng(train.seed)
    params = {k: v.astype(np.float32) for k, v in init_weights(config, train.seed).tensors().items()}
    decay = {k: (train.weight_decay if v.ndim == 2 else 0.0) for k, v in params.items()}
    state = AdamWState()
    losses = []
    for step in range(train.steps):
        starts = rng.integers(0, len(data) - t - 1, size=train.batch_size)
        idx = starts[:, None] + np.arange(t)[None, :]
        x, y = data[idx], data[idx + 1]
        with ad.Tape() as tape:
            tvars = {k: tape.variable(v) for k, v in params.items()}
            loss = lm_loss(ModelWeights.from_tensors(config, tvars), x, y)
            grads = tape.backward(loss)
        g = {k: grads[tv.node].data for k, tv in tvars.items()}
        g, _ = clip_grad_norm(g, train.grad_clip)
        params = adamw_step(params, g, state, lr_at(step, train), decay)
        losses.append(float(loss.data))
        if callback is not None:
            callback(step, losses[-1])
        if step % 200 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    return ModelWeights.from_tensors(config, params), losses
