"""Clip loss, Adam updates and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import grad as G
from .convlstm import NetworkConfig, forward
from .errors import NumericalError
from .tensor import ShapeError

log = logging.getLogger(__name__)


def loss(preds: Sequence, targets: Sequence, roi: np.ndarray | None = None):
    """Half mean-over-time squared Euclidean distance between predicted and true maps.

    ``L = 1/(2T) * sum_t ||pred_t - target_t||^2``, restricted to the ROI when given.
    """
    if len(preds) != len(targets) or not preds:
        raise ShapeError(f"loss: {len(preds)} predictions vs {len(targets)} targets")
    acc = None
    for p, t in zip(preds, targets):
        d = G.sub(p, t)
        if roi is not None:
            d = G.hadamard(d, roi.astype(G.value(d).dtype, copy=False))
        term = G.total(G.hadamard(d, d))
        acc = term if acc is None else G.add(acc, term)
    return G.scale(acc, 1.0 / (2 * len(preds)))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update. Returns ``(new_params, state)``; ``state`` is updated in place."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise G.GradientError(f"no gradient for parameters {missing[:4]}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        m_hat = m / c1
        v_hat = v / c2
        new[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return new, state


# ---------------------------------------------------------------- training


@dataclass
class TrainOptions:
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    patience: int = 10
    eval_every: int = 1
    seed: int = 0


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    adam: AdamState
    loss_log: list[tuple[int, float]]
    val_log: list[tuple[int, float]]
    best_epoch: int


def clip_loss_and_grads(params, config: NetworkConfig, frames, targets, roi=None):
    tape = G.Tape()
    watched = tape.watch(params)
    preds = forward(frames, watched, config)
    L = loss(preds, targets, roi)
    value = float(G.value(L))
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    return value, G.backward(tape, L)


def train(
    params: Mapping[str, np.ndarray],
    config: NetworkConfig,
    clips: Sequence,
    options: TrainOptions = TrainOptions(),
    roi: np.ndarray | None = None,
    validate: Callable[[dict], float] | None = None,
    adam: AdamState | None = None,
) -> TrainResult:
    """Fit ``params`` on clips carrying ``frames`` and ``densities``.

    One Adam update per ``batch_size`` clips (losses averaged). A clip's own
    ``roi`` takes precedence over the shared ``roi`` argument. If ``validate``
    is given it is called every ``eval_every`` epochs with the current
    parameters and must return a validation MAE; training stops once it has
    not improved for ``patience`` evaluations and the best parameters are
    returned.
    """
    params = {k: np.array(v) for k, v in params.items()}
    if adam is None:
        adam = AdamState(options.lr, options.beta1, options.beta2, options.eps)
    rng = np.random.default_rng(options.seed)
    loss_log, val_log = [], []
    best = (math.inf, 0, params)
    stale = 0
    for epoch in range(1, options.epochs + 1):
        order = rng.permutation(len(clips))
        epoch_loss = 0.0
        for start in range(0, len(order), options.batch_size):
            batch = [clips[i] for i in order[start:start + options.batch_size]]
            acc = None
            for clip in batch:
                mask = clip.roi if getattr(clip, "roi", None) is not None else roi
                value, grads = clip_loss_and_grads(params, config, clip.frames, clip.densities, mask)
                epoch_loss += value
                acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
            if len(batch) > 1:
                acc = {k: g / len(batch) for k, g in acc.items()}
            params, adam = adam_step(params, acc, adam)
        epoch_loss /= max(len(clips), 1)
        loss_log.append((epoch, epoch_loss))
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
        if validate is not None and epoch % options.eval_every == 0:
            mae = validate(params)
            val_log.append((epoch, mae))
            log.info("epoch %d loss %.6g val_mae %.4f", epoch, epoch_loss, mae)
            if mae < best[0]:
                best, stale = (mae, epoch, params), 0
            else:
                stale += 1
                if stale >= options.patience:
                    break
    if validate is None:
        return TrainResult(params, adam, loss_log, val_log, len(loss_log))
    return TrainResult(best[2], adam, loss_log, val_log, best[1])
