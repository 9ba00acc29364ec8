"""Remaining-duration regression with corridor-weighted robust losses.

The regressor reuses the appearance embedding and causal context; the head
maps [embedding, context, elapsed minutes] through one tanh layer to a
scaled duration output (scale 0.05 by default). Training losses compare
scaled values:

    smooth_l1(x) = 0.5 x^2 / beta        for |x| < beta,
                   |x| - 0.5 beta        otherwise,

optionally weighted by the corridor factor pi(y, t). The corridor runs from
the ground truth gt(t) to a border c(t) that blends gt with the naive
median-based guess n(t) = max(t_median - t, 0):

    prog(t)  = t / (gt + t)
    alpha(t) = 1 - 2 / (1 + exp(5 * prog))
    c(t)     = alpha * gt + (1 - alpha) * n(t)
    pi(y, t) = ((y - gt) / (c - gt))^2 inside the corridor, else 1.

pi is computed on minute values (it is scale-invariant) and carries no
gradient. Four pipelines consume an upstream segmentation result: frozen
feature extraction, low-rate pretraining transfer, joint training with an
auxiliary head (regularization), and a from-scratch single-task baseline.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .appearance import (
    DenseLayer,
    TrainConfig,
    _embed_backward,
    _embed_chain,
    context_accumulate,
    context_backward,
    init_dense,
    log_softmax,
)
from .core import Corpus, VideoSequence
from .errors import DataFormatError
from .segtrain import SegCheckpoint, uniform_labels
from .optim import make_optimizer

logger = logging.getLogger("segrsd")

PIPELINES = ("feature_extraction", "pretraining", "regularization", "single_task")
AUX_TASKS = ("none", "learned_seg", "uniform", "progress", "phase")
LOSSES = ("smoothl1", "corr")


# ---------------------------------------------------------------------------
# losses

def smooth_l1(y, target, beta: float = 1.0):
    """Huber-style loss; quadratic inside |y - target| < beta, linear outside."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = np.abs(np.asarray(y, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    out = np.where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(y, target, beta: float = 1.0):
    """d smooth_l1 / d y."""
    x = np.asarray(y, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    out = np.where(np.abs(x) < beta, x / beta, np.sign(x))
    return float(out) if out.ndim == 0 else out


def progress(t_elapsed, gt_remaining):
    """Fraction of the procedure elapsed: t / (gt + t), in [0, 1]."""
    t = np.asarray(t_elapsed, dtype=np.float64)
    gt = np.asarray(gt_remaining, dtype=np.float64)
    if np.any(t < 0) or np.any(gt < 0):
        raise ValueError("elapsed and remaining times must be non-negative")
    total = t + gt
    if np.any(total <= 0):
        raise ValueError("progress undefined at t = gt = 0")
    out = t / total
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CorridorParams:
    t_median: float
    scale: float = 0.05
    beta: float = 1.0

    def __post_init__(self):
        if self.t_median <= 0 or self.scale <= 0 or self.beta <= 0:
            raise ValueError("corridor parameters must be positive")

    @classmethod
    def from_corpus(cls, corpus: Corpus, scale: float = 0.05, beta: float = 1.0):
        durations = [v.duration_min for v in corpus.by_split("train")]
        if not durations:
            raise ValueError("corpus has no training videos")
        return cls(float(np.median(durations)), scale, beta)


def naive_prediction(t_elapsed, params: CorridorParams):
    """Median-based guess n(t) = max(t_median - t, 0)."""
    out = np.maximum(params.t_median - np.asarray(t_elapsed, dtype=np.float64), 0.0)
    return float(out) if out.ndim == 0 else out


def corridor_border(t_elapsed, gt_remaining, params: CorridorParams):
    """Corridor edge c(t): early in a procedure it leans on the naive guess."""
    prog = progress(t_elapsed, gt_remaining)
    alpha = 1.0 - 2.0 / (1.0 + np.exp(5.0 * np.asarray(prog)))
    naive = naive_prediction(t_elapsed, params)
    out = alpha * np.asarray(gt_remaining, dtype=np.float64) + (1.0 - alpha) * naive
    return float(out) if out.ndim == 0 else out


def corridor_weight(y, t_elapsed, gt_remaining, params: CorridorParams):
    """pi(y, t): quadratic ramp from 0 at gt to 1 at the corridor border.

    Outside the corridor (and when the corridor is degenerate, c = gt) the
    weight is 1. Inputs are minute values; the weight is scale-invariant.
    """
    y = np.asarray(y, dtype=np.float64)
    gt = np.asarray(gt_remaining, dtype=np.float64)
    border = np.asarray(corridor_border(t_elapsed, gt_remaining, params))
    span = border - gt
    inside = (y - gt) * (y - border) <= 0
    safe = np.where(span == 0, 1.0, span)
    ramp = ((y - gt) / safe) ** 2
    out = np.where(inside & (span != 0), ramp, 1.0)
    return float(out) if out.ndim == 0 else out


def corr_smooth_l1(y, t_elapsed, gt_remaining, params: CorridorParams):
    """Corridor-weighted smooth L1 on scaled values; pi carries no gradient."""
    pi = corridor_weight(y, t_elapsed, gt_remaining, params)
    base = smooth_l1(
        params.scale * np.asarray(y, dtype=np.float64),
        params.scale * np.asarray(gt_remaining, dtype=np.float64),
        params.beta,
    )
    out = np.asarray(pi) * np.asarray(base)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# model

@dataclass
class PipelineMode:
    pipeline: str
    aux_task: str = "none"

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.aux_task not in AUX_TASKS:
            raise ValueError(f"unknown aux task {self.aux_task!r}")
        if self.pipeline == "single_task" and self.aux_task != "none":
            raise ValueError("single_task takes no auxiliary task")
        if self.pipeline != "single_task" and self.aux_task == "none":
            raise ValueError(f"{self.pipeline} needs an auxiliary task as its source")


@dataclass
class RsdParams:
    """Embedding stack + context, two-layer duration head, optional aux head."""

    embed: list[DenseLayer]
    context_lambda: float
    head1: DenseLayer               # (head_dim, 2*emb + 1), tanh
    head2: DenseLayer               # (1, head_dim), linear
    aux_head: DenseLayer | None = None
    aux_kind: str = "none"          # none | classes | progress
    trainable_mask: list[bool] = field(default_factory=list)
    output_scale: float = 0.05

    def __post_init__(self):
        emb_dim = self.embed[-1].out_dim
        if self.head1.in_dim != 2 * emb_dim + 1:
            raise ValueError("duration head must take [embedding, context, elapsed]")
        if self.head2.in_dim != self.head1.out_dim or self.head2.out_dim != 1:
            raise ValueError("output layer shape mismatch")
        if not self.trainable_mask:
            self.trainable_mask = [True] * len(self.layer_list())
        if len(self.trainable_mask) != len(self.layer_list()):
            raise ValueError("trainable_mask must cover every layer")
        if self.aux_kind not in ("none", "classes", "progress"):
            raise ValueError(f"unknown aux kind {self.aux_kind!r}")
        if (self.aux_head is None) != (self.aux_kind == "none"):
            raise ValueError("aux head and aux kind must agree")

    def layer_list(self) -> list[DenseLayer]:
        layers = [*self.embed, self.head1, self.head2]
        if self.aux_head is not None:
            layers.append(self.aux_head)
        return layers

    @property
    def embedding_dim(self) -> int:
        return self.embed[-1].out_dim

    def copy(self) -> "RsdParams":
        return RsdParams(
            [layer.copy() for layer in self.embed],
            self.context_lambda,
            self.head1.copy(),
            self.head2.copy(),
            self.aux_head.copy() if self.aux_head is not None else None,
            self.aux_kind,
            list(self.trainable_mask),
            self.output_scale,
        )


@dataclass
class AuxInit:
    """Transferable upstream state: embedding stack and optional frame labels."""

    embed: list[DenseLayer]
    context_lambda: float
    labels: dict[str, np.ndarray] | None = None

    @classmethod
    def from_checkpoint(cls, ckpt: SegCheckpoint) -> "AuxInit":
        app = ckpt.appearance
        return cls([l.copy() for l in app.layers[:-1]], app.context_lambda, dict(ckpt.labels))


def init_rsd(
    rng: np.random.Generator,
    n_features: int,
    hidden_dim: int = 32,
    head_dim: int = 16,
    context_lambda: float = 0.9,
    aux_kind: str = "none",
    aux_dim: int = 0,
    output_scale: float = 0.05,
    embed: Sequence[DenseLayer] | None = None,
) -> RsdParams:
    embed_layers = (
        [layer.copy() for layer in embed]
        if embed is not None
        else [init_dense(rng, n_features, hidden_dim)]
    )
    emb_dim = embed_layers[-1].out_dim
    head1 = init_dense(rng, 2 * emb_dim + 1, head_dim)
    head2 = init_dense(rng, head_dim, 1)
    aux = init_dense(rng, emb_dim, aux_dim) if aux_kind != "none" else None
    return RsdParams(
        embed_layers, context_lambda, head1, head2, aux, aux_kind,
        output_scale=output_scale,
    )


def _rsd_cache(params: RsdParams, feats: np.ndarray, elapsed: np.ndarray):
    acts = _embed_chain(params.embed, feats)
    emb = acts[-1]
    ctx = context_accumulate(emb, params.context_lambda)
    inp = np.hstack([emb, ctx, elapsed[:, None]])
    hidden = np.tanh(inp @ params.head1.weights.T + params.head1.bias)
    scaled = hidden @ params.head2.weights.T + params.head2.bias
    return acts, emb, inp, hidden, scaled[:, 0]


def rsd_forward(params: RsdParams, video: VideoSequence, t: int | None = None):
    """Predicted remaining minutes, full sequence or a single frame index."""
    _, _, _, _, scaled = _rsd_cache(params, video.features, video.elapsed_min())
    minutes = scaled / params.output_scale
    return minutes if t is None else float(minutes[t])


def predict_video(params: RsdParams, video: VideoSequence) -> np.ndarray:
    return rsd_forward(params, video)


def _aux_output(params: RsdParams, emb: np.ndarray):
    if params.aux_head is None:
        return None
    z = emb @ params.aux_head.weights.T + params.aux_head.bias
    return z if params.aux_kind == "classes" else z[:, 0]


def rsd_loss_and_grads(
    params: RsdParams,
    video: VideoSequence,
    loss_name: str,
    corridor: CorridorParams,
    frame_indices=None,
    aux_target=None,
    aux_weight: float = 1.0,
    weight: float = 1.0,
    target_kind: str = "duration",
):
    """Per-video losses (mean over selected frames) with analytic gradients.

    target_kind "duration" regresses scaled remaining minutes; "progress"
    regresses prog(t) directly (used to pretrain transfer embeddings).
    Returns (loss, grads) with grads aligned to params.layer_list().
    """
    elapsed = video.elapsed_min()
    acts, emb, inp, hidden, scaled = _rsd_cache(params, video.features, elapsed)
    idx = np.arange(video.n_frames) if frame_indices is None else np.asarray(frame_indices)
    remaining = video.remaining_min()

    if target_kind == "duration":
        target = corridor.scale * remaining
        pred = scaled
        minutes = scaled / params.output_scale
        if loss_name == "smoothl1":
            pi = np.ones(video.n_frames)
        elif loss_name == "corr":
            pi = np.asarray(
                corridor_weight(minutes, elapsed, remaining, corridor), dtype=np.float64
            )
        else:
            raise ValueError(f"unknown loss {loss_name!r}")
    elif target_kind == "progress":
        target = progress(elapsed, remaining)
        pred = scaled
        pi = np.ones(video.n_frames)
    else:
        raise ValueError(f"unknown target kind {target_kind!r}")

    per_frame = pi[idx] * smooth_l1(pred[idx], target[idx], corridor.beta)
    loss = weight * float(np.mean(per_frame))
    dpred = np.zeros(video.n_frames)
    dpred[idx] = (
        weight / len(idx) * pi[idx] * smooth_l1_grad(pred[idx], target[idx], corridor.beta)
    )

    d_emb_aux = None
    aux_grad = None
    if params.aux_head is not None and aux_target is not None:
        z = emb @ params.aux_head.weights.T + params.aux_head.bias
        if params.aux_kind == "classes":
            y = np.asarray(aux_target, dtype=np.int64)[idx]
            lp = log_softmax(z[idx])
            loss += aux_weight * weight * float(-lp[np.arange(len(idx)), y].mean())
            dz_sel = np.exp(lp)
            dz_sel[np.arange(len(idx)), y] -= 1.0
            dz_sel *= aux_weight * weight / len(idx)
            dz = np.zeros_like(z)
            dz[idx] = dz_sel
        else:
            zp = z[:, 0]
            tgt = np.asarray(aux_target, dtype=np.float64)
            loss += aux_weight * weight * float(
                np.mean(smooth_l1(zp[idx], tgt[idx], corridor.beta))
            )
            dz = np.zeros_like(z)
            dz[idx, 0] = (
                aux_weight * weight / len(idx)
                * smooth_l1_grad(zp[idx], tgt[idx], corridor.beta)
            )
        aux_grad = [dz.T @ emb, dz.sum(axis=0)]
        d_emb_aux = dz @ params.aux_head.weights

    # backward through the duration head
    dhidden = dpred[:, None] * params.head2.weights
    grad_h2 = [dpred[None, :] @ hidden, np.array([dpred.sum()])]
    dpre1 = dhidden * (1.0 - hidden * hidden)
    grad_h1 = [dpre1.T @ inp, dpre1.sum(axis=0)]
    dinp = dpre1 @ params.head1.weights
    h = emb.shape[1]
    d_emb = dinp[:, :h] + context_backward(dinp[:, h:2 * h], params.context_lambda)
    if d_emb_aux is not None:
        d_emb = d_emb + d_emb_aux
    grads = _embed_backward(params.embed, acts, d_emb)
    grads.append(grad_h1)
    grads.append(grad_h2)
    if aux_grad is not None:
        grads.append(aux_grad)
    return loss, grads


# ---------------------------------------------------------------------------
# training

def default_train_config(pipeline: str, seed: int = 0) -> TrainConfig:
    """Adam for most pipelines; the pretraining transfer uses plain SGD longer."""
    if pipeline == "pretraining":
        return TrainConfig(learning_rate=1e-1, epochs=250, batch_size=384,
                           l2_weight=1e-5, optimizer="sgd", seed=seed)
    return TrainConfig(learning_rate=1e-2, epochs=200, batch_size=384,
                       l2_weight=1e-5, optimizer="adam", seed=seed)


def _resolve_aux_targets(
    corpus: Corpus, mode: PipelineMode, init: AuxInit | None, n_subactivities: int
):
    """Per-video targets for the regularization pipeline's auxiliary head."""
    videos = corpus.by_split("train")
    task = mode.aux_task
    if task == "learned_seg":
        if init is None or init.labels is None:
            raise DataFormatError("learned_seg regularization needs checkpoint labels")
        missing = [v.id for v in videos if v.id not in init.labels]
        if missing:
            raise DataFormatError(f"checkpoint lacks labels for videos {missing}")
        targets = {v.id: np.asarray(init.labels[v.id], dtype=np.int64) for v in videos}
        return targets, "classes", int(max(t.max() for t in targets.values())) + 1
    if task == "uniform":
        targets = {v.id: uniform_labels(v, n_subactivities) for v in videos}
        return targets, "classes", n_subactivities
    if task == "phase":
        missing = [v.id for v in videos if v.phase_labels is None]
        if missing:
            raise DataFormatError(f"phase task needs phase labels; missing for {missing}")
        targets = {v.id: v.phase_labels for v in videos}
        return targets, "classes", int(max(t.max() for t in targets.values())) + 1
    if task == "progress":
        targets = {
            v.id: progress(v.elapsed_min(), v.remaining_min()) for v in videos
        }
        return targets, "progress", 1
    raise ValueError(f"aux task {task!r} has no targets")


def mae_of(params: RsdParams, videos: Sequence[VideoSequence]) -> float:
    """Macro-averaged MAE in minutes (per-video mean first)."""
    errs = [
        float(np.mean(np.abs(predict_video(params, v) - v.remaining_min())))
        for v in videos
    ]
    return float(np.mean(errs))


def train_rsd(
    corpus: Corpus,
    init: AuxInit | SegCheckpoint | None,
    mode: PipelineMode,
    loss_name: str,
    config: TrainConfig,
    corridor: CorridorParams,
    hidden_dim: int = 32,
    head_dim: int = 16,
    context_lambda: float = 0.9,
    aux_weight: float = 1.0,
    n_subactivities: int = 10,
    target_kind: str = "duration",
    verbose: bool = True,
):
    """Train one pipeline; returns (best-val params, history rows).

    History rows are (epoch, train_loss, val_mae). The returned parameters
    are the snapshot with the lowest validation MAE. A non-finite loss stops
    training and returns the best parameters seen so far.
    """
    if loss_name not in LOSSES:
        raise ValueError(f"unknown loss {loss_name!r}")
    if isinstance(init, SegCheckpoint):
        init = AuxInit.from_checkpoint(init)
    transfer = mode.pipeline in ("feature_extraction", "pretraining")
    if transfer and init is None:
        raise ValueError(f"{mode.pipeline} needs an upstream embedding to transfer")

    rng = np.random.default_rng(config.seed)
    aux_targets, aux_kind, aux_dim = None, "none", 0
    if mode.pipeline == "regularization":
        aux_targets, aux_kind, aux_dim = _resolve_aux_targets(
            corpus, mode, init, n_subactivities
        )
    params = init_rsd(
        rng,
        corpus.feature_dim,
        hidden_dim=hidden_dim,
        head_dim=head_dim,
        context_lambda=init.context_lambda if transfer else context_lambda,
        aux_kind=aux_kind,
        aux_dim=aux_dim,
        output_scale=1.0 if target_kind == "progress" else corridor.scale,
        embed=init.embed if transfer else None,
    )
    n_embed = len(params.embed)
    lr_mult = [1.0] * len(params.layer_list())
    if mode.pipeline == "feature_extraction":
        for i in range(n_embed):
            params.trainable_mask[i] = False
    elif mode.pipeline == "pretraining":
        for i in range(n_embed - 1):
            params.trainable_mask[i] = False
        lr_mult[n_embed - 1] = 0.1

    train_videos = corpus.by_split("train")
    val_videos = corpus.by_split("val")
    if not train_videos:
        raise ValueError("corpus has no training videos")
    history: list[tuple[int, float, float]] = []
    best = params.copy()
    best_mae = np.inf
    if config.epochs <= 0:
        return best, history

    opt = make_optimizer(config)
    frames = [(vi, t) for vi, v in enumerate(train_videos) for t in range(v.n_frames)]
    layers = params.layer_list()
    for epoch in range(config.epochs):
        perm = rng.permutation(len(frames))
        epoch_losses = []
        aborted = False
        for start in range(0, len(frames), config.batch_size):
            chosen = [frames[i] for i in perm[start:start + config.batch_size]]
            by_video: dict[int, list[int]] = {}
            for vi, t in chosen:
                by_video.setdefault(vi, []).append(t)
            loss = 0.0
            total = [None] * len(layers)
            for vi in sorted(by_video):
                video = train_videos[vi]
                idx = np.sort(np.asarray(by_video[vi]))
                part, grads = rsd_loss_and_grads(
                    params, video, loss_name, corridor,
                    frame_indices=idx,
                    aux_target=aux_targets[video.id] if aux_targets else None,
                    aux_weight=aux_weight,
                    weight=1.0 / len(by_video),
                    target_kind=target_kind,
                )
                loss += part
                for i, g in enumerate(grads):
                    if total[i] is None:
                        total[i] = g
                    else:
                        total[i][0] += g[0]
                        total[i][1] += g[1]
            if config.l2_weight:
                for layer, grad in zip(layers, total):
                    loss += 0.5 * config.l2_weight * float((layer.weights ** 2).sum())
                    grad[0] += config.l2_weight * layer.weights
            if not np.isfinite(loss):
                logger.error("non-finite loss at epoch %d; stopping with best params", epoch)
                aborted = True
                break
            opt.step(layers, total, params.trainable_mask, lr_mult)
            epoch_losses.append(loss)
        if aborted:
            break
        if target_kind == "progress":
            val_mae = _progress_mae(params, val_videos or train_videos)
        else:
            val_mae = mae_of(params, val_videos or train_videos)
        history.append((epoch, float(np.mean(epoch_losses)), val_mae))
        if verbose:
            print(f"epoch={epoch} loss={np.mean(epoch_losses):.6f} val_mae={val_mae:.6f}")
        if val_mae < best_mae:
            best_mae = val_mae
            best = params.copy()
    return best, history


def _progress_mae(params: RsdParams, videos: Sequence[VideoSequence]) -> float:
    errs = []
    for v in videos:
        _, _, _, _, scaled = _rsd_cache(params, v.features, v.elapsed_min())
        target = progress(v.elapsed_min(), v.remaining_min())
        errs.append(float(np.mean(np.abs(scaled - target))))
    return float(np.mean(errs))


def build_aux_init(
    corpus: Corpus,
    aux_task: str,
    checkpoint: SegCheckpoint | None = None,
    n_subactivities: int = 10,
    hidden_dim: int = 32,
    head_dim: int = 16,
    context_lambda: float = 0.9,
    config: TrainConfig | None = None,
    corridor: CorridorParams | None = None,
) -> AuxInit:
    """Produce the transferable embedding for a given auxiliary task.

    learned_seg reuses the checkpoint; uniform and phase train a classifier
    on their respective labels; progress trains a regressor on prog(t).
    """
    from .appearance import init_appearance, train_appearance

    if aux_task == "learned_seg":
        if checkpoint is None:
            raise ValueError("learned_seg transfer needs a segmentation checkpoint")
        return AuxInit.from_checkpoint(checkpoint)
    videos = corpus.by_split("train")
    config = config or TrainConfig(learning_rate=1e-2, epochs=40, seed=0)
    if aux_task in ("uniform", "phase"):
        if aux_task == "uniform":
            labels = {v.id: uniform_labels(v, n_subactivities) for v in videos}
            n_classes = n_subactivities
        else:
            missing = [v.id for v in videos if v.phase_labels is None]
            if missing:
                raise DataFormatError(f"phase transfer needs phase labels; missing for {missing}")
            labels = {v.id: v.phase_labels for v in videos}
            n_classes = int(max(l.max() for l in labels.values())) + 1
        params = init_appearance(
            np.random.default_rng(config.seed), corpus.feature_dim,
            [hidden_dim], n_classes, context_lambda,
        )
        params = train_appearance(videos, labels, params, config)
        return AuxInit([l.copy() for l in params.layers[:-1]], context_lambda, labels)
    if aux_task == "progress":
        corridor = corridor or CorridorParams.from_corpus(corpus)
        mode = PipelineMode("single_task", "none")
        params, _ = train_rsd(
            corpus, None, mode, "smoothl1", config, corridor,
            hidden_dim=hidden_dim, head_dim=head_dim,
            context_lambda=context_lambda, target_kind="progress", verbose=False,
        )
        return AuxInit([l.copy() for l in params.embed], context_lambda, None)
    raise ValueError(f"aux task {aux_task!r} does not define a transfer")
