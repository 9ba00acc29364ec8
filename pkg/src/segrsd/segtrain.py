"""Alternating trainer: appearance model vs. generative temporal model.

Each iteration trains the classifier on the current pseudo-labels with the
staged layer mask, refreshes the order/length models from the current
segmentations, resamples every training video's segmentation, and records a
checkpoint scored by temporal coherence (TC). The best checkpoint inside a
trailing iteration window is the one handed to downstream training.
"""
from __future__ import annotations

import copy
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .appearance import (
    AppearanceParams,
    TrainConfig,
    forward,
    init_appearance,
    mean_cross_entropy,
    staged_mask,
    tc_pretrain,
    train_appearance,
)
from .core import Corpus, Segmentation, derived_rng, segmentation_to_labels
from .errors import NumericalError
from .temporal import (
    LengthModel,
    MallowsModel,
    estimate_rho,
    inversions_to_order,
    mallows_sample,
    partial_order_inversions,
    sample_segmentation,
    update_theta,
)

logger = logging.getLogger("segrsd")


@dataclass
class SegTrainConfig:
    n_subactivities: int = 10
    iterations: int = 8
    epochs_per_iteration: int = 5
    selection_window: tuple[int, int] = (6, 8)
    sweeps_per_iteration: int = 25
    birth_death_prob: float = 0.1
    hidden_dim: int = 32
    context_lambda: float = 0.9
    tc_pretrain_epochs: int = 10
    nu0: float = 0.1
    r0: float = 1.0
    alpha0: float = 1.0
    seed: int = 0
    appearance: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            learning_rate=1e-2, epochs=5, batch_size=384, l2_weight=1e-4,
            optimizer="adam", seed=0,
        )
    )

    def __post_init__(self):
        a, b = self.selection_window
        if not (1 <= a <= b <= self.iterations) and self.iterations > 0:
            raise ValueError(
                f"selection window {self.selection_window} outside 1..{self.iterations}"
            )


@dataclass
class SegCheckpoint:
    iteration: int
    appearance: AppearanceParams
    mallows: MallowsModel
    lengths: LengthModel
    labels: dict[str, np.ndarray]
    tc_score: float


# ---------------------------------------------------------------------------
# initial labels

def uniform_labels(video, n_subactivities: int) -> np.ndarray:
    """Identity-order segmentation with near-equal lengths (earlier segments longer)."""
    seg = Segmentation(
        tuple(zip(range(n_subactivities), _uniform_lengths(video.n_frames, n_subactivities))),
        n_subactivities,
    )
    return segmentation_to_labels(seg)


def _uniform_lengths(n_frames: int, n_parts: int) -> list[int]:
    if n_frames < n_parts:
        raise ValueError(f"{n_frames} frames cannot host {n_parts} segments")
    base, extra = divmod(n_frames, n_parts)
    return [base + 1 if i < extra else base for i in range(n_parts)]


def init_labels(videos: Sequence, n_subactivities: int, rng, r0: float = 1.0) -> dict[str, Segmentation]:
    """Uniform lengths; subactivity order drawn from the Mallows prior at rho = r0."""
    prior = MallowsModel.with_constant_rho(n_subactivities, r0)
    out = {}
    for video in videos:
        order = inversions_to_order(mallows_sample(prior, rng))
        lengths = _uniform_lengths(video.n_frames, n_subactivities)
        out[video.id] = Segmentation(tuple(zip(order, lengths)), n_subactivities)
    return out


# ---------------------------------------------------------------------------
# temporal coherence measure

@dataclass(frozen=True)
class CoherentMatch:
    order: tuple[int, ...]
    accuracy: float
    exact: bool


def _order_accuracy(order, run_lengths, prefix, n_frames) -> int:
    matches = 0
    pos = 0
    for label in order:
        end = pos + run_lengths[label]
        matches += prefix[label][end] - prefix[label][pos]
        pos = end
    return matches


def best_coherent_match(pred_labels, n_subactivities: int) -> CoherentMatch:
    """Best agreement between the predictions and one coherent relabeling.

    A coherent relabeling keeps each present label's total footprint as one
    contiguous block; the search is over block orders. Exhaustive up to 8
    present labels (ties resolved toward the lexicographically smallest
    order); beyond that, 2-opt hill climbing from 16 Mallows-prior restarts,
    flagged exact=False.
    """
    labels = np.asarray(pred_labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("predictions must be a non-empty 1-d label sequence")
    n_frames = labels.size
    present = sorted(int(k) for k in np.unique(labels))
    if present[0] < 0 or present[-1] >= n_subactivities:
        raise ValueError("labels outside [0, K)")
    run_lengths = {k: int((labels == k).sum()) for k in present}
    prefix = {
        k: np.concatenate(([0], np.cumsum(labels == k))).astype(np.int64)
        for k in present
    }

    if len(present) <= 8:
        best_order, best_matches = None, -1
        for cand in itertools.permutations(present):
            m = _order_accuracy(cand, run_lengths, prefix, n_frames)
            if m > best_matches:
                best_order, best_matches = cand, m
        return CoherentMatch(best_order, best_matches / n_frames, True)

    rng = np.random.default_rng(0)  # fixed stream keeps reports reproducible
    prior = MallowsModel.with_constant_rho(len(present), 1.0)
    best_order, best_matches = tuple(present), _order_accuracy(
        tuple(present), run_lengths, prefix, n_frames
    )
    for _ in range(16):
        perm = inversions_to_order(mallows_sample(prior, rng))
        cand = [present[i] for i in perm]
        matches = _order_accuracy(cand, run_lengths, prefix, n_frames)
        improved = True
        while improved:
            improved = False
            for i in range(len(cand) - 1):
                for j in range(i + 1, len(cand)):
                    cand[i], cand[j] = cand[j], cand[i]
                    m = _order_accuracy(cand, run_lengths, prefix, n_frames)
                    if m > matches:
                        matches = m
                        improved = True
                    else:
                        cand[i], cand[j] = cand[j], cand[i]
        cand_t = tuple(cand)
        if matches > best_matches or (matches == best_matches and cand_t < best_order):
            best_order, best_matches = cand_t, matches
    return CoherentMatch(best_order, best_matches / n_frames, False)


def tc_from_labels(label_sequences, n_subactivities: int) -> float:
    """Mean best-coherent-match accuracy over the given label sequences."""
    scores = [
        best_coherent_match(labels, n_subactivities).accuracy
        for labels in label_sequences
    ]
    return float(np.mean(scores))


def tc_measure(params: AppearanceParams, videos: Sequence) -> float:
    """Temporal coherence of the classifier's argmax predictions."""
    preds = [np.argmax(forward(params, v), axis=1) for v in videos]
    return tc_from_labels(preds, params.n_classes)


def select_checkpoint(checkpoints: Sequence[SegCheckpoint], window: tuple[int, int]) -> SegCheckpoint:
    """Highest TC inside the iteration window; ties go to the latest iteration."""
    a, b = window
    eligible = [c for c in checkpoints if a <= c.iteration <= b]
    if not eligible:
        raise ValueError(f"no checkpoints inside iteration window {window}")
    best = eligible[0]
    for cand in eligible[1:]:
        if cand.tc_score >= best.tc_score:
            best = cand
    return best


# ---------------------------------------------------------------------------
# the alternating loop

def run(corpus: Corpus, config: SegTrainConfig, verbose: bool = True) -> list[SegCheckpoint]:
    """Alternate classifier training and segmentation resampling.

    Returns one checkpoint per completed iteration; a non-finite training
    loss ends the run early with the checkpoints gathered so far.
    """
    videos = corpus.by_split("train")
    if not videos:
        raise ValueError("corpus has no training videos")
    k = config.n_subactivities
    segs = init_labels(videos, k, derived_rng(config.seed, "init"), config.r0)
    params = init_appearance(
        derived_rng(config.seed, "weights"),
        corpus.feature_dim,
        [config.hidden_dim],
        k,
        config.context_lambda,
    )
    if config.tc_pretrain_epochs > 0:
        pre_cfg = replace(
            config.appearance,
            epochs=config.tc_pretrain_epochs,
            seed=int(derived_rng(config.seed, "tc").integers(2 ** 31)),
        )
        params = tc_pretrain(videos, params, pre_cfg)
    mallows = MallowsModel.with_constant_rho(k, config.r0, config.nu0, config.r0)
    length_model = LengthModel.uniform(k, config.alpha0)

    checkpoints: list[SegCheckpoint] = []
    for iteration in range(1, config.iterations + 1):
        labels = {vid: segmentation_to_labels(seg) for vid, seg in segs.items()}
        params.trainable_mask = staged_mask(iteration, len(params.layers))
        train_cfg = replace(
            config.appearance,
            epochs=config.epochs_per_iteration,
            seed=int(derived_rng(config.seed, "train", iteration).integers(2 ** 31)),
        )
        try:
            params = train_appearance(videos, labels, params, train_cfg)
        except NumericalError as err:
            logger.error("iteration %d aborted: %s", iteration, err)
            break
        probs = {v.id: forward(params, v) for v in videos}

        counts = np.zeros(k)
        for vid in labels:
            counts += np.bincount(labels[vid], minlength=k)
        length_model = LengthModel(k, update_theta(counts, length_model), config.alpha0)
        observed = [partial_order_inversions(segs[v.id].order, k) for v in videos]
        mallows = MallowsModel(k, estimate_rho(observed, mallows), config.nu0, config.r0)

        segs = {
            v.id: sample_segmentation(
                probs[v.id], mallows, length_model, segs[v.id],
                derived_rng(config.seed, "sample", iteration, v.id),
                sweeps=config.sweeps_per_iteration,
                birth_death_prob=config.birth_death_prob,
            )
            for v in videos
        }

        ce = mean_cross_entropy(params, videos, labels)
        tc = tc_measure(params, videos)
        if verbose:
            print(f"iter={iteration} ce={ce:.6f} tc={tc:.6f}")
        checkpoints.append(
            SegCheckpoint(
                iteration=iteration,
                appearance=params.copy(),
                mallows=copy.deepcopy(mallows),
                lengths=copy.deepcopy(length_model),
                labels={vid: segmentation_to_labels(seg) for vid, seg in segs.items()},
                tc_score=tc,
            )
        )
    return checkpoints
