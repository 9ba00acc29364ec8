"""Generative temporal model: subactivity orders and segment lengths.

Orders follow a Generalized Mallows distribution in its inversion-vector
parameterization: slot i (0-based, i < K-1) holds v_i, the number of
subactivities j > i placed before i, with v_i in {0..K-1-i} and

    log P(v) = sum_i [ -rho_i * v_i - log psi_i(rho_i) ],
    psi_i(rho) = (1 - exp(-n_i*rho)) / (1 - exp(-rho)),  n_i = K - i,

so slots are independent truncated geometrics. Lengths are one frame plus a
multinomial split of the remaining frames over the present subactivities.
Segmentations are resampled by Metropolis-within-Gibbs moves: boundary
shifts, adjacent order swaps, and birth/death of unit-length segments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .core import Segmentation

LOG_FLOOR = -745.0  # below log(smallest subnormal double); used for zero probabilities

_zero_prob_events = 0


def zero_prob_events() -> int:
    """How many per-frame zero probabilities were floored since the last reset."""
    return _zero_prob_events


def reset_zero_prob_events() -> None:
    global _zero_prob_events
    _zero_prob_events = 0


@dataclass
class MallowsModel:
    """Dispersion per inversion slot plus the conjugate-style prior weights."""

    n_subactivities: int
    rho: np.ndarray = field(repr=False)  # (K-1,) non-negative
    nu0: float = 0.1   # prior strength (pseudo-observation count)
    r0: float = 1.0    # prior mean inversion count per slot

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.n_subactivities < 1:
            raise ValueError("need at least one subactivity")
        if self.rho.shape != (self.n_subactivities - 1,):
            raise ValueError(
                f"rho must have {self.n_subactivities - 1} entries, got {self.rho.shape}"
            )
        if self.rho.size and self.rho.min() < 0:
            raise ValueError("rho entries must be non-negative")

    @classmethod
    def with_constant_rho(cls, n_subactivities, rho_value, nu0=0.1, r0=1.0):
        return cls(n_subactivities, np.full(max(n_subactivities - 1, 0), float(rho_value)), nu0, r0)


@dataclass
class LengthModel:
    """Multinomial split of frames over present subactivities."""

    n_subactivities: int
    theta: np.ndarray = field(repr=False)  # (K,) simplex
    alpha0: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n_subactivities,):
            raise ValueError("theta must have one entry per subactivity")
        if self.theta.min() < 0 or not math.isclose(float(self.theta.sum()), 1.0, abs_tol=1e-9):
            raise ValueError("theta must be a probability vector")

    @classmethod
    def uniform(cls, n_subactivities, alpha0=1.0):
        return cls(n_subactivities, np.full(n_subactivities, 1.0 / n_subactivities), alpha0)


# ---------------------------------------------------------------------------
# inversion-vector calculus

def inversions_to_order(v) -> tuple[int, ...]:
    """Reconstruct the permutation whose inversion counts are v."""
    v = np.asarray(v, dtype=np.int64)
    k = v.size + 1
    order: list[int] = []
    for item in range(k - 1, -1, -1):
        slot = 0 if item == k - 1 else int(v[item])
        if not 0 <= slot <= len(order):
            raise ValueError(f"inversion count {slot} out of range for item {item}")
        order.insert(slot, item)
    return tuple(order)


def order_to_inversions(order) -> np.ndarray:
    """v_i = number of items j > i placed before item i."""
    order = tuple(int(x) for x in order)
    k = len(order)
    if sorted(order) != list(range(k)):
        raise ValueError("order must be a permutation of 0..K-1")
    pos = {item: p for p, item in enumerate(order)}
    v = np.zeros(max(k - 1, 0), dtype=np.int64)
    for item in range(k - 1):
        v[item] = sum(1 for j in range(item + 1, k) if pos[j] < pos[item])
    return v


def partial_order_inversions(present_order, n_subactivities: int) -> np.ndarray:
    """Inversions induced by an order over a subset; absent items count zero."""
    present_order = tuple(int(x) for x in present_order)
    if len(set(present_order)) != len(present_order):
        raise ValueError("present order must not repeat subactivities")
    pos = {item: p for p, item in enumerate(present_order)}
    v = np.zeros(max(n_subactivities - 1, 0), dtype=np.int64)
    for item in present_order:
        if not 0 <= item < n_subactivities:
            raise ValueError(f"subactivity {item} out of range")
        if item < n_subactivities - 1:
            v[item] = sum(
                1 for j in present_order if j > item and pos[j] < pos[item]
            )
    return v


def _log_psi(rho: float, n: int) -> float:
    if rho == 0.0:
        return math.log(n)
    # (1 - e^{-n rho}) / (1 - e^{-rho}), written with expm1 for small rho
    return math.log(math.expm1(-n * rho) / math.expm1(-rho))


def mallows_log_prob(v, model: MallowsModel) -> float:
    v = np.asarray(v, dtype=np.int64)
    k = model.n_subactivities
    if v.shape != (k - 1,):
        raise ValueError(f"inversion vector must have {k - 1} entries")
    total = 0.0
    for i in range(k - 1):
        n = k - i
        if not 0 <= v[i] < n:
            raise ValueError(f"slot {i} inversion count {v[i]} outside [0, {n - 1}]")
        total += -float(model.rho[i]) * float(v[i]) - _log_psi(float(model.rho[i]), n)
    return total


def truncated_geometric_mean(rho: float, n: int) -> float:
    """Mean of P(x) proportional to exp(-rho*x) on x in {0..n-1}."""
    x = np.arange(n, dtype=np.float64)
    w = np.exp(-rho * x)
    return float((x * w).sum() / w.sum())


def mallows_sample(model: MallowsModel, rng: np.random.Generator) -> np.ndarray:
    """Draw an inversion vector; slots are independent truncated geometrics."""
    k = model.n_subactivities
    v = np.zeros(max(k - 1, 0), dtype=np.int64)
    for i in range(k - 1):
        n = k - i
        w = np.exp(-float(model.rho[i]) * np.arange(n))
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        v[i] = int(np.searchsorted(cdf, rng.random(), side="right"))
    return v


def estimate_rho(observed, model: MallowsModel) -> np.ndarray:
    """Per-slot dispersion matching prior-smoothed mean inversion counts.

    Solves truncated_geometric_mean(rho, n) = (sum_v + nu0*r0) / (N + nu0)
    by bisection on [0, 50]; clamps to 0 when the target is at or above the
    uniform mean and to 50 when it is below the mean at the search bound.
    """
    v_obs = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    k = model.n_subactivities
    if v_obs.shape[1] != k - 1:
        raise ValueError(f"observations must have {k - 1} slots")
    n_obs = v_obs.shape[0]
    if n_obs == 0:
        raise ValueError("need at least one observed inversion vector")
    out = np.zeros(k - 1, dtype=np.float64)
    for i in range(k - 1):
        n = k - i
        target = (float(v_obs[:, i].sum()) + model.nu0 * model.r0) / (n_obs + model.nu0)
        out[i] = _solve_dispersion(target, n)
    return out


def _solve_dispersion(target: float, n: int, hi: float = 50.0, tol: float = 1e-8) -> float:
    if target >= (n - 1) / 2.0:
        return 0.0
    if target <= truncated_geometric_mean(hi, n):
        return hi
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if truncated_geometric_mean(mid, n) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# length model

def sample_lengths(model: LengthModel, present, n_frames: int, rng) -> np.ndarray:
    """Lengths (aligned with `present`): one frame each plus a multinomial split."""
    present = [int(p) for p in present]
    if len(set(present)) != len(present):
        raise ValueError("present subactivities must be distinct")
    if n_frames < len(present):
        raise ValueError(f"{n_frames} frames cannot host {len(present)} segments")
    theta = model.theta[present]
    total = float(theta.sum())
    if total <= 0:
        raise ValueError("present subactivities have zero total length probability")
    counts = rng.multinomial(n_frames - len(present), theta / total)
    return counts.astype(np.int64) + 1


def update_theta(counts, model: LengthModel) -> np.ndarray:
    """Posterior-mean length proportions under a symmetric Dirichlet prior."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (model.n_subactivities,):
        raise ValueError("counts must have one entry per subactivity")
    if counts.min() < 0:
        raise ValueError("counts must be non-negative")
    denom = counts.sum() + model.n_subactivities * model.alpha0
    if denom <= 0:
        raise ValueError("all-zero counts with a zero prior leave theta undefined")
    return (counts + model.alpha0) / denom


def _lengths_log_prob(lengths, present, length_model: LengthModel) -> float:
    counts = np.asarray(lengths, dtype=np.float64) - 1.0
    theta = length_model.theta[list(present)]
    total = float(theta.sum())
    if total <= 0:
        return -math.inf
    theta = theta / total
    rest = counts.sum()
    log_coeff = float(gammaln(rest + 1.0) - gammaln(counts + 1.0).sum())
    with np.errstate(divide="ignore"):
        log_theta = np.log(theta)
    support = counts > 0
    if np.any(np.isneginf(log_theta[support])):
        return -math.inf
    return log_coeff + float((counts[support] * log_theta[support]).sum())


# ---------------------------------------------------------------------------
# joint likelihood and the segmentation sampler

def _appearance_log_prob(order, lengths, probs: np.ndarray) -> float:
    global _zero_prob_events
    labels = np.repeat(np.asarray(order, dtype=np.int64), np.asarray(lengths))
    sel = probs[np.arange(labels.size), labels]
    zero = sel <= 0.0
    if np.any(zero):
        _zero_prob_events += int(zero.sum())
        out = np.full(sel.shape, LOG_FLOOR)
        out[~zero] = np.log(sel[~zero])
        return float(out.sum())
    return float(np.log(sel).sum())


def _log_joint(order, lengths, n_sub, probs, mallows, length_model) -> float:
    app = _appearance_log_prob(order, lengths, probs)
    order_term = mallows_log_prob(partial_order_inversions(order, n_sub), mallows)
    length_term = _lengths_log_prob(lengths, order, length_model)
    return app + order_term + length_term


def segmentation_log_joint(
    seg: Segmentation, probs: np.ndarray, mallows: MallowsModel, length_model: LengthModel
) -> float:
    """log P(frames, order, lengths) for one video under the current models."""
    if probs.shape[0] != seg.n_frames:
        raise ValueError("probability table must cover every frame")
    if seg.n_subactivities != mallows.n_subactivities:
        raise ValueError("segmentation and Mallows model disagree on K")
    return _log_joint(
        list(seg.order), list(seg.lengths), seg.n_subactivities, probs, mallows, length_model
    )


def _accept(log_ratio: float, rng) -> bool:
    return log_ratio >= 0 or rng.random() < math.exp(log_ratio)


def sample_segmentation(
    probs: np.ndarray,
    mallows: MallowsModel,
    length_model: LengthModel,
    current: Segmentation,
    rng: np.random.Generator,
    sweeps: int = 25,
    birth_death_prob: float = 0.1,
) -> Segmentation:
    """Metropolis-within-Gibbs resampling of one video's segmentation.

    Each sweep proposes, in order: a shift of every internal boundary by
    delta in {-w..w}\\{0} with w = max(1, T // 50); one swap of a random
    adjacent segment pair; and, with probability birth_death_prob, a birth
    (insert an absent subactivity as a unit segment, taking a frame from the
    segment it displaces) or death (remove a unit segment, returning its
    frame) with the matching Hastings correction.
    """
    n_sub = current.n_subactivities
    n_frames = current.n_frames
    if probs.shape != (n_frames, n_sub):
        raise ValueError(f"probs shape {probs.shape} does not match T={n_frames}, K={n_sub}")
    order = list(current.order)
    lengths = list(current.lengths)
    cur = _log_joint(order, lengths, n_sub, probs, mallows, length_model)
    width = max(1, n_frames // 50)

    for _ in range(sweeps):
        # boundary shifts, one proposal per internal boundary
        for b in range(len(order) - 1):
            draw = int(rng.integers(0, 2 * width))
            delta = draw - width if draw < width else draw - width + 1
            left = lengths[b] + delta
            right = lengths[b + 1] - delta
            if left < 1 or right < 1:
                continue
            cand = lengths.copy()
            cand[b] = left
            cand[b + 1] = right
            new = _log_joint(order, cand, n_sub, probs, mallows, length_model)
            if _accept(new - cur, rng):
                lengths, cur = cand, new

        # adjacent order swap
        if len(order) >= 2:
            i = int(rng.integers(0, len(order) - 1))
            cand_order = order.copy()
            cand_lengths = lengths.copy()
            cand_order[i], cand_order[i + 1] = cand_order[i + 1], cand_order[i]
            cand_lengths[i], cand_lengths[i + 1] = cand_lengths[i + 1], cand_lengths[i]
            new = _log_joint(cand_order, cand_lengths, n_sub, probs, mallows, length_model)
            if _accept(new - cur, rng):
                order, lengths, cur = cand_order, cand_lengths, new

        # birth/death of unit-length segments
        if rng.random() < birth_death_prob:
            if rng.random() < 0.5:
                result = _propose_birth(order, lengths, n_sub, probs, mallows, length_model, cur, rng)
            else:
                result = _propose_death(order, lengths, n_sub, probs, mallows, length_model, cur, rng)
            if result is not None:
                order, lengths, cur = result

    return Segmentation(tuple(zip(order, lengths)), n_sub)


def _propose_birth(order, lengths, n_sub, probs, mallows, length_model, cur, rng):
    absent = [k for k in range(n_sub) if k not in order]
    if not absent:
        return None
    n_seg = len(order)
    newcomer = absent[int(rng.integers(len(absent)))]
    slot = int(rng.integers(n_seg + 1))
    donor = slot if slot < n_seg else n_seg - 1
    if lengths[donor] < 2:
        return None
    cand_lengths = lengths.copy()
    cand_lengths[donor] -= 1
    cand_lengths.insert(slot, 1)
    cand_order = order.copy()
    cand_order.insert(slot, newcomer)
    new = _log_joint(cand_order, cand_lengths, n_sub, probs, mallows, length_model)
    units_after = cand_lengths.count(1)
    log_ratio = new - cur + math.log(len(absent) * (n_seg + 1) / units_after)
    if _accept(log_ratio, rng):
        return cand_order, cand_lengths, new
    return None


def _propose_death(order, lengths, n_sub, probs, mallows, length_model, cur, rng):
    n_seg = len(order)
    if n_seg < 2:
        return None
    units = [i for i, n in enumerate(lengths) if n == 1]
    if not units:
        return None
    victim = units[int(rng.integers(len(units)))]
    recipient = victim + 1 if victim < n_seg - 1 else victim - 1
    cand_order = order.copy()
    cand_lengths = lengths.copy()
    cand_lengths[recipient] += 1
    del cand_order[victim]
    del cand_lengths[victim]
    new = _log_joint(cand_order, cand_lengths, n_sub, probs, mallows, length_model)
    absent_after = n_sub - (n_seg - 1)
    log_ratio = new - cur + math.log(len(units) / (absent_after * n_seg))
    if _accept(log_ratio, rng):
        return cand_order, cand_lengths, new
    return None
