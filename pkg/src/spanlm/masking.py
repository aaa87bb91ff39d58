"""Mask builders and schedules for span-committed training and inference.

All masks are boolean numpy vectors of length T where True marks a masked
(hidden / to-be-predicted) position. Training masks protect a 30% prompt
prefix; inference masks walk the generated region left to right in spans of a
fixed fraction of the total length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, ScheduleError

PROMPT_RATIO = 0.3
TRAIN_TARGET_RATIO = 0.1
INFER_SPAN_RATIO = 0.01
STAGE1_MIN_T = 10  # smallest T for which both the 30% prompt and 10% target are nonempty


@dataclass(frozen=True)
class Stage1Mask:
    """Suffix mask plus the supervised span it implies."""

    mask: np.ndarray  # bool[T], 0^s then 1^(T-s)
    start: int  # s, first masked position
    target_len: int  # k, supervised positions are [start, start+k)


def span_size(ratio: float, total: int) -> int:
    """Span length floor(ratio * total), clamped to at least 1."""
    return max(1, math.floor(ratio * total))


def stage1_train_mask(T: int, rng: np.random.Generator) -> Stage1Mask:
    """Draw the stage-one training mask for a length-T sequence.

    The start s is uniform on {floor(0.3 T), ..., T - floor(0.1 T) - 1}
    (exactly one rng.integers draw), the mask covers [s, T), and the
    supervised target is the leftmost span of k = max(1, floor(0.1 T))
    masked positions.
    """
    if T < STAGE1_MIN_T:
        raise InputError(f"stage-one masking needs T >= {STAGE1_MIN_T}, got {T}")
    lo = math.floor(PROMPT_RATIO * T)
    hi = T - math.floor(TRAIN_TARGET_RATIO * T) - 1
    start = int(rng.integers(lo, hi + 1))
    mask = np.zeros(T, dtype=bool)
    mask[start:] = True
    return Stage1Mask(mask=mask, start=start, target_len=span_size(TRAIN_TARGET_RATIO, T))


def stage2_train_mask(T: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(p) mask over positions past the 30% prompt; prompt stays clear."""
    if T < 4:
        raise InputError(f"stage-two masking needs T >= 4, got {T}")
    if not 0.0 <= p <= 1.0:
        raise InputError(f"mask probability must lie in [0, 1], got {p}")
    prompt = math.floor(PROMPT_RATIO * T)
    mask = np.zeros(T, dtype=bool)
    mask[prompt:] = rng.random(T - prompt) < p
    return mask


def par_span_size(infer_ratio: float, T_gen: int, n_left: int) -> int:
    """Per-step commit size min(floor(r' * T_gen), n_left), clamped to at least 1."""
    return min(span_size(infer_ratio, T_gen), n_left)


def par_step_count(T_ref: int, T_gen: int, infer_ratio: float) -> int:
    """Number of forward passes a span-committed decode will take."""
    return math.ceil((T_gen - T_ref) / span_size(infer_ratio, T_gen))


def par_infer_mask(T_ref: int, T_gen: int, t: int, k_step: int) -> np.ndarray:
    """Step-t inference mask: ones exactly on [T_ref + t*k, min(T_ref + (t+1)*k, T_gen))."""
    if k_step < 1:
        raise InputError(f"span size must be >= 1, got {k_step}")
    lo = T_ref + t * k_step
    if lo >= T_gen:
        raise ScheduleError(f"step {t} span starts at {lo}, beyond T_gen={T_gen}")
    hi = min(lo + k_step, T_gen)
    mask = np.zeros(T_gen, dtype=bool)
    mask[lo:hi] = True
    return mask


def pad_text(
    x_ref: Sequence[int], x_gen: Sequence[int], T_total: int, pad_id: int
) -> np.ndarray:
    """Lay out [x_ref | x_gen | PAD...] to length T_total.

    Training uses a single text: pass it as x_ref with x_gen empty.
    """
    L = len(x_ref) + len(x_gen)
    if L > T_total:
        raise InputError(f"text length {L} exceeds total length {T_total}")
    out = np.full(T_total, pad_id, dtype=np.int64)
    out[: len(x_ref)] = np.asarray(x_ref, dtype=np.int64)
    out[len(x_ref) : L] = np.asarray(x_gen, dtype=np.int64)
    return out


def estimate_duration(T_ref: int, L_ref: int, L_gen: int) -> int:
    """Linear duration rule T_gen = round(T_ref * (1 + L_gen / L_ref)), half up."""
    if T_ref < 1:
        raise InputError(f"prompt token length must be >= 1, got {T_ref}")
    if L_ref < 1:
        raise InputError(f"prompt text length must be >= 1, got {L_ref}")
    if L_gen < 0:
        raise InputError(f"target text length must be >= 0, got {L_gen}")
    return int(math.floor(T_ref * (1.0 + L_gen / L_ref) + 0.5))
