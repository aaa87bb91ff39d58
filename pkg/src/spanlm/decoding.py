"""Decode loops over a shared predictor interface.

Four generation strategies share one contract (`probs(speech, text) -> [T, C]`
row-stochastic matrix): the span-committed loop that predicts everything in
parallel but keeps only the leftmost span each step, a confidence-guided
refinement pass, and AR / NAR baselines for the step-count comparison. Mock
predictors make the loops testable without a trained model and drive the
latency harness.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch

from .errors import InputError
from .masking import pad_text, par_infer_mask, par_span_size, par_step_count
from .model import MaskedTokenTransformer, softmax_rows
from .sampling import SamplerConfig, sample_top_p


class Predictor(Protocol):
    num_classes: int  # speech vocab including the MASK class
    mask_id: int
    pad_id: int

    def probs(self, speech: np.ndarray, text: np.ndarray) -> np.ndarray: ...


class ModelPredictor:
    """Adapter from the transformer to the numpy predictor contract."""

    def __init__(self, model: MaskedTokenTransformer):
        self.model = model.eval()
        self.num_classes = model.config.speech_vocab
        self.mask_id = model.config.speech_vocab - 1
        self.pad_id = model.config.text_vocab - 1

    def probs(self, speech: np.ndarray, text: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = self.model(
                torch.from_numpy(np.ascontiguousarray(text)),
                torch.from_numpy(np.ascontiguousarray(speech)),
            )
        return softmax_rows(logits.double().numpy())


class ScriptedPredictor:
    """Emits a fixed position-indexed token at every position (one-hot rows)."""

    def __init__(self, num_codec_classes: int, offset: int = 0):
        self.num_classes = num_codec_classes + 1
        self.mask_id = num_codec_classes
        self.pad_id = 0
        self.offset = offset

    def token_at(self, position: int) -> int:
        return (self.offset + position) % (self.num_classes - 1)

    def probs(self, speech: np.ndarray, text: np.ndarray) -> np.ndarray:
        T = len(speech)
        out = np.zeros((T, self.num_classes), dtype=np.float64)
        out[np.arange(T), [self.token_at(i) for i in range(T)]] = 1.0
        return out


class CountingPredictor:
    """Wrapper counting forward passes and snapshotting inputs for tests."""

    def __init__(self, inner: Predictor, keep_inputs: bool = False):
        self.inner = inner
        self.num_classes = inner.num_classes
        self.mask_id = inner.mask_id
        self.pad_id = inner.pad_id
        self.calls = 0
        self.inputs: list[np.ndarray] = []
        self._keep = keep_inputs

    def probs(self, speech: np.ndarray, text: np.ndarray) -> np.ndarray:
        self.calls += 1
        if self._keep:
            self.inputs.append(speech.copy())
        return self.inner.probs(speech, text)


class FixedLatencyPredictor:
    """Adds a constant per-forward delay, for wall-clock comparisons."""

    def __init__(self, inner: Predictor, latency_s: float):
        self.inner = inner
        self.num_classes = inner.num_classes
        self.mask_id = inner.mask_id
        self.pad_id = inner.pad_id
        self.latency_s = latency_s

    def probs(self, speech: np.ndarray, text: np.ndarray) -> np.ndarray:
        time.sleep(self.latency_s)
        return self.inner.probs(speech, text)


@dataclass
class DecodeState:
    c_ext: np.ndarray
    step: int
    T_ref: int
    T_gen: int
    span: int
    n_left: int


def _sample_row(
    prob_row: np.ndarray, mask_id: int, sampler: SamplerConfig, rng: np.random.Generator
) -> tuple[int, float]:
    row = np.asarray(prob_row, dtype=np.float64).copy()
    row[mask_id] = 0.0  # the model may score MASK but must never emit it
    token = sample_top_p(row, sampler, rng)
    return token, float(prob_row[token])


def _init_extended(
    predictor: Predictor,
    x_ref: Sequence[int],
    x_gen: Sequence[int],
    c_ref: Sequence[int],
    T_gen: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    T_ref = len(c_ref)
    if T_gen <= T_ref:
        raise InputError(f"target length {T_gen} must exceed prompt length {T_ref}")
    c_ext = np.full(T_gen, predictor.mask_id, dtype=np.int64)
    c_ext[:T_ref] = np.asarray(c_ref, dtype=np.int64)
    x_ext = pad_text(x_ref, x_gen, T_gen, predictor.pad_id)
    return c_ext, x_ext, T_ref


def par_generate(
    predictor: Predictor,
    x_ref: Sequence[int],
    x_gen: Sequence[int],
    c_ref: Sequence[int],
    T_gen: int,
    infer_ratio: float = 0.01,
    sampler: SamplerConfig = SamplerConfig(),
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Span-committed parallel decoding of the region [T_ref, T_gen).

    Every step predicts all positions but commits only the next leftmost span
    of min(floor(infer_ratio * T_gen), n_left) tokens (clamped >= 1), so the
    forward-pass count is ceil((T_gen - T_ref) / span) regardless of content.
    Committed tokens are never rewritten.
    """
    if not 0.0 < infer_ratio < 1.0:
        raise InputError(f"infer ratio must lie in (0, 1), got {infer_ratio}")
    rng = rng if rng is not None else np.random.default_rng(0)
    c_ext, x_ext, T_ref = _init_extended(predictor, x_ref, x_gen, c_ref, T_gen)
    state = DecodeState(
        c_ext=c_ext,
        step=0,
        T_ref=T_ref,
        T_gen=T_gen,
        span=par_span_size(infer_ratio, T_gen, T_gen - T_ref),
        n_left=T_gen - T_ref,
    )
    while state.n_left > 0:
        mask = par_infer_mask(T_ref, T_gen, state.step, state.span)
        probs = predictor.probs(state.c_ext, x_ext)
        positions = np.flatnonzero(mask)
        confidences = []
        for pos in positions:
            token, p = _sample_row(probs[pos], predictor.mask_id, sampler, rng)
            state.c_ext[pos] = token
            confidences.append(math.log(p) if p > 0 else float("-inf"))
        state.n_left -= len(positions)
        if trace is not None:
            trace.append(
                {
                    "step": state.step,
                    "masked_positions": [int(p) for p in positions],
                    "committed_positions": [int(p) for p in positions],
                    "mean_confidence": float(np.mean(confidences)),
                }
            )
        state.step += 1
    return state.c_ext


def refine(
    predictor: Predictor,
    c_init: Sequence[int],
    x_ext: Sequence[int],
    T_ref: int,
    gamma: float = 0.05,
    steps: int = 7,
    sampler: SamplerConfig = SamplerConfig(),
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Confidence-guided re-masking of the lowest-confidence generated tokens.

    Each step scores every position by the log of its row-max probability on
    the current (fully filled) sequence, re-masks the floor(gamma * (T_gen -
    T_ref)) lowest-confidence unpinned positions past the prompt (clamped
    >= 1, truncated to what remains), re-predicts them with a second forward
    pass on the re-masked sequence, overwrites, and pins them permanently.
    The prompt is pinned from the start and never modified.

    The re-prediction pass is separate because masked-infill training never
    supervises outputs at positions whose input is a real token; re-sampling
    those rows directly measurably corrupts the sequence.
    """
    if not 0.0 < gamma < 1.0:
        raise InputError(f"gamma must lie in (0, 1), got {gamma}")
    if steps < 0:
        raise InputError(f"steps must be >= 0, got {steps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    c_ext = np.asarray(c_init, dtype=np.int64).copy()
    if (c_ext == predictor.mask_id).any():
        raise InputError("refinement input must not contain MASK placeholders")
    T_gen = len(c_ext)
    x_arr = np.asarray(x_ext, dtype=np.int64)
    if len(x_arr) != T_gen:
        raise InputError(f"text length {len(x_arr)} != sequence length {T_gen}")

    pinned = np.zeros(T_gen, dtype=bool)
    pinned[:T_ref] = True
    per_step = max(1, math.floor(gamma * (T_gen - T_ref)))
    for step in range(steps):
        candidates = np.flatnonzero(~pinned)
        if candidates.size == 0:
            break
        probs = predictor.probs(c_ext, x_arr)
        conf = np.log(np.maximum(probs.max(axis=1), 1e-300))
        take = min(per_step, candidates.size)
        order = np.lexsort((candidates, conf[candidates]))  # by confidence, then position
        selected = candidates[order[:take]]
        remasked = c_ext.copy()
        remasked[selected] = predictor.mask_id
        repred = predictor.probs(remasked, x_arr)
        for pos in selected:
            token, _ = _sample_row(repred[pos], predictor.mask_id, sampler, rng)
            c_ext[pos] = token
        pinned[selected] = True
        if trace is not None:
            trace.append(
                {
                    "step": step,
                    "masked_positions": sorted(int(p) for p in selected),
                    "committed_positions": sorted(int(p) for p in selected),
                    "mean_confidence": float(conf[selected].mean()),
                }
            )
    return c_ext


def ar_generate(
    predictor: Predictor,
    x_ref: Sequence[int],
    x_gen: Sequence[int],
    c_ref: Sequence[int],
    T_gen: int,
    sampler: SamplerConfig = SamplerConfig(),
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Left-to-right baseline: one forward pass and one committed token per step."""
    rng = rng if rng is not None else np.random.default_rng(0)
    c_ext, x_ext, T_ref = _init_extended(predictor, x_ref, x_gen, c_ref, T_gen)
    for step, pos in enumerate(range(T_ref, T_gen)):
        probs = predictor.probs(c_ext, x_ext)
        token, p = _sample_row(probs[pos], predictor.mask_id, sampler, rng)
        c_ext[pos] = token
        if trace is not None:
            trace.append(
                {
                    "step": step,
                    "masked_positions": [int(pos)],
                    "committed_positions": [int(pos)],
                    "mean_confidence": math.log(p) if p > 0 else float("-inf"),
                }
            )
    return c_ext


def cosine_commit_counts(region: int, iters: int) -> list[int]:
    """How many positions a NAR pass commits per iteration (sums to region)."""
    if iters < 1:
        raise InputError(f"iters must be >= 1, got {iters}")
    remaining = region
    counts = []
    for it in range(iters):
        frac = math.cos(math.pi / 2.0 * (it + 1) / iters)
        target = 0 if it == iters - 1 else math.floor(region * frac)
        counts.append(remaining - target)
        remaining = target
    return counts


def nar_generate(
    predictor: Predictor,
    x_ref: Sequence[int],
    x_gen: Sequence[int],
    c_ref: Sequence[int],
    T_gen: int,
    iters: int = 50,
    sampler: SamplerConfig = SamplerConfig(),
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Iterative mask-and-predict baseline without temporal ordering.

    Runs exactly `iters` forward passes; each commits the globally
    highest-confidence masked positions per a cosine unmasking schedule and
    re-masks the rest, so the step count is independent of T_gen.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    c_ext, x_ext, T_ref = _init_extended(predictor, x_ref, x_gen, c_ref, T_gen)
    counts = cosine_commit_counts(T_gen - T_ref, iters)
    for it in range(iters):
        masked = np.flatnonzero(c_ext == predictor.mask_id)
        if masked.size == 0:
            break
        probs = predictor.probs(c_ext, x_ext)
        choices = np.empty(masked.size, dtype=np.int64)
        conf = np.empty(masked.size, dtype=np.float64)
        for n, pos in enumerate(masked):
            token, p = _sample_row(probs[pos], predictor.mask_id, sampler, rng)
            choices[n] = token
            conf[n] = math.log(p) if p > 0 else float("-inf")
        take = min(counts[it], masked.size)
        order = np.lexsort((masked, -conf))  # highest confidence, then lowest position
        keep = order[:take]
        c_ext[masked[keep]] = choices[keep]
        if trace is not None:
            trace.append(
                {
                    "step": it,
                    "masked_positions": [int(p) for p in masked],
                    "committed_positions": sorted(int(p) for p in masked[keep]),
                    "mean_confidence": float(conf[keep].mean()) if take else 0.0,
                }
            )
    return c_ext


@dataclass
class StepProfile:
    paradigm: str
    T_ref: int
    T_gen: int
    step_count: int
    wall_ms: float
    token_rate: float = 25.0  # token/s analog used to report duration

    @property
    def duration_s(self) -> float:
        return self.T_gen / self.token_rate


PROFILE_HEADER = "step_count,wall_ms,T_ref,T_gen,paradigm"


def profile_rows(profiles: Sequence[StepProfile]) -> str:
    lines = [PROFILE_HEADER]
    for p in profiles:
        lines.append(f"{p.step_count},{p.wall_ms:.3f},{p.T_ref},{p.T_gen},{p.paradigm}")
    return "\n".join(lines) + "\n"


def count_steps(
    paradigm: str,
    T_ref: int,
    T_gen: int,
    latency_s: float = 0.001,
    infer_ratio: float = 0.01,
    iters: int = 50,
    num_codec_classes: int = 256,
    token_rate: float = 25.0,
) -> StepProfile:
    """Measure forward passes and wall-clock for one paradigm on a mock predictor."""
    if paradigm not in ("ar", "nar", "par"):
        raise InputError(f"unknown paradigm {paradigm!r}")
    base = ScriptedPredictor(num_codec_classes)
    counter = CountingPredictor(FixedLatencyPredictor(base, latency_s))
    prompt = [base.token_at(i) for i in range(T_ref)]
    start = time.perf_counter()
    if paradigm == "ar":
        ar_generate(counter, [], [], prompt, T_gen)
    elif paradigm == "nar":
        nar_generate(counter, [], [], prompt, T_gen, iters=iters)
    else:
        par_generate(counter, [], [], prompt, T_gen, infer_ratio=infer_ratio)
    wall_ms = (time.perf_counter() - start) * 1000.0
    return StepProfile(
        paradigm=paradigm,
        T_ref=T_ref,
        T_gen=T_gen,
        step_count=counter.calls,
        wall_ms=wall_ms,
        token_rate=token_rate,
    )


def expected_steps(paradigm: str, T_ref: int, T_gen: int, infer_ratio: float = 0.01, iters: int = 50) -> int:
    """Closed-form forward-pass counts the loops must realize exactly."""
    if paradigm == "ar":
        return T_gen - T_ref
    if paradigm == "nar":
        return iters
    if paradigm == "par":
        return par_step_count(T_ref, T_gen, infer_ratio)
    raise InputError(f"unknown paradigm {paradigm!r}")
