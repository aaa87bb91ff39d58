"""Oracle-based quality metrics, paradigm comparison, and robustness sweeps.

The grammar's exact inverse replaces ASR and speaker-embedding scoring: the
symbol error rate is a symbol-level Levenshtein distance against the target
text, and speaker consistency is the fraction of decoded runs carrying the
prompt speaker's subrange tag.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import GrammarSpec, Utterance, decode_oracle, grammar_hash, run_spans
from .decoding import (
    CountingPredictor,
    ModelPredictor,
    Predictor,
    ar_generate,
    nar_generate,
    par_generate,
    refine,
)
from .errors import ConfigError, InputError
from .masking import estimate_duration, pad_text
from .model import load_checkpoint
from .sampling import SamplerConfig
from .seeding import rng_for

PARADIGMS = ("ar", "nar", "par")


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Edit distance between two symbol sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass
class UtteranceScore:
    symbol_error_rate: float
    speaker_consistency: float
    target_len: int
    decoded_runs: int


def score_utterance(
    grammar: GrammarSpec,
    generated: Sequence[int],
    target_text: Sequence[int],
    speaker: int,
) -> UtteranceScore:
    """Oracle-decode generated tokens and score them against the target text."""
    if len(target_text) == 0:
        raise InputError("target text must be nonempty")
    toks = np.asarray(generated, dtype=np.int64)
    if (toks >= grammar.speech_vocab_size).any():
        raise InputError("generated tokens contain MASK placeholders")
    result = decode_oracle(grammar, toks)
    ser = levenshtein(result.symbols, [int(s) for s in target_text]) / len(target_text)
    votes = result.speaker_votes
    consistency = float(np.mean([v == speaker for v in votes])) if votes else 0.0
    return UtteranceScore(
        symbol_error_rate=ser,
        speaker_consistency=consistency,
        target_len=len(target_text),
        decoded_runs=len(votes),
    )


@dataclass
class EvalReport:
    symbol_error_rate: float
    speaker_consistency: float
    step_count: int
    wall_clock_s: float
    per_utterance: list[UtteranceScore] = field(repr=False)

    @staticmethod
    def from_scores(scores: list[UtteranceScore], step_count: int, wall_s: float) -> "EvalReport":
        # Aggregates are weighted means: SER by target length (corpus-level edit
        # rate), consistency by decoded run count.
        lens = np.array([s.target_len for s in scores], dtype=np.float64)
        runs = np.array([max(1, s.decoded_runs) for s in scores], dtype=np.float64)
        ser = float(np.average([s.symbol_error_rate for s in scores], weights=lens))
        cons = float(np.average([s.speaker_consistency for s in scores], weights=runs))
        return EvalReport(
            symbol_error_rate=ser,
            speaker_consistency=cons,
            step_count=step_count,
            wall_clock_s=wall_s,
            per_utterance=scores,
        )


@dataclass
class Prompt:
    """One synthesis task: reference text/tokens plus the text to generate."""

    x_ref: np.ndarray
    c_ref: np.ndarray
    x_gen: np.ndarray
    gt_region: int  # ground-truth token length of the generated region
    speaker: int


def continuation_prompt(grammar: GrammarSpec, utt: Utterance) -> Prompt | None:
    """Split an utterance at the run boundary nearest 30% of its tokens."""
    if len(utt.text) < 2:
        return None
    spans = run_spans(grammar, utt.text, utt.speaker)
    target = 0.3 * len(utt.speech)
    boundaries = [end for _, end in spans[:-1]]  # keep at least one symbol each side
    cut_idx = int(np.argmin([abs(b - target) for b in boundaries]))
    cut = boundaries[cut_idx]
    n_sym = cut_idx + 1
    return Prompt(
        x_ref=utt.text[:n_sym],
        c_ref=utt.speech[:cut],
        x_gen=utt.text[n_sym:],
        gt_region=len(utt.speech) - cut,
        speaker=utt.speaker,
    )


def cross_sentence_prompts(utterances: Sequence[Utterance]) -> list[Prompt]:
    """Pair consecutive same-speaker utterances: first is prompt, second is target."""
    last_seen: dict[int, Utterance] = {}
    prompts = []
    for utt in utterances:
        if len(utt.text) == 0:
            continue
        prev = last_seen.get(utt.speaker)
        if prev is not None:
            prompts.append(
                Prompt(
                    x_ref=prev.text,
                    c_ref=prev.speech,
                    x_gen=utt.text,
                    gt_region=len(utt.speech),
                    speaker=utt.speaker,
                )
            )
        last_seen[utt.speaker] = utt
    return prompts


PROTOCOLS = ("continuation", "cross_sentence")


def build_prompts(
    grammar: GrammarSpec, utterances: Sequence[Utterance], protocol: str, limit: int
) -> list[Prompt]:
    if protocol == "cross_sentence":
        prompts = cross_sentence_prompts(utterances)
    elif protocol == "continuation":
        prompts = [p for p in (continuation_prompt(grammar, u) for u in utterances) if p]
    else:
        raise InputError(f"unknown protocol {protocol!r}, expected one of {PROTOCOLS}")
    if not prompts:
        raise InputError(f"held-out corpus yields no {protocol} prompts")
    return prompts[:limit]


def resolve_duration(prompt: Prompt, mode: str, multiplier: float = 1.0) -> int:
    """Target total length under gt / estimate / multiplier duration policies."""
    T_ref = len(prompt.c_ref)
    if mode == "gt":
        return T_ref + prompt.gt_region
    if mode == "estimate":
        return estimate_duration(T_ref, len(prompt.x_ref), len(prompt.x_gen))
    if mode == "multiplier":
        if multiplier <= 0:
            raise InputError(f"duration multiplier must be positive, got {multiplier}")
        return T_ref + max(1, int(np.floor(multiplier * prompt.gt_region + 0.5)))
    raise InputError(f"unknown duration mode {mode!r}")


def synthesize(
    stage1: Predictor,
    stage2: Predictor | None,
    prompt: Prompt,
    T_gen: int,
    infer_ratio: float = 0.01,
    refine_steps: int = 7,
    gamma: float = 0.05,
    sampler: SamplerConfig = SamplerConfig(),
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Two-stage pipeline: span-committed generation, then confidence refinement."""
    out = par_generate(
        stage1,
        prompt.x_ref,
        prompt.x_gen,
        prompt.c_ref,
        T_gen,
        infer_ratio=infer_ratio,
        sampler=sampler,
        rng=rng,
        trace=trace,
    )
    if stage2 is not None and refine_steps > 0:
        x_ext = pad_text(prompt.x_ref, prompt.x_gen, T_gen, stage2.pad_id)
        out = refine(
            stage2,
            out,
            x_ext,
            len(prompt.c_ref),
            gamma=gamma,
            steps=refine_steps,
            sampler=sampler,
            rng=rng,
            trace=trace,
        )
    return out


def evaluate_prompts(
    grammar: GrammarSpec,
    stage1: Predictor,
    stage2: Predictor | None,
    prompts: Sequence[Prompt],
    duration: str = "gt",
    multiplier: float = 1.0,
    infer_ratio: float = 0.01,
    refine_steps: int = 7,
    gamma: float = 0.05,
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
) -> EvalReport:
    """Score the two-stage pipeline over a prompt set (per-prompt RNG streams)."""
    counter = CountingPredictor(stage1)
    counter2 = CountingPredictor(stage2) if stage2 is not None else None
    scores = []
    start = time.perf_counter()
    for idx, prompt in enumerate(prompts):
        T_gen = resolve_duration(prompt, duration, multiplier)
        out = synthesize(
            counter,
            counter2,
            prompt,
            T_gen,
            infer_ratio=infer_ratio,
            refine_steps=refine_steps,
            gamma=gamma,
            sampler=sampler,
            rng=rng_for(seed, "decode", idx),
        )
        region = out[len(prompt.c_ref) :]
        scores.append(score_utterance(grammar, region, prompt.x_gen, prompt.speaker))
    wall = time.perf_counter() - start
    steps = counter.calls + (counter2.calls if counter2 else 0)
    return EvalReport.from_scores(scores, steps, wall)


def _decode_with(
    paradigm: str,
    predictor: Predictor,
    prompt: Prompt,
    T_gen: int,
    infer_ratio: float,
    nar_iters: int,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    if paradigm == "ar":
        return ar_generate(predictor, prompt.x_ref, prompt.x_gen, prompt.c_ref, T_gen, sampler, rng)
    if paradigm == "nar":
        return nar_generate(
            predictor, prompt.x_ref, prompt.x_gen, prompt.c_ref, T_gen, nar_iters, sampler, rng
        )
    if paradigm == "par":
        return par_generate(
            predictor, prompt.x_ref, prompt.x_gen, prompt.c_ref, T_gen,
            infer_ratio=infer_ratio, sampler=sampler, rng=rng,
        )
    raise InputError(f"unknown paradigm {paradigm!r}")


def compare_paradigms(
    grammar: GrammarSpec,
    heldout: Sequence[Utterance],
    checkpoints: dict[str, str],
    num_prompts: int = 50,
    duration: str = "gt",
    infer_ratio: float = 0.01,
    nar_iters: int = 50,
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    protocols: Sequence[str] = ("cross_sentence",),
) -> dict[tuple[str, str], EvalReport]:
    """Run each paradigm's decoder on the same held-out prompts, per protocol.

    Returns {(paradigm, protocol): report}. Checkpoints must have been trained
    against the same grammar (hashes are recorded at training time and
    verified here).
    """
    expected_hash = grammar_hash(grammar)
    predictors: dict[str, Predictor] = {}
    for name, path in checkpoints.items():
        if name not in PARADIGMS:
            raise InputError(f"unknown paradigm {name!r}, expected one of {PARADIGMS}")
        model, manifest = load_checkpoint(path)
        recorded = manifest.get("extra", {}).get("grammar_hash")
        if recorded is not None and recorded != expected_hash:
            raise ConfigError(
                f"checkpoint {path} was trained against a different grammar "
                f"({recorded[:12]}... != {expected_hash[:12]}...)"
            )
        predictors[name] = ModelPredictor(model)

    prompt_sets = {p: build_prompts(grammar, heldout, p, num_prompts) for p in protocols}
    reports = {}
    for name, predictor in predictors.items():
        for protocol, prompts in prompt_sets.items():
            counter = CountingPredictor(predictor)
            scores = []
            start = time.perf_counter()
            for idx, prompt in enumerate(prompts):
                T_gen = resolve_duration(prompt, duration)
                out = _decode_with(
                    name, counter, prompt, T_gen, infer_ratio, nar_iters, sampler,
                    rng_for(seed, f"compare-{name}-{protocol}", idx),
                )
                region = out[len(prompt.c_ref) :]
                scores.append(score_utterance(grammar, region, prompt.x_gen, prompt.speaker))
            wall = time.perf_counter() - start
            reports[(name, protocol)] = EvalReport.from_scores(scores, counter.calls, wall)
    return reports


def sweep_duration(
    grammar: GrammarSpec,
    heldout: Sequence[Utterance],
    stage1: Predictor,
    stage2: Predictor | None,
    multipliers: Sequence[float] = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3),
    num_prompts: int = 50,
    refine_steps: int = 7,
    gamma: float = 0.05,
    infer_ratio: float = 0.01,
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
) -> list[tuple[float, float, float]]:
    """(multiplier, SER, speaker consistency) rows across duration scalings."""
    if any(m <= 0 for m in multipliers):
        raise InputError("duration multipliers must be positive")
    prompts = cross_sentence_prompts(heldout)[:num_prompts]
    if not prompts:
        raise InputError("held-out corpus yields no cross-sentence prompts")
    rows = []
    for mult in multipliers:
        report = evaluate_prompts(
            grammar, stage1, stage2, prompts,
            duration="multiplier", multiplier=mult,
            infer_ratio=infer_ratio, refine_steps=refine_steps, gamma=gamma,
            sampler=sampler, seed=seed,
        )
        rows.append((float(mult), report.symbol_error_rate, report.speaker_consistency))
    return rows


def sweep_steps(
    grammar: GrammarSpec,
    heldout: Sequence[Utterance],
    stage1: Predictor,
    stage2: Predictor | None,
    stage: int,
    grid: Sequence[float],
    num_prompts: int = 50,
    refine_steps: int = 7,
    gamma: float = 0.05,
    infer_ratio: float = 0.01,
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
) -> list[tuple[float, float, float]]:
    """Vary the stage-one span ratio or the stage-two refinement step count."""
    if stage not in (1, 2):
        raise InputError(f"stage must be 1 or 2, got {stage}")
    if len(grid) == 0:
        raise InputError("sweep grid must be nonempty")
    prompts = cross_sentence_prompts(heldout)[:num_prompts]
    if not prompts:
        raise InputError("held-out corpus yields no cross-sentence prompts")
    rows = []
    for value in grid:
        if stage == 1:
            report = evaluate_prompts(
                grammar, stage1, stage2, prompts,
                duration="gt", infer_ratio=float(value),
                refine_steps=refine_steps, gamma=gamma, sampler=sampler, seed=seed,
            )
        else:
            report = evaluate_prompts(
                grammar, stage1, stage2, prompts,
                duration="gt", infer_ratio=infer_ratio,
                refine_steps=int(value), gamma=gamma, sampler=sampler, seed=seed,
            )
        rows.append((float(value), report.symbol_error_rate, report.speaker_consistency))
    return rows


def curve_csv(rows: Sequence[tuple[float, float, float]], param_name: str) -> str:
    lines = [f"{param_name},symbol_error_rate,speaker_consistency"]
    for value, ser, cons in rows:
        lines.append(f"{value:g},{ser:.6f},{cons:.6f}")
    return "\n".join(lines) + "\n"


def plot_curve(rows: Sequence[tuple[float, float, float]], param_name: str, path: str) -> None:
    """Optional static plot of a sweep curve (requires matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r[0] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(xs, [r[1] for r in rows], "o-", color="tab:red", label="SER")
    ax1.set_xlabel(param_name)
    ax1.set_ylabel("symbol error rate", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(xs, [r[2] for r in rows], "s--", color="tab:blue", label="consistency")
    ax2.set_ylabel("speaker consistency", color="tab:blue")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
