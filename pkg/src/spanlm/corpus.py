"""Synthetic pseudo-speech grammar with an exact decode oracle.

A grammar maps every (text symbol, speaker) pair to a fixed token run inside
the speaker's private id block, so a token stream can be decoded back to
(text, speaker) exactly. Token ids are laid out as

    id = speaker * block + offset,        block = speech_vocab_size // num_speakers

where offsets below ``block // 2`` are run *heads* and the rest are
*continuations*. A run is one head followed by continuations, so run
boundaries are recoverable from token classes alone and the first token of
every run identifies the speaker subrange.

Rule tables are rejection-sampled under two structural constraints (within a
speaker): any two runs differ in at least two positions over the shorter run's
length, and no run's continuation tail recurs inside another run at offset
two or beyond. Together with the head/continuation framing these make
single-token corruption detectable and localizable: the oracle flags exactly
the corrupted run, provided the minimum expansion is at least 2 (a one-token
run has no redundancy to protect).
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .seeding import rng_for

_PLACEMENT_ATTEMPTS = 400


@dataclass(frozen=True)
class GrammarSpec:
    """Immutable expansion rules: runs[speaker][symbol] is a tuple of token ids."""

    text_vocab_size: int
    speech_vocab_size: int
    num_speakers: int
    expansion_range: tuple[int, int]
    seed: int
    runs: tuple[tuple[tuple[int, ...], ...], ...] = field(repr=False)

    @property
    def mask_id(self) -> int:
        """Reserved placeholder id, one past the codec vocabulary."""
        return self.speech_vocab_size

    @property
    def pad_id(self) -> int:
        """Reserved text filler id, one past the text vocabulary."""
        return self.text_vocab_size

    @property
    def block(self) -> int:
        return self.speech_vocab_size // self.num_speakers

    @property
    def head_width(self) -> int:
        return self.block // 2

    def run(self, symbol: int, speaker: int) -> tuple[int, ...]:
        return self.runs[speaker][symbol]


@dataclass(eq=False)
class Utterance:
    text: np.ndarray  # int64[L]
    speech: np.ndarray  # int64[T]
    speaker: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.speaker == other.speaker
            and np.array_equal(self.text, other.text)
            and np.array_equal(self.speech, other.speech)
        )


@dataclass
class DecodeResult:
    """Best-effort decode: one symbol and one speaker vote per parsed segment."""

    symbols: list[int]
    speaker_votes: list[int]
    valid: np.ndarray  # bool per input token

    @property
    def majority_speaker(self) -> int | None:
        if not self.speaker_votes:
            return None
        return int(np.bincount(self.speaker_votes).argmax())


def _hamming(a: Sequence[int], b: Sequence[int]) -> int:
    return sum(1 for x, y in zip(a, b) if x != y)


def _tail_recurs(tail: tuple[int, ...], data: tuple[int, ...]) -> bool:
    # Does `tail` appear inside `data` starting at offset >= 2?
    n = len(tail)
    return any(data[k : k + n] == tail for k in range(2, len(data) - n + 1))


def _placement_ok(cand: tuple[int, ...], existing: list[tuple[int, ...]]) -> bool:
    for other in existing:
        short, long_ = (cand, other) if len(cand) <= len(other) else (other, cand)
        need = 2 if len(short) >= 2 else 1
        if _hamming(short, long_[: len(short)]) < need:
            return False
        if len(cand) >= 2 and _tail_recurs(cand[1:], other):
            return False
        if len(other) >= 2 and _tail_recurs(other[1:], cand):
            return False
    return True


def build_grammar(
    text_vocab_size: int = 64,
    speech_vocab_size: int = 256,
    num_speakers: int = 8,
    expansion_range: tuple[int, int] = (2, 6),
    seed: int = 0,
) -> GrammarSpec:
    """Sample deterministic expansion rules for every (symbol, speaker) pair.

    Raises ConfigError when the requested sizes cannot host a uniquely
    decodable rule table (e.g. too many symbols for the per-speaker block).
    """
    lo, hi = expansion_range
    if text_vocab_size < 2 or speech_vocab_size < 2:
        raise ConfigError("vocab sizes must be >= 2")
    if num_speakers < 1:
        raise ConfigError("need at least one speaker")
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad expansion range {expansion_range}")
    block = speech_vocab_size // num_speakers
    if block < 2:
        raise ConfigError(
            f"speech vocab {speech_vocab_size} too small for {num_speakers} speaker blocks"
        )
    head_width = block // 2
    cont_width = block - head_width

    rng = np.random.default_rng(seed)
    lengths = np.arange(lo, hi + 1)
    # Favor longer runs: short runs burn disproportionate coding capacity
    # (a 2-token run bans its continuation value from all run interiors).
    weights = lengths - lo + 1.0
    weights /= weights.sum()

    speakers: list[tuple[tuple[int, ...], ...]] = []
    for spk in range(num_speakers):
        base = spk * block
        placed: list[tuple[int, ...]] = []
        for symbol in range(text_vocab_size):
            length = int(rng.choice(lengths, p=weights))
            order = sorted(range(lo, hi + 1), key=lambda l: (abs(l - length), l))
            run = None
            for cand_len in order:
                for _ in range(_PLACEMENT_ATTEMPTS):
                    head = int(rng.integers(0, head_width))
                    conts = rng.integers(0, cont_width, size=cand_len - 1)
                    cand = (base + head,) + tuple(base + head_width + int(c) for c in conts)
                    if _placement_ok(cand, placed):
                        run = cand
                        break
                if run is not None:
                    break
            if run is None:
                raise ConfigError(
                    f"grammar capacity exhausted: cannot place symbol {symbol} for "
                    f"speaker {spk} (vocab {text_vocab_size}, block {block}, "
                    f"expansion {expansion_range})"
                )
            placed.append(run)
        speakers.append(tuple(placed))
    return GrammarSpec(
        text_vocab_size=text_vocab_size,
        speech_vocab_size=speech_vocab_size,
        num_speakers=num_speakers,
        expansion_range=(lo, hi),
        seed=seed,
        runs=tuple(speakers),
    )


def encode_utterance(grammar: GrammarSpec, text: Sequence[int], speaker: int) -> Utterance:
    """Expand text symbols into the speaker's token runs. Empty text is allowed."""
    if not 0 <= speaker < grammar.num_speakers:
        raise InputError(f"speaker {speaker} out of range [0, {grammar.num_speakers})")
    ids = []
    for sym in text:
        if not 0 <= sym < grammar.text_vocab_size:
            raise InputError(f"text symbol {sym} out of vocabulary")
        ids.extend(grammar.run(int(sym), speaker))
    return Utterance(
        text=np.asarray(list(text), dtype=np.int64),
        speech=np.asarray(ids, dtype=np.int64),
        speaker=speaker,
    )


def run_spans(grammar: GrammarSpec, text: Sequence[int], speaker: int) -> list[tuple[int, int]]:
    """Token [start, end) span of each symbol's run inside the encoded utterance."""
    spans = []
    pos = 0
    for sym in text:
        length = len(grammar.run(int(sym), speaker))
        spans.append((pos, pos + length))
        pos += length
    return spans


def _fallback_symbol(tokens: np.ndarray, vocab: int) -> int:
    # Stable, well-mixed stand-in so garbage decodes at chance accuracy.
    return zlib.crc32(tokens.tobytes()) % vocab


def decode_oracle(grammar: GrammarSpec, tokens: Sequence[int]) -> DecodeResult:
    """Segment a token stream into runs and recover (symbols, speaker votes).

    Segments that exactly match a rule-table run decode to their symbol with
    all tokens flagged valid. Anything else (orphan continuations, broken or
    unknown runs) emits a deterministic fallback symbol with tokens flagged
    invalid. When an oversized segment starts with a complete known run (a
    corrupted head merged two runs), that prefix run is recovered as valid and
    only the remainder is flagged.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= grammar.speech_vocab_size):
        bad = toks[(toks < 0) | (toks >= grammar.speech_vocab_size)][0]
        raise InputError(f"token id {bad} outside codec vocabulary (MASK or corrupt input)")

    block = grammar.block
    head_width = grammar.head_width
    _, hi = grammar.expansion_range
    tables = [
        {run: sym for sym, run in enumerate(spk_runs)} for spk_runs in grammar.runs
    ]

    symbols: list[int] = []
    votes: list[int] = []
    valid = np.zeros(toks.size, dtype=bool)

    def is_head(tok: int) -> bool:
        return tok % block < head_width

    def emit(seg: np.ndarray, start: int, ok_symbol: int | None) -> None:
        spk = int(seg[0]) // block
        if ok_symbol is not None:
            symbols.append(ok_symbol)
            valid[start : start + seg.size] = True
        else:
            symbols.append(_fallback_symbol(seg, grammar.text_vocab_size))
        votes.append(spk)

    i = 0
    n = toks.size
    while i < n:
        tok = int(toks[i])
        if not is_head(tok):
            # Orphan continuations: sweep to the next head.
            j = i + 1
            while j < n and not is_head(int(toks[j])):
                j += 1
            emit(toks[i:j], i, None)
            i = j
            continue
        spk = tok // block
        j = i + 1
        while j < n and (j - i) < hi and not is_head(int(toks[j])) and int(toks[j]) // block == spk:
            j += 1
        seg = toks[i:j]
        table = tables[spk]
        key = tuple(int(t) for t in seg)
        if key in table:
            emit(seg, i, table[key])
        else:
            # Longest known proper prefix recovers the surviving run when a
            # corrupted head merged it with following tokens.
            matched = 0
            for cut in range(seg.size - 1, 0, -1):
                if key[:cut] in table:
                    matched = cut
                    break
            if matched:
                emit(seg[:matched], i, table[key[:matched]])
                emit(seg[matched:], i + matched, None)
            else:
                emit(seg, i, None)
        i = j
    return DecodeResult(symbols=symbols, speaker_votes=votes, valid=valid)


def generate_corpus(
    grammar: GrammarSpec,
    num_utterances: int,
    text_len_range: tuple[int, int],
    master_seed: int,
) -> list[Utterance]:
    """Sample utterances with per-utterance derived seeds (order-independent)."""
    lo, hi = text_len_range
    if lo < 1 or hi < lo:
        raise InputError(f"bad text length range {text_len_range}")
    out = []
    for idx in range(num_utterances):
        rng = rng_for(master_seed, "corpus-utt", idx)
        length = int(rng.integers(lo, hi + 1))
        text = rng.integers(0, grammar.text_vocab_size, size=length)
        speaker = int(rng.integers(0, grammar.num_speakers))
        out.append(encode_utterance(grammar, text, speaker))
    return out


# ---------------------------------------------------------------------------
# Serialization: grammar as one canonical JSON document, corpus as JSON lines.

def grammar_to_json(grammar: GrammarSpec) -> str:
    doc = {
        "text_vocab_size": grammar.text_vocab_size,
        "speech_vocab_size": grammar.speech_vocab_size,
        "num_speakers": grammar.num_speakers,
        "expansion_range": list(grammar.expansion_range),
        "seed": grammar.seed,
        "runs": [[list(run) for run in spk] for spk in grammar.runs],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def grammar_from_json(text: str) -> GrammarSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise InputError(f"malformed grammar file: {err}") from err
    try:
        return GrammarSpec(
            text_vocab_size=int(doc["text_vocab_size"]),
            speech_vocab_size=int(doc["speech_vocab_size"]),
            num_speakers=int(doc["num_speakers"]),
            expansion_range=tuple(doc["expansion_range"]),
            seed=int(doc["seed"]),
            runs=tuple(
                tuple(tuple(int(t) for t in run) for run in spk) for spk in doc["runs"]
            ),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise InputError(f"malformed grammar file: {err}") from err


def write_grammar(grammar: GrammarSpec, path: str | Path) -> None:
    Path(path).write_text(grammar_to_json(grammar), encoding="utf-8")


def read_grammar(path: str | Path) -> GrammarSpec:
    return grammar_from_json(Path(path).read_text(encoding="utf-8"))


def grammar_hash(grammar: GrammarSpec) -> str:
    return hashlib.sha256(grammar_to_json(grammar).encode("utf-8")).hexdigest()


def write_corpus(utterances: Iterable[Utterance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt in utterances:
            rec = {
                "text": [int(x) for x in utt.text],
                "speech": [int(x) for x in utt.speech],
                "speaker": int(utt.speaker),
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_corpus(path: str | Path) -> list[Utterance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Utterance(
                        text=np.asarray(rec["text"], dtype=np.int64),
                        speech=np.asarray(rec["speech"], dtype=np.int64),
                        speaker=int(rec["speaker"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise InputError(f"{path}: malformed corpus record at line {lineno}: {err}") from err
    return out
