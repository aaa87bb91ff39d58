"""Two-stage conditional masked language model training over a token corpus.

Stage one teaches span continuation: a suffix mask hides everything past a
uniform start and only the leftmost 10% span of the hidden part is supervised.
Stage two (fine-tuned from stage one) teaches infilling: post-prompt positions
are masked independently with small probability and all masked positions are
supervised. Both losses touch masked positions only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Utterance, read_corpus
from .errors import ConfigError, InputError, TrainingDivergedError
from .manifests import atomic_write_text
from .masking import STAGE1_MIN_T, pad_text, stage1_train_mask, stage2_train_mask
from .model import MaskedTokenTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .seeding import derive_seed

STAGE2_MIN_T = 4
LOSS_CURVE_HEADER = "step,loss,masked_token_accuracy"


@dataclass
class TrainConfig:
    stage: int
    corpus_path: str
    out_dir: str
    model: ModelConfig | None = None  # stage 1; stage 2 inherits from the init checkpoint
    init_checkpoint: str | None = None  # required for stage 2
    batch_tokens: int = 2048
    max_steps: int = 2000
    lr: float = 2e-3
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    mask_prob: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    overfit_utterances: int | None = None  # train on one fixed batch of this many
    stop_at_accuracy: float | None = None
    grammar_hash: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2 and not self.init_checkpoint:
            raise ConfigError("stage 2 training requires an init checkpoint from stage 1")
        if self.stage == 1 and self.model is None:
            raise ConfigError("stage 1 training requires a model config")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")


@dataclass
class TrainBatch:
    text: torch.Tensor  # long (B, T)
    speech_in: torch.Tensor  # long (B, T), MASK at hidden positions
    targets: torch.Tensor  # long (B, T), true tokens
    loss_mask: torch.Tensor  # bool (B, T), supervised positions
    pad_mask: torch.Tensor  # bool (B, T), batch padding


@dataclass
class TrainResult:
    checkpoint_dir: Path
    curve_path: Path
    curve: list[tuple[int, float, float]] = field(repr=False)

    @property
    def final_loss(self) -> float:
        return self.curve[-1][1]

    @property
    def final_accuracy(self) -> float:
        return self.curve[-1][2]


def _collate(
    utts: Sequence[Utterance],
    masks: Sequence[np.ndarray],
    loss_masks: Sequence[np.ndarray],
    mask_id: int,
    pad_id: int,
) -> TrainBatch:
    B = len(utts)
    T = max(len(u.speech) for u in utts)
    text = np.full((B, T), pad_id, dtype=np.int64)
    speech_in = np.full((B, T), mask_id, dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    loss_mask = np.zeros((B, T), dtype=bool)
    pad_mask = np.ones((B, T), dtype=bool)
    for b, (utt, m, lm) in enumerate(zip(utts, masks, loss_masks)):
        t = len(utt.speech)
        text[b, :t] = pad_text(utt.text, (), t, pad_id)
        speech_in[b, :t] = np.where(m, mask_id, utt.speech)
        targets[b, :t] = utt.speech
        loss_mask[b, :t] = lm
        pad_mask[b, :t] = False
    return TrainBatch(
        text=torch.from_numpy(text),
        speech_in=torch.from_numpy(speech_in),
        targets=torch.from_numpy(targets),
        loss_mask=torch.from_numpy(loss_mask),
        pad_mask=torch.from_numpy(pad_mask),
    )


def build_stage1_batch(
    utts: Sequence[Utterance], mask_id: int, pad_id: int, rng: np.random.Generator
) -> TrainBatch:
    """Suffix-mask each utterance; supervise only the leftmost target span."""
    masks, loss_masks = [], []
    for utt in utts:
        drawn = stage1_train_mask(len(utt.speech), rng)
        lm = np.zeros(len(utt.speech), dtype=bool)
        lm[drawn.start : drawn.start + drawn.target_len] = True
        masks.append(drawn.mask)
        loss_masks.append(lm)
    return _collate(utts, masks, loss_masks, mask_id, pad_id)


def build_stage2_batch(
    utts: Sequence[Utterance],
    mask_id: int,
    pad_id: int,
    rng: np.random.Generator,
    mask_prob: float = 0.1,
) -> TrainBatch:
    """Bernoulli-mask past the prompt; resample empty draws so every row trains."""
    masks = []
    for utt in utts:
        m = stage2_train_mask(len(utt.speech), mask_prob, rng)
        while not m.any():
            m = stage2_train_mask(len(utt.speech), mask_prob, rng)
        masks.append(m)
    return _collate(utts, masks, masks, mask_id, pad_id)


def masked_loss(
    logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor
) -> tuple[torch.Tensor, dict]:
    """Cross-entropy averaged per sequence over supervised positions, then batched."""
    B, T, C = logits.shape
    ce = F.cross_entropy(logits.reshape(B * T, C), targets.reshape(B * T), reduction="none")
    ce = ce.view(B, T) * loss_mask
    counts = loss_mask.sum(dim=1)
    if (counts == 0).any():
        raise InputError("every sequence needs at least one supervised position")
    loss = (ce.sum(dim=1) / counts).mean()
    with torch.no_grad():
        pred = logits.argmax(dim=-1)
        hits = ((pred == targets) & loss_mask).sum()
        total = loss_mask.sum()
        stats = {
            "masked_token_accuracy": float(hits) / float(total),
            "supervised_positions": int(total),
        }
    return loss, stats


def stage1_loss(model: MaskedTokenTransformer, batch: TrainBatch) -> tuple[torch.Tensor, dict]:
    logits = model(batch.text, batch.speech_in, pad_mask=batch.pad_mask)
    return masked_loss(logits, batch.targets, batch.loss_mask)


def stage2_loss(model: MaskedTokenTransformer, batch: TrainBatch) -> tuple[torch.Tensor, dict]:
    logits = model(batch.text, batch.speech_in, pad_mask=batch.pad_mask)
    return masked_loss(logits, batch.targets, batch.loss_mask)


class Batcher:
    """Similar-length batches with deterministic per-epoch shuffling."""

    def __init__(
        self,
        utterances: Sequence[Utterance],
        batch_tokens: int,
        seed: int,
        min_len: int,
    ):
        keep = [u for u in utterances if len(u.speech) >= min_len]
        if not keep:
            raise InputError(f"no utterances of length >= {min_len} in the corpus")
        keep.sort(key=lambda u: len(u.speech))
        self.chunks: list[list[Utterance]] = []
        cur: list[Utterance] = []
        cur_tokens = 0
        for utt in keep:
            if cur and cur_tokens + len(utt.speech) > batch_tokens:
                self.chunks.append(cur)
                cur, cur_tokens = [], 0
            cur.append(utt)
            cur_tokens += len(utt.speech)
        if cur:
            self.chunks.append(cur)
        self._rng = np.random.default_rng(seed)
        self._order: list[int] = []

    def next_batch(self) -> list[Utterance]:
        if not self._order:
            self._order = list(self._rng.permutation(len(self.chunks)))
        return self.chunks[self._order.pop()]


def _lr_lambda(step: int, warmup: int, total: int, floor: float):
    if step < warmup:
        return (step + 1) / max(1, warmup)
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(config: TrainConfig) -> TrainResult:
    """Run one training stage; emit a checkpoint directory and a loss curve CSV."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.stage == 1:
        model = MaskedTokenTransformer(config.model)
    else:
        model, _ = load_checkpoint(config.init_checkpoint)
    mask_id = model.config.speech_vocab - 1
    pad_id = model.config.text_vocab - 1

    utterances = read_corpus(config.corpus_path)
    min_len = STAGE1_MIN_T if config.stage == 1 else STAGE2_MIN_T
    if config.overfit_utterances:
        pool = [u for u in utterances if len(u.speech) >= min_len]
        if len(pool) < config.overfit_utterances:
            raise InputError(
                f"corpus has {len(pool)} usable utterances, "
                f"need {config.overfit_utterances} for overfit mode"
            )
        pool = pool[: config.overfit_utterances]
        batcher = None
    else:
        batcher = Batcher(utterances, config.batch_tokens, derive_seed(config.seed, "order"), min_len)

    mask_rng = np.random.default_rng(derive_seed(config.seed, "mask"))
    torch.manual_seed(derive_seed(config.seed, "train-torch"))

    build = build_stage1_batch if config.stage == 1 else build_stage2_batch
    kwargs = {} if config.stage == 1 else {"mask_prob": config.mask_prob}
    fixed_batch = None
    if config.overfit_utterances:
        fixed_batch = build(pool, mask_id, pad_id, mask_rng, **kwargs)

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=0.01)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda s: _lr_lambda(s, config.warmup_steps, config.max_steps, config.min_lr_ratio),
    )
    loss_fn = stage1_loss if config.stage == 1 else stage2_loss

    curve_path = out_dir / "loss_curve.csv"

    def flush_curve(rows: list[tuple[int, float, float]]) -> None:
        lines = [LOSS_CURVE_HEADER] + [f"{s},{l:.6f},{a:.6f}" for s, l, a in rows]
        atomic_write_text(curve_path, "\n".join(lines) + "\n")

    model.train()
    curve: list[tuple[int, float, float]] = []
    for step in range(config.max_steps):
        batch = fixed_batch if fixed_batch is not None else build(
            batcher.next_batch(), mask_id, pad_id, mask_rng, **kwargs
        )
        loss, stats = loss_fn(model, batch)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        scheduler.step()
        last = step == config.max_steps - 1
        if step % config.log_every == 0 or last:
            curve.append((step, float(loss.detach()), stats["masked_token_accuracy"]))
            flush_curve(curve)  # live progress and crash evidence
            if (
                config.stop_at_accuracy is not None
                and stats["masked_token_accuracy"] >= config.stop_at_accuracy
            ):
                break

    model.eval()
    # out_dir is where artifacts land, not semantic configuration; echoing it
    # would make otherwise-identical reruns produce differing manifests.
    extra = {
        "stage": config.stage,
        "train_config": {
            k: v
            for k, v in asdict(config).items()
            if k not in ("model", "out_dir") and v is not None
        },
    }
    if config.grammar_hash:
        extra["grammar_hash"] = config.grammar_hash
    ckpt_dir = save_checkpoint(model, out_dir / "checkpoint", extra=extra)
    flush_curve(curve)
    return TrainResult(checkpoint_dir=ckpt_dir, curve_path=curve_path, curve=curve)
