"""Bidirectional masked token transformer with feature-dimension text fusion.

Two equal-length input sequences (padded text, speech tokens with MASK
placeholders) are embedded separately; the text branch runs through a
ConvNeXt-style block, both branches get sinusoidal positions with learnable
per-branch gains, the branches are concatenated along the feature dimension,
projected, offset by a convolutional positional embedding, and fed to a full
self-attention encoder. Output is one logit row per position over the speech
vocabulary including the MASK class (which samplers later suppress).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, InputError, NumericError

CHECKPOINT_FORMAT_VERSION = 1
WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class ModelConfig:
    speech_vocab: int  # N + 1, includes MASK
    text_vocab: int  # includes PAD
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    convnext_blocks: int = 1
    conv_pos_kernel: int = 7
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.heads != 0:
            raise InputError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.conv_pos_kernel % 2 != 1:
            raise InputError(f"conv positional kernel must be odd, got {self.conv_pos_kernel}")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rejects non-finite input."""
    arr = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericError("non-finite logits")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


class GlobalResponseNorm(nn.Module):
    """Channel recalibration by global (per-sequence) feature magnitude."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, T, C)
        gx = torch.norm(x, p=2, dim=1, keepdim=True)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock(nn.Module):
    """Depthwise conv -> LN -> pointwise expand -> GELU -> GRN -> project, residual."""

    def __init__(self, dim: int, kernel: int = 7):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, kernel_size=kernel, padding=kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, 2 * dim)
        self.act = nn.GELU()
        self.grn = GlobalResponseNorm(2 * dim)
        self.pw2 = nn.Linear(2 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, T, C)
        h = self.dwconv(x.transpose(1, 2)).transpose(1, 2)
        h = self.norm(h)
        h = self.pw2(self.grn(self.act(self.pw1(h))))
        return x + h


class ConvPositionalEmbedding(nn.Module):
    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel_size=kernel, padding=kernel // 2)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, T, C)
        return x + self.act(self.conv(x.transpose(1, 2)).transpose(1, 2))


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    enc = torch.zeros(length, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(pos * div)
    enc[:, 1::2] = torch.cos(pos * div)
    return enc.float()


class MaskedTokenTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)  # weight init reproducibility

        d = config.d_model
        self.text_emb = nn.Embedding(config.text_vocab, d)
        self.speech_emb = nn.Embedding(config.speech_vocab, d)
        self.text_blocks = nn.ModuleList(
            ConvNeXtBlock(d, kernel=7) for _ in range(config.convnext_blocks)
        )
        self.text_pos_gain = nn.Parameter(torch.ones(1))
        self.speech_pos_gain = nn.Parameter(torch.ones(1))
        self.pos_dropout = nn.Dropout(config.dropout)
        self.fuse = nn.Linear(2 * d, d)
        self.conv_pos = ConvPositionalEmbedding(d, config.conv_pos_kernel)
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=config.heads,
            dim_feedforward=config.d_ff,
            dropout=config.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.speech_vocab)

    def forward(
        self,
        text_ids: torch.Tensor,
        speech_ids: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Per-position logits over the speech vocabulary (no causal masking).

        Inputs are (B, T) or (T,); `pad_mask` marks batch-padding positions
        (True = ignore) so convolutions and attention cannot leak them.
        """
        squeeze = text_ids.dim() == 1
        if squeeze:
            text_ids = text_ids.unsqueeze(0)
            speech_ids = speech_ids.unsqueeze(0)
            if pad_mask is not None:
                pad_mask = pad_mask.unsqueeze(0)
        if text_ids.shape != speech_ids.shape:
            raise InputError(
                f"text/speech length mismatch: {tuple(text_ids.shape)} vs {tuple(speech_ids.shape)}"
            )
        if int(text_ids.max()) >= self.config.text_vocab or int(text_ids.min()) < 0:
            raise InputError("text id outside vocabulary")
        if int(speech_ids.max()) >= self.config.speech_vocab or int(speech_ids.min()) < 0:
            raise InputError("speech id outside vocabulary")

        dtype = self.head.weight.dtype
        keep = None
        if pad_mask is not None:
            keep = (~pad_mask).unsqueeze(-1).to(dtype)

        te = self.text_emb(text_ids)
        if keep is not None:
            te = te * keep
        for block in self.text_blocks:
            te = block(te)

        se = self.speech_emb(speech_ids)
        T = text_ids.shape[1]
        pos = sinusoidal_positions(T, self.config.d_model).to(device=te.device, dtype=dtype)
        te = self.pos_dropout(te + self.text_pos_gain * pos)
        se = self.pos_dropout(se + self.speech_pos_gain * pos)

        h = self.fuse(torch.cat([te, se], dim=-1))
        if keep is not None:
            h = h * keep
        h = self.conv_pos(h)
        h = self.encoder(h, src_key_padding_mask=pad_mask)
        logits = self.head(self.out_norm(h))
        return logits.squeeze(0) if squeeze else logits


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _write_weights(state: dict[str, torch.Tensor], path: Path) -> None:
    # Deterministic container: header length, JSON index, raw little-endian blobs.
    index = {}
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        data = np.ascontiguousarray(arr).tobytes()
        index[name] = {"dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        blobs.append(data)
        offset += len(data)
    header = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read_weights(path: Path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        header_len = int.from_bytes(fh.read(8), "little")
        index = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()
    state = {}
    for name, meta in index.items():
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(
            blob, dtype=dtype, count=count, offset=meta["offset"]
        ).reshape(meta["shape"])
        state[name] = torch.from_numpy(arr.copy())
    return state


def save_checkpoint(
    model: MaskedTokenTransformer, path: str | Path, extra: dict | None = None
) -> Path:
    """Write a checkpoint directory: weights container + JSON manifest."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "param_count": count_parameters(model),
        "rng_seed": model.config.seed,
    }
    if extra:
        manifest["extra"] = extra
    _write_weights(model.state_dict(), out / WEIGHTS_FILE)
    (out / MANIFEST_FILE).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return out


def load_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads((Path(path) / MANIFEST_FILE).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable checkpoint manifest at {path}: {err}") from err
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {manifest.get('format_version')!r} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return manifest


def load_checkpoint(path: str | Path) -> tuple[MaskedTokenTransformer, dict]:
    """Rebuild the model from a checkpoint directory; verify config consistency."""
    path = Path(path)
    manifest = load_manifest(path)
    try:
        config = ModelConfig(**manifest["config"])
    except (KeyError, TypeError, InputError) as err:
        raise CheckpointError(f"invalid checkpoint config: {err}") from err
    model = MaskedTokenTransformer(config)
    if count_parameters(model) != manifest.get("param_count"):
        raise CheckpointError(
            f"parameter count mismatch: manifest says {manifest.get('param_count')}, "
            f"model has {count_parameters(model)}"
        )
    try:
        state = _read_weights(path / WEIGHTS_FILE)
        model.load_state_dict(state, strict=True)
    except (OSError, KeyError, ValueError, RuntimeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint weights at {path}: {err}") from err
    model.eval()
    return model, manifest
