"""Per-row token samplers: greedy argmax and nucleus (top-p)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError

MODES = ("greedy", "top_p")


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "greedy"
    top_p: float = 0.3

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise InputError(f"unknown sampler mode {self.mode!r}, expected one of {MODES}")
        if not 0.0 < self.top_p <= 1.0:
            raise InputError(f"top_p must lie in (0, 1], got {self.top_p}")


def sample_top_p(
    prob_row: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator
) -> int:
    """Sample one token id from a probability row.

    Nucleus mode draws from the smallest prefix of the descending-sorted
    distribution whose cumulative mass reaches top_p (the nucleus always
    contains the argmax). Greedy mode returns the argmax. Ties break toward
    the lowest id everywhere.
    """
    row = np.asarray(prob_row, dtype=np.float64)
    if not np.isfinite(row).all() or (row < 0).any():
        raise NumericError("probability row must be finite and nonnegative")
    total = row.sum()
    if total <= 0.0:
        raise NumericError("degenerate all-zero probability row")
    row = row / total
    if cfg.mode == "greedy":
        return int(row.argmax())
    order = np.argsort(-row, kind="stable")  # descending, lowest id first on ties
    csum = np.cumsum(row[order])
    cut = int(np.searchsorted(csum, cfg.top_p)) + 1
    nucleus = order[:cut]
    weights = row[nucleus] / row[nucleus].sum()
    return int(rng.choice(nucleus, p=weights))
