"""spanlm: span-committed masked language modeling for codec token synthesis."""

from .corpus import (
    GrammarSpec,
    Utterance,
    build_grammar,
    decode_oracle,
    encode_utterance,
    generate_corpus,
    read_corpus,
    write_corpus,
)
from .decoding import ar_generate, count_steps, nar_generate, par_generate, refine
from .errors import SpanLMError
from .masking import (
    estimate_duration,
    pad_text,
    par_infer_mask,
    stage1_train_mask,
    stage2_train_mask,
)
from .model import MaskedTokenTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .sampling import SamplerConfig, sample_top_p
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "GrammarSpec",
    "MaskedTokenTransformer",
    "ModelConfig",
    "SamplerConfig",
    "SpanLMError",
    "TrainConfig",
    "Utterance",
    "ar_generate",
    "build_grammar",
    "count_steps",
    "decode_oracle",
    "encode_utterance",
    "estimate_duration",
    "generate_corpus",
    "load_checkpoint",
    "nar_generate",
    "pad_text",
    "par_generate",
    "par_infer_mask",
    "read_corpus",
    "refine",
    "sample_top_p",
    "save_checkpoint",
    "stage1_train_mask",
    "stage2_train_mask",
    "train",
    "write_corpus",
]
