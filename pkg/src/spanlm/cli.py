"""Command-line entry point: corpus generation, training, synthesis, comparison, sweeps.

Every artifact-producing command writes a run manifest (argv, seed, input and
output hashes). `spanlm rerun <manifest>` re-executes the recorded command into
a fresh directory and verifies the deterministic outputs hash-identically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .corpus import (
    build_grammar,
    encode_utterance,
    generate_corpus,
    grammar_hash,
    read_corpus,
    read_grammar,
    write_corpus,
    write_grammar,
)
from .decoding import ModelPredictor, profile_rows
from .errors import ConfigError, InputError, SpanLMError, UsageError
from .manifests import (
    atomic_write_text,
    read_run_manifest,
    sha256_file,
    write_run_manifest,
)
from .model import ModelConfig, load_checkpoint
from .sampling import SamplerConfig
from .seeding import derive_seed
from .training import TrainConfig, train

TIMING_FILES = ("timings.csv", "profile.csv")


def _int_pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected two comma-separated ints, got {text!r}") from err
    return a, b


def _float_list(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from err
    return values


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from err


def _sampler(text: str) -> SamplerConfig:
    if text == "greedy":
        return SamplerConfig(mode="greedy")
    if text.startswith("top_p:"):
        return SamplerConfig(mode="top_p", top_p=float(text.split(":", 1)[1]))
    raise argparse.ArgumentTypeError(f"expected 'greedy' or 'top_p:<p>', got {text!r}")


def _out_dir(raw: str) -> Path:
    base = os.environ.get("SPANLM_OUT_DIR")
    path = Path(raw)
    if base and not path.is_absolute():
        path = Path(base) / path
    return path


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _parse_utt_ref(text: str) -> tuple[Path, int]:
    if ":" in text and not text.endswith(":"):
        head, tail = text.rsplit(":", 1)
        if tail.isdigit():
            return Path(head), int(tail)
    return Path(text), 0


# ---------------------------------------------------------------------------

def cmd_gen_corpus(args: argparse.Namespace, argv: list[str]) -> int:
    started = time.time()
    out = _out_dir(args.out_dir)
    _prepare_out_dir(out, args.force)
    grammar = build_grammar(
        text_vocab_size=args.text_vocab,
        speech_vocab_size=args.speech_vocab,
        num_speakers=args.num_speakers,
        expansion_range=tuple(args.expansion),
        seed=derive_seed(args.seed, "grammar"),
    )
    write_grammar(grammar, out / "grammar.json")
    train_utts = generate_corpus(
        grammar, args.num_utts, tuple(args.text_len_range), derive_seed(args.seed, "corpus-train")
    )
    heldout_range = args.heldout_text_len_range or args.text_len_range
    heldout = generate_corpus(
        grammar, args.num_heldout, tuple(heldout_range), derive_seed(args.seed, "corpus-heldout")
    )
    write_corpus(train_utts, out / "train.jsonl")
    write_corpus(heldout, out / "heldout.jsonl")
    write_run_manifest(out, "gen-corpus", argv, args.seed, inputs={}, started=started)
    print(f"wrote {len(train_utts)} train / {len(heldout)} held-out utterances to {out}")
    return 0


def cmd_train(args: argparse.Namespace, argv: list[str]) -> int:
    started = time.time()
    if args.stage == 2 and not args.init_ckpt:
        raise UsageError("--stage 2 requires --init-ckpt (the stage-one checkpoint)")
    out = _out_dir(args.out)
    _prepare_out_dir(out, args.force)
    grammar = read_grammar(args.grammar)

    overrides: dict = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise InputError(f"unreadable train config {args.config}: {err}") from err
    model_overrides = overrides.pop("model", {})
    model_cfg = None
    if args.stage == 1:
        model_kwargs = dict(
            speech_vocab=grammar.speech_vocab_size + 1,
            text_vocab=grammar.text_vocab_size + 1,
            layers=args.layers,
            heads=args.heads,
            d_model=args.d_model,
            d_ff=args.d_ff,
            seed=derive_seed(args.seed, "model-init"),
        )
        model_kwargs.update(model_overrides)
        model_cfg = ModelConfig(**model_kwargs)

    cfg_kwargs = dict(
        stage=args.stage,
        corpus_path=str(args.corpus),
        out_dir=str(out),
        model=model_cfg,
        init_checkpoint=args.init_ckpt,
        batch_tokens=args.batch_tokens,
        max_steps=args.max_steps,
        lr=args.lr,
        warmup_steps=args.warmup_steps,
        mask_prob=args.mask_prob,
        seed=derive_seed(args.seed, "train"),
        overfit_utterances=args.overfit,
        grammar_hash=grammar_hash(grammar),
    )
    cfg_kwargs.update(overrides)
    result = train(TrainConfig(**cfg_kwargs))
    inputs = {str(args.corpus): sha256_file(args.corpus), str(args.grammar): sha256_file(args.grammar)}
    if args.init_ckpt:
        inputs[str(args.init_ckpt)] = sha256_file(Path(args.init_ckpt) / "weights.bin")
    write_run_manifest(out, "train", argv, args.seed, inputs=inputs, started=started)
    print(
        f"stage {args.stage} done: final loss {result.final_loss:.4f}, "
        f"masked accuracy {result.final_accuracy:.4f}, checkpoint at {result.checkpoint_dir}"
    )
    return 0


def _load_predictors(ckpt1: str, ckpt2: str | None) -> tuple[ModelPredictor, ModelPredictor | None]:
    model1, _ = load_checkpoint(ckpt1)
    stage1 = ModelPredictor(model1)
    stage2 = None
    if ckpt2:
        model2, _ = load_checkpoint(ckpt2)
        stage2 = ModelPredictor(model2)
    return stage1, stage2


def cmd_synth(args: argparse.Namespace, argv: list[str]) -> int:
    started = time.time()
    out = _out_dir(args.out)
    _prepare_out_dir(out, args.force)
    grammar = read_grammar(args.grammar)
    stage1, stage2 = _load_predictors(args.ckpt1, args.ckpt2)

    corpus_path, idx = _parse_utt_ref(args.prompt_utt)
    records = read_corpus(corpus_path)
    if not 0 <= idx < len(records):
        raise InputError(f"prompt index {idx} out of range for {corpus_path} ({len(records)} records)")
    prompt_utt = records[idx]
    text = np.asarray(args.text, dtype=np.int64)
    target_gt = encode_utterance(grammar, text, prompt_utt.speaker)
    prompt = evaluation.Prompt(
        x_ref=prompt_utt.text,
        c_ref=prompt_utt.speech,
        x_gen=text,
        gt_region=len(target_gt.speech),
        speaker=prompt_utt.speaker,
    )

    mode, mult = args.duration, 1.0
    if mode.startswith("multiplier="):
        mode, mult = "multiplier", float(args.duration.split("=", 1)[1])
    T_gen = evaluation.resolve_duration(prompt, mode, mult)
    T_ref = len(prompt.c_ref)
    if T_gen <= T_ref:
        raise InputError(f"target length {T_gen} does not exceed prompt length {T_ref}")

    trace: list | None = [] if args.trace else None
    out_tokens = evaluation.synthesize(
        stage1, stage2, prompt, T_gen,
        infer_ratio=args.infer_ratio,
        refine_steps=args.steps2,
        gamma=args.gamma,
        sampler=args.sampler,
        rng=np.random.default_rng(derive_seed(args.seed, "decode")),
        trace=trace,
    )
    record = {
        "tokens": [int(t) for t in out_tokens],
        "T_ref": T_ref,
        "T_gen": T_gen,
        "speaker": int(prompt.speaker),
        "text": [int(t) for t in text],
    }
    atomic_write_text(out / "generated.jsonl", json.dumps(record, sort_keys=True) + "\n")
    if trace is not None:
        atomic_write_text(out / "trace.jsonl", "".join(json.dumps(r) + "\n" for r in trace))
    inputs = {
        str(args.grammar): sha256_file(args.grammar),
        str(corpus_path): sha256_file(corpus_path),
    }
    write_run_manifest(out, "synth", argv, args.seed, inputs=inputs, started=started)
    score = evaluation.score_utterance(grammar, out_tokens[T_ref:], text, prompt_utt.speaker)
    print(
        f"generated {T_gen - T_ref} tokens (T_gen {T_gen}); "
        f"SER {score.symbol_error_rate:.3f}, speaker consistency {score.speaker_consistency:.3f}"
    )
    return 0


def cmd_compare(args: argparse.Namespace, argv: list[str]) -> int:
    started = time.time()
    out = _out_dir(args.out)
    _prepare_out_dir(out, args.force)
    grammar = read_grammar(args.grammar)
    heldout = read_corpus(args.heldout)

    paradigms = [p.strip() for p in args.paradigms.split(",") if p.strip()]
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    ckpts = dict(item.split("=", 1) for item in args.ckpts.split(",") if "=" in item)
    missing = [p for p in paradigms if p not in ckpts]
    if missing:
        raise UsageError(f"no checkpoint given for paradigm(s): {', '.join(missing)}")
    reports = evaluation.compare_paradigms(
        grammar,
        heldout,
        {p: ckpts[p] for p in paradigms},
        num_prompts=args.num_prompts,
        duration=args.duration,
        infer_ratio=args.infer_ratio,
        nar_iters=args.nar_iters,
        sampler=args.sampler,
        seed=derive_seed(args.seed, "decode"),
        protocols=protocols,
    )
    table = ["paradigm,protocol,symbol_error_rate,speaker_consistency,step_count"]
    timings = ["paradigm,protocol,wall_clock_s"]
    full = {}
    for name in paradigms:
        for protocol in protocols:
            rep = reports[(name, protocol)]
            table.append(
                f"{name},{protocol},{rep.symbol_error_rate:.6f},"
                f"{rep.speaker_consistency:.6f},{rep.step_count}"
            )
            timings.append(f"{name},{protocol},{rep.wall_clock_s:.3f}")
            full[f"{name}/{protocol}"] = {
                "symbol_error_rate": rep.symbol_error_rate,
                "speaker_consistency": rep.speaker_consistency,
                "step_count": rep.step_count,
                "per_utterance": [asdict(s) for s in rep.per_utterance],
            }
    atomic_write_text(out / "table.csv", "\n".join(table) + "\n")
    atomic_write_text(out / "timings.csv", "\n".join(timings) + "\n")
    atomic_write_text(out / "report.json", json.dumps(full, sort_keys=True, indent=2) + "\n")
    inputs = {str(args.grammar): sha256_file(args.grammar), str(args.heldout): sha256_file(args.heldout)}
    write_run_manifest(
        out, "compare", argv, args.seed, inputs=inputs,
        nondeterministic_outputs=[f for f in TIMING_FILES if (out / f).exists()],
        started=started,
    )
    print("\n".join(table))
    return 0


def cmd_sweep(args: argparse.Namespace, argv: list[str]) -> int:
    started = time.time()
    out = _out_dir(args.out)
    _prepare_out_dir(out, args.force)
    grammar = read_grammar(args.grammar)
    heldout = read_corpus(args.heldout)
    stage1, stage2 = _load_predictors(args.ckpt1, args.ckpt2)
    if not args.grid:
        raise UsageError("sweep grid must be nonempty")

    decode_seed = derive_seed(args.seed, "decode")
    if args.param == "duration":
        rows = evaluation.sweep_duration(
            grammar, heldout, stage1, stage2, multipliers=args.grid,
            num_prompts=args.num_prompts, refine_steps=args.steps2, gamma=args.gamma,
            infer_ratio=args.infer_ratio, sampler=args.sampler, seed=decode_seed,
        )
        param_name = "duration_multiplier"
    else:
        stage = 1 if args.param == "steps1" else 2
        rows = evaluation.sweep_steps(
            grammar, heldout, stage1, stage2, stage, args.grid,
            num_prompts=args.num_prompts, refine_steps=args.steps2, gamma=args.gamma,
            infer_ratio=args.infer_ratio, sampler=args.sampler, seed=decode_seed,
        )
        param_name = "infer_ratio" if stage == 1 else "refine_steps"
    atomic_write_text(out / "curve.csv", evaluation.curve_csv(rows, param_name))
    if args.plot:
        try:
            evaluation.plot_curve(rows, param_name, str(out / "curve.png"))
        except ImportError as err:
            raise ConfigError(f"--plot requires matplotlib: {err}") from err
    inputs = {str(args.grammar): sha256_file(args.grammar), str(args.heldout): sha256_file(args.heldout)}
    write_run_manifest(
        out, "sweep", argv, args.seed, inputs=inputs,
        nondeterministic_outputs=["curve.png"] if args.plot else [],
        started=started,
    )
    print(evaluation.curve_csv(rows, param_name), end="")
    return 0


def cmd_profile(args: argparse.Namespace, argv: list[str]) -> int:
    from .decoding import count_steps

    started = time.time()
    out = _out_dir(args.out)
    _prepare_out_dir(out, args.force)
    profiles = []
    for T_gen in args.lengths:
        T_ref = T_gen // 2
        for paradigm in args.paradigms.split(","):
            profiles.append(
                count_steps(
                    paradigm.strip(), T_ref, T_gen,
                    latency_s=args.latency_ms / 1000.0,
                    infer_ratio=args.infer_ratio,
                    iters=args.nar_iters,
                )
            )
    atomic_write_text(out / "profile.csv", profile_rows(profiles))
    write_run_manifest(
        out, "profile", argv, None, inputs={},
        nondeterministic_outputs=["profile.csv"], started=started,
    )
    print(profile_rows(profiles), end="")
    return 0


def cmd_rerun(args: argparse.Namespace, _argv: list[str]) -> int:
    manifest = read_run_manifest(args.manifest)
    recorded_argv = list(manifest["argv"])
    out_flags = {"--out", "--out-dir"}
    new_dir = str(_out_dir(args.out_dir))
    replaced = False
    for i, tok in enumerate(recorded_argv):
        if tok in out_flags and i + 1 < len(recorded_argv):
            recorded_argv[i + 1] = new_dir
            replaced = True
    if not replaced:
        raise InputError(f"manifest argv has no --out/--out-dir to redirect: {recorded_argv}")
    if "--force" not in recorded_argv:
        recorded_argv.append("--force")
    code = main(recorded_argv)
    if code != 0:
        print(f"rerun failed with exit code {code}", file=sys.stderr)
        return code
    mismatches = []
    for rel, expected in manifest["outputs"].items():
        path = Path(new_dir) / rel
        if not path.exists():
            mismatches.append(f"{rel}: missing")
        elif sha256_file(path) != expected:
            mismatches.append(f"{rel}: hash mismatch")
    if mismatches:
        print("rerun outputs differ:\n  " + "\n  ".join(mismatches), file=sys.stderr)
        return 1
    print(f"rerun reproduced {len(manifest['outputs'])} output file(s) bitwise")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spanlm",
        description="Span-committed codec token synthesis: corpus, training, decoding, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate grammar + train/heldout token corpora")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-utts", type=int, default=10000)
    p.add_argument("--num-heldout", type=int, default=1000)
    p.add_argument("--text-len-range", type=_int_pair, default=(5, 12))
    p.add_argument(
        "--heldout-text-len-range", type=_int_pair, default=None,
        help="held-out texts can be kept shorter so prompt+target pairs stay inside "
        "the trained length range (default: same as --text-len-range)",
    )
    p.add_argument("--text-vocab", type=int, default=64)
    p.add_argument("--speech-vocab", type=int, default=256)
    p.add_argument("--num-speakers", type=int, default=8)
    p.add_argument("--expansion", type=_int_pair, default=(2, 6))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train stage one or stage two")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--grammar", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-ckpt", default=None)
    p.add_argument("--config", default=None, help="JSON file of TrainConfig overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--batch-tokens", type=int, default=2048)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--warmup-steps", type=int, default=100)
    p.add_argument("--mask-prob", type=float, default=0.1)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--d-ff", type=int, default=512)
    p.add_argument("--overfit", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="two-stage synthesis for one prompt")
    p.add_argument("--ckpt1", required=True)
    p.add_argument("--ckpt2", default=None)
    p.add_argument("--grammar", required=True)
    p.add_argument("--prompt-utt", required=True, help="corpus.jsonl[:index]")
    p.add_argument("--text", type=_int_list, required=True)
    p.add_argument("--duration", default="estimate", help="gt | estimate | multiplier=X")
    p.add_argument("--steps2", type=int, default=7)
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--infer-ratio", type=float, default=0.01)
    p.add_argument("--sampler", type=_sampler, default=SamplerConfig())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compare", help="AR vs NAR vs PAR on shared prompts")
    p.add_argument("--paradigms", default="ar,nar,par")
    p.add_argument("--protocols", default="cross_sentence", help="cross_sentence,continuation")
    p.add_argument("--ckpts", required=True, help="name=ckpt_dir, comma separated")
    p.add_argument("--heldout", required=True)
    p.add_argument("--grammar", required=True)
    p.add_argument("--num-prompts", type=int, default=50)
    p.add_argument("--duration", default="gt", choices=("gt", "estimate"))
    p.add_argument("--infer-ratio", type=float, default=0.01)
    p.add_argument("--nar-iters", type=int, default=50)
    p.add_argument("--sampler", type=_sampler, default=SamplerConfig())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="duration or step-count robustness curves")
    p.add_argument("--param", choices=("duration", "steps1", "steps2"), required=True)
    p.add_argument("--grid", type=_float_list, default=None)
    p.add_argument("--ckpt1", required=True)
    p.add_argument("--ckpt2", default=None)
    p.add_argument("--heldout", required=True)
    p.add_argument("--grammar", required=True)
    p.add_argument("--num-prompts", type=int, default=50)
    p.add_argument("--steps2", type=int, default=7)
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--infer-ratio", type=float, default=0.01)
    p.add_argument("--sampler", type=_sampler, default=SamplerConfig())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("profile", help="step counts and mock-latency wall clock per paradigm")
    p.add_argument("--paradigms", default="ar,nar,par")
    p.add_argument("--lengths", type=_int_list, default=[200, 400, 800])
    p.add_argument("--latency-ms", type=float, default=1.0)
    p.add_argument("--infer-ratio", type=float, default=0.01)
    p.add_argument("--nar-iters", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("rerun", help="re-execute a run manifest and verify output hashes")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = os.environ.get("SPANLM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except SpanLMError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
