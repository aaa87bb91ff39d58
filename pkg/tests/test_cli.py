"""CLI behavior: artifacts, manifests, exit codes, reproducibility."""

import json

import pytest

from spanlm.cli import main
from spanlm.corpus import read_corpus, read_grammar
from spanlm.manifests import MANIFEST_NAME, sha256_file

SMALL_GEN = [
    "gen-corpus", "--seed", "3", "--num-utts", "60", "--num-heldout", "30",
    "--text-len-range", "5,9", "--text-vocab", "16", "--num-speakers", "4",
    "--expansion", "2,4",
]
SMALL_TRAIN = [
    "train", "--stage", "1", "--seed", "4", "--max-steps", "40",
    "--layers", "1", "--d-model", "32", "--d-ff", "64", "--batch-tokens", "512",
]


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert run(SMALL_GEN + ["--out-dir", out]) == 0
    return out


@pytest.fixture(scope="module")
def stage1_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("cli") / "s1"
    code = run(
        SMALL_TRAIN
        + ["--corpus", corpus_dir / "train.jsonl", "--grammar", corpus_dir / "grammar.json", "--out", out]
    )
    assert code == 0
    return out


def test_gen_corpus_files(corpus_dir):
    for name in ("grammar.json", "train.jsonl", "heldout.jsonl", MANIFEST_NAME):
        assert (corpus_dir / name).exists()
    assert len(read_corpus(corpus_dir / "train.jsonl")) == 60
    read_grammar(corpus_dir / "grammar.json")


def test_gen_corpus_deterministic(tmp_path, corpus_dir):
    out2 = tmp_path / "corpus2"
    assert run(SMALL_GEN + ["--out-dir", out2]) == 0
    for name in ("grammar.json", "train.jsonl", "heldout.jsonl"):
        assert sha256_file(corpus_dir / name) == sha256_file(out2 / name)


def test_gen_corpus_refuses_existing(corpus_dir):
    assert run(SMALL_GEN + ["--out-dir", corpus_dir]) == 2


def test_gen_corpus_zero_utts(tmp_path):
    out = tmp_path / "empty"
    assert run(SMALL_GEN[:1] + ["--num-utts", "0", "--num-heldout", "0", "--out-dir", out]) == 0
    assert (out / "train.jsonl").read_text() == ""


def test_train_outputs(stage1_dir):
    assert (stage1_dir / "checkpoint" / "weights.bin").exists()
    curve = (stage1_dir / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "step,loss,masked_token_accuracy"
    first_loss = float(curve[1].split(",")[1])
    last_loss = float(curve[-1].split(",")[1])
    assert last_loss < first_loss


def test_train_stage2_requires_init(tmp_path, corpus_dir):
    code = run(
        ["train", "--stage", "2", "--corpus", corpus_dir / "train.jsonl",
         "--grammar", corpus_dir / "grammar.json", "--out", tmp_path / "s2"]
    )
    assert code == 2


def test_train_identical_seeds_identical_curves(tmp_path, corpus_dir):
    outs = []
    for name in ("ta", "tb"):
        out = tmp_path / name
        assert run(
            SMALL_TRAIN
            + ["--corpus", corpus_dir / "train.jsonl", "--grammar", corpus_dir / "grammar.json", "--out", out]
        ) == 0
        outs.append((out / "loss_curve.csv").read_bytes())
    assert outs[0] == outs[1]


def test_synth_runs_and_traces(tmp_path, corpus_dir, stage1_dir):
    out = tmp_path / "synth"
    code = run(
        ["synth", "--ckpt1", stage1_dir / "checkpoint", "--grammar", corpus_dir / "grammar.json",
         "--prompt-utt", f"{corpus_dir / 'heldout.jsonl'}:0", "--text", "1,2,3",
         "--duration", "estimate", "--steps2", "0", "--seed", "9", "--out", out, "--trace"]
    )
    assert code == 0
    rec = json.loads((out / "generated.jsonl").read_text())
    assert len(rec["tokens"]) == rec["T_gen"]
    trace = [json.loads(l) for l in (out / "trace.jsonl").read_text().splitlines()]
    assert trace and all("masked_positions" in t for t in trace)
    committed = sorted(p for t in trace for p in t["committed_positions"])
    assert committed == list(range(rec["T_ref"], rec["T_gen"]))


def test_synth_multiplier_one_matches_gt(tmp_path, corpus_dir, stage1_dir):
    outs = []
    for name, dur in (("gt", "gt"), ("m1", "multiplier=1.0")):
        out = tmp_path / name
        assert run(
            ["synth", "--ckpt1", stage1_dir / "checkpoint", "--grammar", corpus_dir / "grammar.json",
             "--prompt-utt", f"{corpus_dir / 'heldout.jsonl'}:1", "--text", "4,5",
             "--duration", dur, "--steps2", "0", "--seed", "7", "--out", out]
        ) == 0
        outs.append((out / "generated.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_compare_emits_table(tmp_path, corpus_dir, stage1_dir):
    out = tmp_path / "cmp"
    ckpt = stage1_dir / "checkpoint"
    code = run(
        ["compare", "--paradigms", "ar,nar,par", "--protocols", "cross_sentence,continuation",
         "--ckpts", f"ar={ckpt},nar={ckpt},par={ckpt}",
         "--heldout", corpus_dir / "heldout.jsonl", "--grammar", corpus_dir / "grammar.json",
         "--num-prompts", "3", "--nar-iters", "5", "--out", out]
    )
    assert code == 0
    table = (out / "table.csv").read_text().splitlines()
    assert table[0] == "paradigm,protocol,symbol_error_rate,speaker_consistency,step_count"
    assert len(table) == 7  # 3 paradigms x 2 protocols
    manifest = json.loads((out / MANIFEST_NAME).read_text())
    assert "timings.csv" in manifest["nondeterministic_outputs"]


def test_compare_unknown_paradigm(tmp_path, corpus_dir, stage1_dir):
    ckpt = stage1_dir / "checkpoint"
    code = run(
        ["compare", "--paradigms", "beam", "--ckpts", f"beam={ckpt}",
         "--heldout", corpus_dir / "heldout.jsonl", "--grammar", corpus_dir / "grammar.json",
         "--out", tmp_path / "cmp2"]
    )
    assert code == 3  # unknown paradigm is an input error from evaluation
    code = run(
        ["compare", "--paradigms", "ar", "--ckpts", "nar=x",
         "--heldout", corpus_dir / "heldout.jsonl", "--grammar", corpus_dir / "grammar.json",
         "--out", tmp_path / "cmp3"]
    )
    assert code == 2  # missing checkpoint for requested paradigm: usage error


def test_sweep_duration_csv(tmp_path, corpus_dir, stage1_dir):
    out = tmp_path / "sweep"
    code = run(
        ["sweep", "--param", "duration", "--grid", "0.7,1.0,1.3",
         "--ckpt1", stage1_dir / "checkpoint",
         "--heldout", corpus_dir / "heldout.jsonl", "--grammar", corpus_dir / "grammar.json",
         "--num-prompts", "3", "--steps2", "0", "--out", out]
    )
    assert code == 0
    rows = (out / "curve.csv").read_text().splitlines()
    assert rows[0].startswith("duration_multiplier")
    assert len(rows) == 4


def test_sweep_empty_grid(tmp_path, corpus_dir, stage1_dir):
    code = run(
        ["sweep", "--param", "duration", "--grid", "",
         "--ckpt1", stage1_dir / "checkpoint",
         "--heldout", corpus_dir / "heldout.jsonl", "--grammar", corpus_dir / "grammar.json",
         "--out", tmp_path / "sweep2"]
    )
    assert code == 2


def test_profile_csv(tmp_path):
    out = tmp_path / "prof"
    code = run(["profile", "--lengths", "40,80", "--latency-ms", "0", "--out", out])
    assert code == 0
    rows = (out / "profile.csv").read_text().splitlines()
    assert rows[0] == "step_count,wall_ms,T_ref,T_gen,paradigm"
    assert len(rows) == 7  # 2 lengths x 3 paradigms


def test_rerun_reproduces_gen_corpus(tmp_path, corpus_dir):
    code = run(["rerun", corpus_dir / MANIFEST_NAME, "--out-dir", tmp_path / "redo"])
    assert code == 0


def test_rerun_reproduces_train(tmp_path, corpus_dir):
    out = tmp_path / "t_src"
    assert run(
        SMALL_TRAIN
        + ["--corpus", corpus_dir / "train.jsonl", "--grammar", corpus_dir / "grammar.json",
           "--out", out, "--overfit", "8"]
    ) == 0
    assert run(["rerun", out / MANIFEST_NAME, "--out-dir", tmp_path / "t_redo"]) == 0


def test_rerun_reproduces_synth(tmp_path, corpus_dir, stage1_dir):
    out = tmp_path / "synth_src"
    assert run(
        ["synth", "--ckpt1", stage1_dir / "checkpoint", "--grammar", corpus_dir / "grammar.json",
         "--prompt-utt", f"{corpus_dir / 'heldout.jsonl'}:2", "--text", "3,1",
         "--duration", "estimate", "--steps2", "0", "--seed", "13", "--out", out]
    ) == 0
    assert run(["rerun", out / MANIFEST_NAME, "--out-dir", tmp_path / "synth_redo"]) == 0


def test_rerun_detects_tampering(tmp_path, corpus_dir):
    manifest = json.loads((corpus_dir / MANIFEST_NAME).read_text())
    manifest["outputs"]["train.jsonl"] = "0" * 64
    bad = tmp_path / "bad_manifest.json"
    bad.write_text(json.dumps(manifest))
    assert run(["rerun", bad, "--out-dir", tmp_path / "redo2"]) == 1


def test_train_config_file_overrides(tmp_path, corpus_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_steps": 12, "model": {"layers": 1, "d_model": 16, "d_ff": 32, "heads": 2}}))
    out = tmp_path / "cfgd"
    assert run(
        ["train", "--stage", "1", "--corpus", corpus_dir / "train.jsonl",
         "--grammar", corpus_dir / "grammar.json", "--out", out,
         "--config", cfg, "--max-steps", "500", "--batch-tokens", "512"]
    ) == 0
    curve = (out / "loss_curve.csv").read_text().splitlines()
    assert curve[-1].split(",")[0] == "11"  # config file wins over the flag
    manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert manifest["config"]["layers"] == 1
    assert manifest["extra"]["train_config"]["max_steps"] == 12


def test_sweep_plot_emits_image(tmp_path, corpus_dir, stage1_dir):
    pytest.importorskip("matplotlib")
    out = tmp_path / "sweepplot"
    code = run(
        ["sweep", "--param", "steps2", "--grid", "0,2",
         "--ckpt1", stage1_dir / "checkpoint", "--ckpt2", stage1_dir / "checkpoint",
         "--heldout", corpus_dir / "heldout.jsonl", "--grammar", corpus_dir / "grammar.json",
         "--num-prompts", "2", "--out", out, "--plot"]
    )
    assert code == 0
    assert (out / "curve.png").stat().st_size > 0
    manifest = json.loads((out / MANIFEST_NAME).read_text())
    assert "curve.png" in manifest["nondeterministic_outputs"]


def test_corrupt_checkpoint_exits_versioning(tmp_path, corpus_dir, stage1_dir):
    import shutil

    broken = tmp_path / "broken_ckpt"
    shutil.copytree(stage1_dir / "checkpoint", broken)
    (broken / "manifest.json").write_text("{")
    code = run(
        ["synth", "--ckpt1", broken, "--grammar", corpus_dir / "grammar.json",
         "--prompt-utt", f"{corpus_dir / 'heldout.jsonl'}:0", "--text", "1",
         "--out", tmp_path / "v", "--steps2", "0"]
    )
    assert code == 5


def test_bad_grammar_config_exits_6(tmp_path):
    code = run(SMALL_GEN[:3] + ["--expansion", "0,2", "--out-dir", tmp_path / "bad"])
    assert code == 6


def test_usage_errors_exit_2():
    assert main(["train", "--stage", "3"]) == 2  # bad choice
    assert main(["nonsense"]) == 2
