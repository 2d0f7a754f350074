import json
import re
import subprocess
import sys

import pytest

from univl import cli
from univl import downstream as ds
from univl.model import load_checkpoint

from .conftest import TINY

CORPUS_SPEC = """\
num_videos = 2
val_videos = 1
clips_per_video = 3
concepts_per_clip = 1, 2
tokens_per_clip = 2, 4
frames_per_clip = 3, 6
num_concepts = 4
num_function_words = 3
feature_dim = 4
max_text_len = 8
max_video_len = 8
"""

MODEL_KEYS = ("hidden", "text_layers", "video_layers", "cross_layers", "decoder_layers", "heads", "ffn_size", "dropout", "max_gen_len")
RUN_CONFIG = "\n".join(
    [f"model.{k} = {TINY[k]}" for k in MODEL_KEYS if k in TINY]
    + [
        "train.stage1_epochs = 2",
        "train.stage2_epochs = 2",
        "train.stage1_lr = 1e-3",
        "train.stage2_lr = 1e-4",
        "train.batch_size = 3",
        "finetune.epochs = 1",
        "finetune.batch_size = 3",
        "finetune.beam_size = 2",
    ]
) + "\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.cfg").write_text(CORPUS_SPEC)
    (root / "run.cfg").write_text(RUN_CONFIG)
    assert cli.main(["gen-corpus", "--spec", str(root / "spec.cfg"), "--out", str(root / "corpus"), "--seed", "3"]) == 0
    return root


def run(root, *argv):
    return cli.main([str(a) for a in argv])


def pretrain_args(root, out, *extra):
    return ["pretrain", "--config", root / "run.cfg", "--corpus", root / "corpus", "--out", out, *extra]


# ---------------------------------------------------------------------------
# flag registry


def _help(*argv):
    out = subprocess.run([sys.executable, "-m", "univl", *argv, "--help"], capture_output=True, text=True, check=True)
    return out.stdout


def test_help_lists_exactly_the_registered_flags():
    top = _help()
    for command in cli.FLAGS:
        assert command in top
    for command, flags in cli.FLAGS.items():
        text = _help(command)
        shown = set(re.findall(r"(?<![\w-])(--[a-z][\w-]*)", text)) - {"--help"}
        assert shown == {flag for flag, _ in flags}, command


def test_every_ablation_has_a_flag():
    names = {flag for flag, _ in cli.FLAGS["pretrain"]}
    assert {f"--no-{a}" for a in ("joint", "align", "cmfm", "cmlm", "decoder", "enhancedv", "stagedp")} <= names


# ---------------------------------------------------------------------------
# exit codes


def test_usage_errors_exit_2(workspace, tmp_path, capsys):
    root = workspace
    assert cli.main([]) == 2
    assert cli.main(["pretrain", "--corpus", str(root / "corpus")]) == 2  # --out missing
    ckpt = tmp_path / "x.uvlc"
    assert run(root, *pretrain_args(root, ckpt, "--stage", "2")) == 0
    capsys.readouterr()
    assert run(root, "eval", "--task", "bogus", "--corpus", root / "corpus", "--checkpoint", ckpt, "--report", tmp_path / "r") == 2
    err = capsys.readouterr().err
    assert all(t in err for t in ds.TASKS)
    assert run(root, "eval", "--task", "localization", "--finetune", "--corpus", root / "corpus",
               "--checkpoint", ckpt, "--report", tmp_path / "r") == 2
    assert run(root, "finetune", "--task", "localization", "--corpus", root / "corpus",
               "--checkpoint", ckpt, "--out", tmp_path / "f.uvlc") == 2


def test_bad_config_reports_the_line(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("# comment\nnum_videos = 2\nclips_per_video = -1\n")
    assert cli.main(["gen-corpus", "--spec", str(bad), "--out", str(tmp_path / "c")]) == 2
    assert f"{bad}:3:" in capsys.readouterr().err
    bad.write_text("train.batch_size = 3\nbogus.key = 1\n")
    assert run(workspace, "pretrain", "--config", bad, "--corpus", workspace / "corpus", "--out", tmp_path / "y.uvlc") == 2
    assert f"{bad}:2:" in capsys.readouterr().err


def test_missing_corpus_exits_4(workspace, tmp_path):
    assert run(workspace, "pretrain", "--config", workspace / "run.cfg", "--corpus", tmp_path / "nowhere",
               "--out", tmp_path / "x.uvlc") == 4


def test_corrupt_checkpoint_exits_4(workspace, tmp_path):
    bad = tmp_path / "bad.uvlc"
    bad.write_bytes(b"not a checkpoint")
    assert run(workspace, "eval", "--task", "caption", "--corpus", workspace / "corpus", "--checkpoint", bad,
               "--report", tmp_path / "r") == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exits_3(workspace, tmp_path, capsys):
    cfg = tmp_path / "nan.cfg"
    text = RUN_CONFIG.replace("train.stage1_lr = 1e-3", "train.stage1_lr = 1e300").replace("train.stage2_lr = 1e-4", "train.stage2_lr = 1e299")
    cfg.write_text(text)
    assert run(workspace, "pretrain", "--config", cfg, "--corpus", workspace / "corpus", "--out", tmp_path / "n.uvlc") == 3
    assert "aborted" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# reproducibility


def test_gen_corpus_is_reproducible(workspace, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["gen-corpus", "--spec", str(workspace / "spec.cfg"), "--out", str(out), "--seed", "3"]) == 0
    assert cli.tree_hashes(out) == cli.tree_hashes(workspace / "corpus")
    manifest = json.loads((tmp_path / "again.manifest.json").read_text())
    assert manifest["outputs"] == cli.tree_hashes(out)
    assert manifest["seed"] == 3 and manifest["config"]["num_videos"] == 2


def test_stage_all_equals_stage1_then_stage2(workspace, tmp_path):
    root = workspace
    assert run(root, *pretrain_args(root, tmp_path / "all.uvlc")) == 0
    assert run(root, *pretrain_args(root, tmp_path / "s1.uvlc", "--stage", "1")) == 0
    assert run(root, *pretrain_args(root, tmp_path / "s2.uvlc", "--stage", "2", "--init", tmp_path / "s1.uvlc")) == 0
    a, _, _ = load_checkpoint(tmp_path / "all.uvlc")
    b, _, _ = load_checkpoint(tmp_path / "s2.uvlc")
    assert a.digest() == b.digest()
    ledger = lambda p: [json.loads(line) for line in p.read_text().splitlines()]  # noqa: E731
    assert ledger(tmp_path / "all.uvlc.ledger.jsonl") == ledger(tmp_path / "s1.uvlc.ledger.jsonl") + ledger(tmp_path / "s2.uvlc.ledger.jsonl")


def test_no_stagedp_and_no_decoder(workspace, tmp_path):
    root = workspace
    assert run(root, *pretrain_args(root, tmp_path / "a.uvlc", "--no-stagedp", "--no-decoder")) == 0
    rows = [json.loads(line) for line in (tmp_path / "a.uvlc.ledger.jsonl").read_text().splitlines()]
    assert {r["stage"] for r in rows} == {"stage2"}
    for r in rows:
        assert abs(r["total"] - sum(r[k] for k in ("joint", "cmlm", "cmfm", "align"))) < 1e-9
    assert run(root, *pretrain_args(root, tmp_path / "b.uvlc", "--no-stagedp", "--stage", "1")) == 2


def test_full_pipeline_is_byte_identical_and_manifested(workspace, tmp_path):
    root = workspace
    digests = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert run(root, *pretrain_args(root, d / "pre.uvlc")) == 0
        assert run(root, "finetune", "--task", "caption", "--config", root / "run.cfg", "--corpus", root / "corpus",
                   "--checkpoint", d / "pre.uvlc", "--out", d / "cap.uvlc") == 0
        assert run(root, "eval", "--task", "caption", "--config", root / "run.cfg", "--corpus", root / "corpus",
                   "--checkpoint", d / "cap.uvlc", "--report", d / "cap.jsonl") == 0
        assert run(root, "eval", "--task", "localization", "--corpus", root / "corpus",
                   "--checkpoint", d / "pre.uvlc", "--report", d / "loc.jsonl", "--split", "train") == 0
        files = ("pre.uvlc", "pre.uvlc.ledger.jsonl", "cap.uvlc", "cap.jsonl", "loc.jsonl")
        digests.append([cli.sha256_file(d / f) for f in files])
        for out in ("pre.uvlc", "cap.uvlc", "cap.jsonl", "loc.jsonl"):
            m = json.loads((d / f"{out}.manifest.json").read_text())
            assert set(m) == {"command", "config", "seed", "git_describe", "inputs", "outputs", "wall_time"}
            assert cli.sha256_file(d / out) in m["outputs"].values()
    assert digests[0] == digests[1]
    records = [json.loads(line) for line in (tmp_path / "a" / "cap.jsonl").read_text().splitlines()]
    assert [r["metric"] for r in records] == ["BLEU-3", "BLEU-4", "ROUGE-L", "METEOR", "CIDEr"]
    assert list(records[0]) == ["task", "metric", "value", "checkpoint_hash", "corpus_seed"]


def test_untrained_eval_smoke(workspace, tmp_path):
    root = workspace
    ckpt = tmp_path / "p.uvlc"
    assert run(root, *pretrain_args(root, ckpt, "--stage", "2")) == 0
    for task in ds.TASKS:
        assert run(root, "eval", "--task", task, "--config", root / "run.cfg", "--corpus", root / "corpus",
                   "--checkpoint", ckpt, "--report", tmp_path / f"{task}.jsonl") == 0
        assert (tmp_path / f"{task}.jsonl").read_text().strip()
