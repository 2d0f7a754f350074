"""Command-line entry point: ``univl gen-corpus | pretrain | finetune | eval``.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure
(NaN/inf loss), 4 I/O or file-format failure. Every successful command writes
one manifest JSON next to its main output (``<out>.manifest.json``).

``UNIVL_DESK_THREADS`` (default 1) caps BLAS worker threads; it only takes
effect when set before numpy is first imported, which the console script
guarantees.
"""

from __future__ import annotations

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ.get("UNIVL_DESK_THREADS", "1"))
os.environ.setdefault("OMP_NUM_THREADS", os.environ.get("UNIVL_DESK_THREADS", "1"))

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import subprocess  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402
from time import perf_counter  # noqa: E402
from typing import Dict, List, Optional, Sequence, Tuple  # noqa: E402

from . import downstream as ds  # noqa: E402
from . import model as mdl  # noqa: E402
from .config import ConfigError, build, read_file  # noqa: E402
from .data import CorpusSpec, FormatError, generate_corpus, read_corpus, write_corpus  # noqa: E402
from .objectives import NumericFailure  # noqa: E402
from .pretrain import ABLATIONS, TrainConfig, TrainingAborted, ablate, pretrain, resume_point  # noqa: E402

log = logging.getLogger("univl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CONFIG_SECTIONS = ("model.", "train.", "finetune.")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# flag registry: the parser is built from it and a test diffs it against --help

_SEED = ("--seed", dict(type=int, default=None, help="master seed for every random stream (overrides the config)"))
_CORPUS = ("--corpus", dict(required=True, help="corpus directory written by gen-corpus"))
_CONFIG = ("--config", dict(default=None, help="key = value run config (model.*, train.*, finetune.* keys)"))
_TASK = ("--task", dict(required=True, help="one of: " + ", ".join(ds.TASKS)))
_MANIFEST = ("--manifest", dict(default=None, help="manifest path (default: <output>.manifest.json)"))

FLAGS: Dict[str, List[Tuple[str, dict]]] = {
    "gen-corpus": [
        ("--spec", dict(default=None, help="corpus spec file (key = value); defaults apply when omitted")),
        ("--out", dict(required=True, help="output corpus directory")),
        _SEED,
        _MANIFEST,
    ],
    "pretrain": [
        _CONFIG,
        _CORPUS,
        ("--out", dict(required=True, help="output checkpoint path")),
        ("--stage", dict(choices=("1", "2", "all"), default="all", help="which pre-training stage(s) to run")),
        ("--init", dict(default=None, help="checkpoint to start or resume from")),
        ("--ledger", dict(default=None, help="per-epoch loss ledger (default: <out>.ledger.jsonl)")),
        _SEED,
        _MANIFEST,
    ]
    + [(f"--no-{name}", dict(action="store_true", help=f"ablation: switch off {name}")) for name in ABLATIONS],
    "finetune": [
        _TASK,
        _CONFIG,
        _CORPUS,
        ("--checkpoint", dict(required=True, help="pre-trained checkpoint")),
        ("--out", dict(required=True, help="output checkpoint path")),
        _SEED,
        _MANIFEST,
    ],
    "eval": [
        _TASK,
        _CONFIG,
        _CORPUS,
        ("--checkpoint", dict(required=True, help="checkpoint to evaluate")),
        ("--report", dict(required=True, help="output report (one JSON record per metric)")),
        ("--split", dict(choices=("train", "val"), default="val", help="corpus split to evaluate on")),
        ("--finetune", dict(action="store_true", help="fine-tune on the train split before evaluating")),
        _SEED,
        _MANIFEST,
    ],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors list valid tasks where relevant
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="univl", description="Video-language pre-training toy pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, flags in FLAGS.items():
        p = sub.add_parser(command, help=f"{command} command")
        for flag, kwargs in flags:
            p.add_argument(flag, **kwargs)
    return parser


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_hashes(root) -> Dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, command: str, config: Dict, seed: int, inputs: Dict[str, str], outputs: Dict[str, str], wall: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
        "inputs": inputs,
        "outputs": outputs,
        "wall_time": wall,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_run_config(path: Optional[str]):
    """``(model_entries, TrainConfig, FinetuneConfig)`` from an optional config file."""
    entries = read_file(path) if path else {}
    source = path or "<defaults>"
    for key, (_, line) in entries.items():
        if not key.startswith(CONFIG_SECTIONS):
            raise ConfigError(f"key {key!r} outside the sections {', '.join(s[:-1] for s in CONFIG_SECTIONS)}", line, source)
    model_entries = {k[len("model."):]: v for k, v in entries.items() if k.startswith("model.")}
    train = build(TrainConfig, entries, source, "train.")
    finetune = build(ds.FinetuneConfig, entries, source, "finetune.")
    return model_entries, train, finetune, source


def model_config_for(corpus, model_entries: Dict, source: str) -> mdl.ModelConfig:
    """Model config with corpus-derived sizes unless the config file pins them."""
    derived = {
        "vocab_size": len(corpus.vocab),
        "video_feature_dim": corpus.spec.feature_dim,
        "max_text_len": corpus.spec.max_text_len,
        "max_video_len": corpus.spec.max_video_len,
        "num_frame_labels": corpus.spec.num_concepts,
    }
    entries = {k: (str(v), 0) for k, v in derived.items()}
    entries.update(model_entries)
    try:
        return build(mdl.ModelConfig, entries, source)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), 0, source) from None


def _corpus_inputs(corpus_dir) -> Dict[str, str]:
    return {f"corpus/{k}": v for k, v in tree_hashes(corpus_dir).items()}


def _manifest_path(args, output) -> Path:
    return Path(args.manifest) if args.manifest else Path(str(output) + ".manifest.json")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    t0 = perf_counter()
    entries = read_file(args.spec) if args.spec else {}
    spec = build(CorpusSpec, entries, args.spec or "<defaults>")
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    corpus = generate_corpus(spec)
    out = Path(args.out)
    write_corpus(corpus, out)
    inputs = {"spec": sha256_file(args.spec)} if args.spec else {}
    write_manifest(_manifest_path(args, out), "gen-corpus", dataclasses.asdict(spec), spec.seed, inputs, tree_hashes(out), perf_counter() - t0)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    t0 = perf_counter()
    model_entries, train, _, source = load_run_config(args.config)
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    train = ablate(train, [name for name in ABLATIONS if getattr(args, f"no_{name}")])
    corpus = read_corpus(args.corpus)
    stages = {"1": (1,), "2": (2,), "all": (1, 2)}[args.stage]
    if stages == (1,) and not (train.stagedp and train.weight_joint != 0.0):
        raise UsageError("--stage 1 is empty when staged pre-training or the joint loss is switched off")
    inputs = _corpus_inputs(args.corpus)
    resume = None
    if args.init:
        params, meta, extra = mdl.load_checkpoint(args.init)
        resume = resume_point(meta, extra, train)
        inputs["init"] = sha256_file(args.init)
    else:
        params = mdl.ModelParameters.init(model_config_for(corpus, model_entries, source), train.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ledger = Path(args.ledger) if args.ledger else Path(str(out) + ".ledger.jsonl")
    for stale in (ledger, ledger.with_name(ledger.name + ".times")):
        if stale.exists():
            stale.unlink()
    meta = {"corpus_seed": corpus.spec.seed}
    try:
        pretrain(params, corpus.pairs("train"), train, stages, ledger, out, resume, meta)
    except TrainingAborted as exc:
        where = f"; last good checkpoint {exc.last_checkpoint}" if exc.last_checkpoint else ""
        print(f"univl: training aborted: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    if not out.exists():
        mdl.save_checkpoint(out, params, meta)
    outputs = {"checkpoint": sha256_file(out)}
    if ledger.exists():
        outputs["ledger"] = sha256_file(ledger)
    config = {"model": dataclasses.asdict(params.config), "train": dataclasses.asdict(train), "stage": args.stage}
    write_manifest(_manifest_path(args, out), "pretrain", config, train.seed, inputs, outputs, perf_counter() - t0)
    return EXIT_OK


def _finetune_config(args, finetune: ds.FinetuneConfig) -> ds.FinetuneConfig:
    return dataclasses.replace(finetune, seed=args.seed) if args.seed is not None else finetune


def cmd_finetune(args) -> int:
    t0 = perf_counter()
    task = ds.check_task(args.task)
    if task == "localization":
        raise UsageError("localization is zero-shot; it has no fine-tuning step")
    _, _, finetune, _ = load_run_config(args.config)
    finetune = _finetune_config(args, finetune)
    corpus = read_corpus(args.corpus)
    params, meta, _ = mdl.load_checkpoint(args.checkpoint)
    ds.finetune(task, params, corpus, finetune)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"corpus_seed": corpus.spec.seed, "finetuned": task, "base": sha256_file(args.checkpoint)}
    mdl.save_checkpoint(out, params, meta)
    inputs = _corpus_inputs(args.corpus)
    inputs["checkpoint"] = sha256_file(args.checkpoint)
    config = {"task": task, "finetune": dataclasses.asdict(finetune)}
    write_manifest(_manifest_path(args, out), "finetune", config, finetune.seed, inputs, {"checkpoint": sha256_file(out)}, perf_counter() - t0)
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = perf_counter()
    task = ds.check_task(args.task)
    if task == "localization" and args.finetune:
        raise UsageError("localization is evaluated zero-shot; --finetune is not allowed")
    _, _, finetune, _ = load_run_config(args.config)
    finetune = _finetune_config(args, finetune)
    corpus = read_corpus(args.corpus)
    params, _, _ = mdl.load_checkpoint(args.checkpoint)
    if args.finetune:
        ds.finetune(task, params, corpus, finetune)
    metrics = ds.evaluate(task, params, corpus, args.split, finetune.beam_size)
    records = ds.report_records(task, metrics, params.digest(), corpus.spec.seed)
    report = Path(args.report)
    ds.write_report(report, records)
    inputs = _corpus_inputs(args.corpus)
    inputs["checkpoint"] = sha256_file(args.checkpoint)
    config = {"task": task, "split": args.split, "finetune": dataclasses.asdict(finetune) if args.finetune else None}
    write_manifest(_manifest_path(args, report), "eval", config, finetune.seed, inputs, {"report": sha256_file(report)}, perf_counter() - t0)
    return EXIT_OK


COMMANDS = {"gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ds.TaskError) as exc:
        print(f"univl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, FloatingPointError) as exc:
        print(f"univl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, mdl.CheckpointError, FormatError) as exc:
        print(f"univl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
