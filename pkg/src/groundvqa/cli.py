"""Command line entry point: ``groundvqa <command> [flags]``.

Commands chain through files on disk::

    synth   -> <out>/train, <out>/test          (synthetic corpus)
    align   -> <out>/model.npz                  (decoder warm start + connector alignment)
    pseudo  -> <out>/labels.jsonl               (unfiltered pseudo labels)
    ground  -> <out>/model.npz
    consist -> <out>/labels.checked.jsonl, <out>/model.npz
    eval    -> <out>/report.json, <out>/report.txt (and predictions.jsonl with --model)
    report  -> side-by-side table of several report.json files

Every command writes ``run.json`` into its output directory. Re-running a
command whose ``run.json`` records the same configuration hash, and whose
outputs are still intact, does nothing.

Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import traceback
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .core import DomainError
from .data import ManifestError
from .grounding_format import REPRESENTATIONS, PromptStyle

log = logging.getLogger("groundvqa")

CONNECTOR_MODES = ("multi", "dense_only", "sparse_only")
RUN_FILE = "run.json"


class UsageError(Exception):
    """Bad flags, bad config file or bad inputs; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------- arguments

def _frames(text: str) -> tuple[int, int]:
    try:
        dense, sparse = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected DENSE,SPARSE such as 16,4") from None
    if dense < 1 or sparse < 1:
        raise argparse.ArgumentTypeError("frame counts must be positive")
    return dense, sparse


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; its values override flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_ablation(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("ablations (fixed at align time, inherited afterwards)")
    g.add_argument("--frames", type=_frames, help="dense,sparse frame counts (default 16,4)")
    g.add_argument("--representation", choices=REPRESENTATIONS)
    g.add_argument("--no-template", dest="template", action="store_false", default=None,
                   help="bare '<video> question' prompts without the chat template")
    g.add_argument("--connector", choices=CONNECTOR_MODES)
    g.add_argument("--frame-indices", dest="frame_indices", action="store_true", default=None,
                   help="write sampled frame indices into the prompt")
    g.add_argument("--tokens-per-branch", type=int)


def _add_judge(p: argparse.ArgumentParser) -> None:
    p.add_argument("--judge", choices=("lexical", "remote_chat"), default="lexical",
                   help="remote_chat reads JUDGE_API_KEY, JUDGE_ENDPOINT and JUDGE_MODEL")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groundvqa", description="Weakly supervised grounded video QA.")
    parser.add_argument("--version", action="version", version=f"groundvqa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus with planted events")
    _add_common(p)
    p.add_argument("--n-videos", type=int, default=50)
    p.add_argument("--n-test-videos", type=int, default=20)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--noise-std", type=float, default=0.5)

    p = sub.add_parser("align", help="warm-start the decoder and align the connector")
    _add_common(p)
    _add_ablation(p)
    p.add_argument("--data", required=True, help="training manifest directory")
    p.add_argument("--warmup-steps", type=int, default=500)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("pseudo", help="caption random windows into pseudo labels")
    _add_common(p)
    _add_ablation(p)
    _add_judge(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--segments-per-video", type=int, default=16)

    for name, text in (("ground", "train on unfiltered pseudo labels"),
                       ("consist", "filter pseudo labels and train on the accepted ones")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        _add_ablation(p)
        p.add_argument("--model", required=True)
        p.add_argument("--labels", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--epochs", type=int)
        if name == "consist":
            _add_judge(p)
            p.add_argument("--no-mix-qa", dest="mix_qa", action="store_false", default=True)

    p = sub.add_parser("eval", help="score predictions (or a model) on a test manifest")
    _add_common(p)
    _add_ablation(p)
    _add_judge(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preds", help="line-delimited JSON predictions")
    src.add_argument("--model", help="checkpoint to run first")
    p.add_argument("--data", required=True)

    p = sub.add_parser("report", help="compare report.json files")
    _add_common(p)
    p.add_argument("reports", nargs="+")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    if not args.config:
        return args
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string("[run]\n" + path.read_text(encoding="utf-8"))
    except configparser.Error as e:
        raise UsageError(f"{path}: {e}") from None
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions}
    for key, raw in cp["run"].items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            raise UsageError(f"{path}: unknown key {key!r}")
        setattr(args, dest, _convert(action, raw, key))
    return args


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[command]
    raise AssertionError("no subcommands")


def _bool(raw: str, key: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"config key {key!r} expects true or false, got {raw!r}")


def _convert(action: argparse.Action, raw: str, key: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return _bool(raw, key)
    if action.nargs in ("+", "*"):
        return raw.split()
    value = raw.strip()
    if action.type is not None:
        try:
            value = action.type(value)
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"config key {key!r}: {e}") from None
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"config key {key!r} must be one of {sorted(action.choices)}")
    return value


# ---------------------------------------------------------------- run bookkeeping

def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(path: Path) -> str:
    """Content hash of a file, or of every file below a directory (names included)."""
    path = Path(path)
    if path.is_file():
        return file_hash(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != RUN_FILE):
        h.update(f.relative_to(path).as_posix().encode("utf-8") + b"\0")
        h.update(file_hash(f).encode("ascii"))
    return h.hexdigest()


def _versions() -> dict:
    import numpy
    import torch

    from .data import MANIFEST_SCHEMA, MANIFEST_VERSION
    from .model.lm import CHECKPOINT_FORMAT, CHECKPOINT_VERSION
    from .weaksup import PSEUDO_LABEL_SCHEMA

    return {
        "groundvqa": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "torch": torch.__version__,
        "manifest": f"{MANIFEST_SCHEMA}/{MANIFEST_VERSION}",
        "checkpoint": f"{CHECKPOINT_FORMAT}/{CHECKPOINT_VERSION}",
        "pseudo_label": PSEUDO_LABEL_SCHEMA,
    }


_NOT_CONFIG = {"config", "out", "verbose", "func"}


def run_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG}
    return json.loads(json.dumps(cfg, default=list))


def _inputs(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for key in ("data", "model", "labels", "preds"):
        value = getattr(args, key, None)
        if value:
            p = Path(value)
            if not p.exists():
                raise UsageError(f"--{key} {p} does not exist")
            out[key] = tree_hash(p)
    for i, r in enumerate(getattr(args, "reports", None) or []):
        if not Path(r).is_file():
            raise UsageError(f"report {r} does not exist")
        out[f"report{i}"] = file_hash(Path(r))
    return out


def config_hash(config: dict, inputs: dict) -> str:
    blob = json.dumps({"config": config, "inputs": inputs}, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _up_to_date(out: Path, digest: str) -> bool:
    run = out / RUN_FILE
    if not run.is_file():
        return False
    try:
        manifest = json.loads(run.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    if manifest.get("config_hash") != digest:
        return False
    outputs = manifest.get("outputs", {})
    return all((out / name).exists() and tree_hash(out / name) == h for name, h in outputs.items())


class _Staging:
    """Collect outputs in a hidden sibling directory, then swap it into place."""

    def __init__(self, out: Path):
        self.out = out
        out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))

    def commit(self, manifest: dict) -> None:
        manifest["outputs"] = {p.name: tree_hash(p) for p in sorted(self.dir.iterdir())}
        (self.dir / RUN_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        old = None
        if self.out.exists():
            old = self.out.with_name(f".{self.out.name}-old-{os.getpid()}")
            os.replace(self.out, old)
        os.replace(self.dir, self.out)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


# ---------------------------------------------------------------- shared helpers

def _load_data(path: str):
    from .data import load_manifest

    return load_manifest(path)


def _load_model(path: str):
    from .model import load_checkpoint

    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None


def _style_of(state, args: argparse.Namespace) -> PromptStyle:
    """Prompt style recorded in the checkpoint; explicit flags must agree with it."""
    meta = state.meta.get("style", {})
    style = PromptStyle(meta.get("representation", "0-100"), meta.get("use_template", True))
    if args.representation is not None and args.representation != style.representation:
        raise UsageError(f"checkpoint was trained with representation {style.representation}, "
                         f"not {args.representation}")
    if args.template is not None and args.template != style.use_template:
        raise UsageError("checkpoint was trained with the opposite --no-template setting")
    cc = state.cfg.connector
    fixed = {"connector": cc.mode, "frames": (cc.dense_frames, cc.sparse_frames),
             "frame_indices": state.cfg.frame_indices_in_prompt,
             "tokens_per_branch": cc.output_tokens_per_branch}
    for key, value in fixed.items():
        given = getattr(args, key, None)
        if isinstance(given, list):
            given = tuple(given)
        if given is not None and given != value:
            raise UsageError(f"--{key.replace('_', '-')} conflicts with the checkpoint ({value})")
    return style


def _judge(args: argparse.Namespace):
    from .judge import JudgeConfig, make_judge

    if args.judge == "lexical":
        return make_judge("lexical")
    cfg = JudgeConfig.from_env(backend="remote_chat", seed=args.seed)
    if not os.environ.get(cfg.api_key_env):
        raise UsageError(f"the remote_chat judge needs {cfg.api_key_env} in the environment")
    return make_judge(cfg)


def _stage_cfg(stage: str, args: argparse.Namespace):
    from .training import StageConfig

    return StageConfig.desk(stage, args.epochs, args.seed)


def _write_logs(logs, directory: Path) -> None:
    for lg in logs:
        lg.write(directory / "train_log.jsonl")


# ---------------------------------------------------------------- commands

def cmd_synth(args, stage: _Staging) -> dict:
    from .data import SyntheticSpec, generate_synthetic, save_manifest

    try:
        spec = SyntheticSpec(n_videos=args.n_videos, n_test_videos=args.n_test_videos,
                             feature_dim=args.feature_dim, noise_std=args.noise_std, seed=args.seed)
    except DomainError as e:
        raise UsageError(str(e)) from None
    train, test = generate_synthetic(spec)
    save_manifest(train, stage.dir / "train")
    save_manifest(test, stage.dir / "test")
    return {"corpus_hash": tree_hash(stage.dir)}


def cmd_align(args, stage: _Staging) -> dict:
    from .data import corpus_texts
    from .model import Tokenizer, new_state, save_checkpoint
    from .training import PipelineConfig, pretrain_decoder, run_align

    train = _load_data(args.data)
    if not train.captions:
        raise UsageError(f"{args.data} has no captions to align on")
    dense, sparse = args.frames or (16, 4)
    style = PromptStyle(args.representation or "0-100", True if args.template is None else args.template)
    pc = PipelineConfig(seed=args.seed, connector_mode=args.connector or "multi", dense_frames=dense,
                        sparse_frames=sparse, output_tokens_per_branch=args.tokens_per_branch or 8,
                        frame_indices_in_prompt=bool(args.frame_indices), style=style)
    feature_dim = next(iter(train.videos.values())).feature_dim
    state = new_state(pc.model_config(feature_dim), Tokenizer.build(corpus_texts([train])), seed=args.seed)
    state.meta["style"] = {"representation": style.representation, "use_template": style.use_template}
    logs = [pretrain_decoder(state, train, steps=args.warmup_steps, seed=args.seed, style=style)]
    state, lg = run_align(state, train, _stage_cfg("align", args), style)
    logs.append(lg)
    save_checkpoint(state, stage.dir / "model.npz")
    _write_logs(logs, stage.dir)
    return {"final_loss": lg.losses[-1] if lg.losses else None}


def cmd_pseudo(args, stage: _Staging) -> dict:
    from .weaksup import SegmentSamplingPolicy, generate_pseudo_labels, write_labels

    state = _load_model(args.model)
    style = _style_of(state, args)
    train = _load_data(args.data)
    policy = SegmentSamplingPolicy(args.segments_per_video, seed=args.seed)
    labels = generate_pseudo_labels(state, train.videos, train.items, policy, _judge(args), style)
    write_labels(labels, stage.dir / "labels.jsonl")
    return {"n_labels": len(labels), "n_matched": sum(lab.gt_answer is not None for lab in labels)}


def _read_labels(path: str):
    from .weaksup import read_labels

    return read_labels(path)


def cmd_ground(args, stage: _Staging) -> dict:
    from .model import save_checkpoint
    from .training import run_ground

    state = _load_model(args.model)
    style = _style_of(state, args)
    train = _load_data(args.data)
    state, lg = run_ground(state, _read_labels(args.labels), train.videos, _stage_cfg("ground", args), style)
    save_checkpoint(state, stage.dir / "model.npz")
    _write_logs([lg], stage.dir)
    return {"final_loss": lg.losses[-1] if lg.losses else None}


def cmd_consist(args, stage: _Staging) -> dict:
    from .model import save_checkpoint
    from .training import run_consist
    from .weaksup import check_consistency, write_labels

    state = _load_model(args.model)
    style = _style_of(state, args)
    train = _load_data(args.data)
    checked = check_consistency(state, _read_labels(args.labels), train.videos, _judge(args), style)
    write_labels(checked, stage.dir / "labels.checked.jsonl")
    accepted = [lab for lab in checked if lab.accepted]
    state, lg = run_consist(state, accepted, train, _stage_cfg("consist", args), mix_qa=args.mix_qa, style=style)
    save_checkpoint(state, stage.dir / "model.npz")
    _write_logs([lg], stage.dir)
    return {"n_checked": len(checked), "n_accepted": len(accepted)}


def cmd_eval(args, stage: _Staging) -> dict:
    from .inference import predict
    from .metrics import evaluate, read_predictions, write_predictions

    test = _load_data(args.data)
    if args.model:
        state = _load_model(args.model)
        preds = predict(state, test.items, test.videos, style=_style_of(state, args))
        write_predictions(preds, stage.dir / "predictions.jsonl")
    else:
        preds = read_predictions(args.preds)
    report = evaluate(preds, test.items, _judge(args))
    (stage.dir / "report.json").write_text(report.dumps() + "\n", encoding="utf-8")
    (stage.dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return {"mIoU": report.mIoU, "acc_QA": report.acc_QA}


_REPORT_KEYS = ("n_items", "mIoU", "mIoP", "IoU_at_05", "IoP_at_05", "acc_QA", "acc_GQA", "open_acc_GQA",
                "mIoU.short", "mIoU.medium", "mIoU.long")


def format_comparison(names: Sequence[str], reports: Sequence[dict]) -> str:
    """Plain-text table: one row per metric, one column per report."""
    from .metrics import LENGTH_BUCKETS

    cols = []
    for r in reports:
        col = {"n_items": str(r["n_items"])}
        for k in _REPORT_KEYS[1:8]:
            col[k] = f"{100 * r[k]:.2f}"
        for b in LENGTH_BUCKETS:
            v = r.get("by_length_bucket", {}).get(b)
            col[f"mIoU.{b}"] = "nan" if v is None else f"{100 * v:.2f}"
        cols.append(col)
    widths = [max(len(n), 8) for n in names]
    lines = ["metric".ljust(14) + "  ".join(n.rjust(w) for n, w in zip(names, widths))]
    for k in _REPORT_KEYS:
        lines.append(k.ljust(14) + "  ".join(c[k].rjust(w) for c, w in zip(cols, widths)))
    return "\n".join(lines) + "\n"


def cmd_report(args, stage: _Staging) -> dict:
    reports, names = [], []
    for path in args.reports:
        try:
            reports.append(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: not JSON ({e.msg})") from None
        names.append(Path(path).parent.name or Path(path).stem)
    try:
        text = format_comparison(names, reports)
    except KeyError as e:
        raise UsageError(f"report lacks key {e}") from None
    (stage.dir / "comparison.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return {}


COMMANDS = {
    "synth": cmd_synth,
    "align": cmd_align,
    "pseudo": cmd_pseudo,
    "ground": cmd_ground,
    "consist": cmd_consist,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _default_out(args) -> Optional[str]:
    if args.out:
        return args.out
    if args.command == "eval" and args.preds:
        return str(Path(args.preds).parent / "eval")
    if args.command == "report":
        return str(Path(args.reports[0]).parent / "comparison")
    return None


def run(args: argparse.Namespace) -> int:
    out = _default_out(args)
    if out is None:
        raise UsageError(f"{args.command} needs --out")
    out = Path(out)
    config = run_config(args)
    inputs = _inputs(args)
    digest = config_hash(config, inputs)
    if _up_to_date(out, digest):
        print(f"{args.command}: {out} is up to date (config {digest[:12]}); nothing to do", file=sys.stderr)
        return 0
    stage = _Staging(out)
    try:
        summary = COMMANDS[args.command](args, stage)
        stage.commit({
            "command": args.command,
            "config": config,
            "config_hash": digest,
            "seed": args.seed,
            "inputs": inputs,
            "versions": _versions(),
            "summary": summary,
        })
    except BaseException:
        stage.abort()
        raise
    log.info("%s: wrote %s", args.command, out)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return run(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (DomainError, ManifestError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
