"""Command-line interface: synth-data, pretrain, meta-train, eval, compare.

Exit codes: 0 success, 1 runtime failure, 2 usage or missing-prerequisite
error. Failures print a single machine-parsable line to stderr:
``<error-class>: <human message>``. Every command persists the fully
resolved configuration next to its outputs so a run is reproducible from
that file and the seed alone.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

from . import config as config_mod
from .data import (
    load_descriptions,
    load_manifest,
    synth_generate,
    write_descriptions,
    write_manifest,
)
from .errors import OutputExistsError, PrerequisiteError, ProtoAlignError
from .evaluation import compare_conditions, evaluate_spec
from .training import (
    load_checkpoint,
    save_checkpoint,
    train_classification_stage,
    train_meta_stage,
)

logger = logging.getLogger(__name__)


def _resolve_config(args) -> dict:
    return config_mod.load_config(
        args.config, args.overrides, seed=args.seed, no_vs=args.no_vs
    )


def _guard_outputs(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise OutputExistsError(
            f"outputs already exist: {', '.join(existing)} (use --force to overwrite)"
        )
    for p in existing:
        Path(p).unlink()


def _min_examples_needed(cfg: dict) -> int:
    t, e = cfg["train"]["stage2"], cfg["eval"]
    return max(t["k_shot"] + t["q_per_class"], e["k_shot"] + e["q_per_class"])


def _load_data(cfg: dict, need_corpus: bool):
    min_needed = _min_examples_needed(cfg)
    if cfg["dataset"]["manifest"]:
        dataset = load_manifest(cfg["dataset"]["manifest"], min_examples_per_class=min_needed)
        corpus = None
        if cfg["dataset"]["descriptions"]:
            corpus = load_descriptions(cfg["dataset"]["descriptions"], dataset)
    else:
        dataset, corpus = synth_generate(config_mod.synth_config_from(cfg), cfg["seed"])
        dataset.require_min_examples(min_needed)
    if need_corpus and corpus is None:
        raise PrerequisiteError(
            "alignment needs class descriptions: set dataset.descriptions "
            "or use synthetic data"
        )
    return dataset, corpus


def cmd_synth_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise OutputExistsError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    dataset, corpus = synth_generate(config_mod.synth_config_from(cfg), cfg["seed"])
    manifest = write_manifest(dataset, out)
    descriptions = write_descriptions(corpus, out / "descriptions.txt")
    config_mod.dump_config(cfg, out / "resolved-config-synth-data.yaml")
    print(
        f"wrote {manifest} ({dataset.n_examples} examples, "
        f"{len(dataset.classes())} classes) and {descriptions}"
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "stage1.ckpt"
    metrics = out / "metrics-stage1.jsonl"
    _guard_outputs([ckpt, metrics], args.force)
    dataset, _ = _load_data(cfg, need_corpus=False)
    train_config = config_mod.train_config_from(cfg)
    started = time.time()
    state = train_classification_stage(dataset, train_config, metrics_path=metrics)
    save_checkpoint(state, ckpt)
    config_mod.dump_config(cfg, out / "resolved-config-pretrain.yaml")
    last = [m for m in state.metrics if m["epoch"] == state.epoch - 1]
    acc = sum(m["accuracy"] for m in last) / max(len(last), 1)
    print(
        f"stage-1 done in {time.time() - started:.1f}s: "
        f"{state.epoch} epochs, train accuracy {acc:.3f}, checkpoint {ckpt}"
    )
    return 0


def cmd_meta_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stage1_path = cfg["train"]["stage1_checkpoint"] or out / "stage1.ckpt"
    if not Path(stage1_path).exists():
        raise PrerequisiteError(
            f"stage-1 checkpoint not found at {stage1_path}; run pretrain first "
            "or set train.stage1_checkpoint"
        )
    ckpt = out / "stage2.ckpt"
    metrics = out / "metrics-stage2.jsonl"
    _guard_outputs([ckpt, metrics], args.force)
    train_config = config_mod.train_config_from(cfg)
    dataset, corpus = _load_data(cfg, need_corpus=train_config.stage2.use_vs_alignment)
    state = load_checkpoint(stage1_path)
    started = time.time()
    state = train_meta_stage(state, dataset, corpus, train_config, metrics_path=metrics)
    save_checkpoint(state, ckpt)
    config_mod.dump_config(cfg, out / "resolved-config-meta-train.yaml")
    mode = "with" if train_config.stage2.use_vs_alignment else "without"
    print(
        f"stage-2 done in {time.time() - started:.1f}s ({mode} alignment): "
        f"{state.epoch} epochs, {state.episodes_drawn} episodes, checkpoint {ckpt}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = cfg["eval"]["checkpoint"] or out / "stage2.ckpt"
    if not Path(ckpt).exists():
        raise PrerequisiteError(
            f"checkpoint not found at {ckpt}; run meta-train first or set eval.checkpoint"
        )
    report_json = out / "eval-report.json"
    report_txt = out / "eval-report.txt"
    _guard_outputs([report_json, report_txt], args.force)
    dataset, _ = _load_data(cfg, need_corpus=False)
    state = load_checkpoint(ckpt)
    report = evaluate_spec(state, dataset, config_mod.eval_spec_from(cfg))
    report_json.write_text(report.to_json() + "\n")
    report_txt.write_text(report.summary() + "\n")
    config_mod.dump_config(cfg, out / "resolved-config-eval.yaml")
    print(report.summary())
    return 0


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_txt = out / "comparison.txt"
    table_records = out / "comparison-records.jsonl"
    _guard_outputs([table_txt, table_records], args.force)

    conditions = []
    for entry in cfg["compare"]["conditions"]:
        if "label" not in entry:
            raise PrerequisiteError(f"compare condition without a label: {entry}")
        per_condition = copy.deepcopy(cfg)
        for key, value in (entry.get("overrides") or {}).items():
            config_mod.set_dotted(per_condition, key, value)
        conditions.append((entry["label"], config_mod.train_config_from(per_condition)))

    need_corpus = any(tc.stage2.use_vs_alignment for _, tc in conditions)
    dataset, corpus = _load_data(cfg, need_corpus=need_corpus)
    started = time.time()
    table = compare_conditions(
        conditions, dataset, corpus, config_mod.eval_spec_from(cfg), metrics_dir=out
    )
    rendered = table.render()
    table_txt.write_text(rendered + "\n")
    with open(table_records, "w") as f:
        for record in table.records():
            f.write(json.dumps(record, sort_keys=True) + "\n")
    config_mod.dump_config(cfg, out / "resolved-config-compare.yaml")
    print(rendered)
    print(f"\ncompared {len(conditions)} conditions in {time.time() - started:.1f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoalign",
        description=(
            "Episodic few-shot image classification with an auxiliary "
            "contrastive loss that aligns visual and semantic class prototypes."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth-data": (cmd_synth_data, "generate a synthetic dataset + descriptions"),
        "pretrain": (cmd_pretrain, "stage 1: supervised pretraining on base classes"),
        "meta-train": (cmd_meta_train, "stage 2: episodic meta-learning"),
        "eval": (cmd_eval, "episodic evaluation of a trained checkpoint"),
        "compare": (cmd_compare, "train and evaluate conditions on paired episodes"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument(
            "--no-vs", action="store_true", dest="no_vs",
            help="force use_vs_alignment=false (ablation switch)",
        )
        p.add_argument(
            "overrides", nargs="*", metavar="KEY=VALUE",
            help="dotted-key config overrides, e.g. train.stage2.objective.lambda_vs=2.5",
        )
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ProtoAlignError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # contract: one parseable line, nonzero exit
        logger.debug("unexpected failure", exc_info=True)
        print(f"internal-error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
