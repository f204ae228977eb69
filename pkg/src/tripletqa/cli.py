"""Command-line entry point wiring all modules together.

Subcommands: prepare-data, train, evaluate, analyze, generate, sweep.
Config values resolve as CLI flag > config file > built-in default, and the
source of every key is logged. Each command writes exactly one run manifest
next to its primary output. Exit codes: 0 success, 2 usage error, 3 missing
file, 1 anything else (with a machine-readable category on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis as analysis_mod
from . import corpus as corpus_mod
from .checkpoint import load_checkpoint, model_from_checkpoint
from .errors import TripletQAError
from .evaluator import EVAL_TASKS, evaluate
from .manifest import RunManifest
from .trainer import ALPHA_GRID, TrainConfig, sweep_weight_grid, train

EXIT_USAGE = 2
EXIT_IO = 3


# ---------------------------------------------------------------------------
# Config resolution


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, f"{key}."))
        else:
            out[key] = v
    return out


def _unflatten(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return out


_CLI_CONFIG_KEYS = {
    "seed": "seed",
    "lr": "lr",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "max_steps": "max_steps",
    "max_len": "max_len",
    "adaptation_mode": "adaptation_mode",
    "eaq_include_document": "eaq_include_document",
    "kl_direction": "kl_direction",
    "kl_stopgrad": "kl_teacher_stopgrad",
    "alpha_qae": "weights.alpha_qae",
    "alpha_qea": "weights.alpha_qea",
    "alpha_eaq": "weights.alpha_eaq",
    "alpha_kl": "weights.alpha_kl",
    "layers": "backbone.layers",
    "heads": "backbone.heads",
    "d_model": "backbone.d_model",
    "adapter_count": "backbone.adapter_count",
    "lora_rank": "backbone.lora_rank",
}

_CLI_FLAG_KEYS = {
    "no_evidence_generation": ("weights.use_qae", False),
    "no_question_restoration": ("weights.use_eaq", False),
    "no_kl": ("weights.use_kl", False),
}


def resolve_train_config(args) -> TrainConfig:
    """Merge defaults, config file, and CLI flags; log each key's source."""
    flat = _flatten(TrainConfig().to_dict())
    source = {k: "default" for k in flat}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            file_cfg = _flatten(json.load(f))
        unknown = [k for k in file_cfg if k not in flat]
        if unknown:
            raise TripletQAError(f"unknown config keys in {args.config}: {unknown}")
        for k, v in file_cfg.items():
            flat[k] = v
            source[k] = "file"
    for arg_name, key in _CLI_CONFIG_KEYS.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            flat[key] = value
            source[key] = "cli"
    for arg_name, (key, value) in _CLI_FLAG_KEYS.items():
        if getattr(args, arg_name, False):
            flat[key] = value
            source[key] = "cli"
    for key in sorted(flat):
        print(f"config: {key} = {flat[key]} ({source[key]})")
    return TrainConfig.from_dict(_unflatten(flat))


def _load_model(checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    model, tokenizer = model_from_checkpoint(ckpt)
    model.eval()
    meta = ckpt.meta
    train_cfg = meta.get("train_config") or {}
    settings = {
        "max_len": train_cfg.get("max_len", 512),
        "eaq_include_document": train_cfg.get("eaq_include_document", False),
        "instructions": dict(train_cfg["instructions"]) if train_cfg.get("instructions") else None,
        "config_hash": meta.get("config_hash"),
        "seed": train_cfg.get("seed"),
    }
    return model, tokenizer, settings


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare_data(args) -> int:
    loaders = {"multirc": corpus_mod.load_multirc, "qasper": corpus_mod.load_qasper}
    loader = loaders[args.format]
    kwargs = {"limit": args.limit}
    if args.format == "multirc":
        kwargs["join_answers"] = args.join_answers
    examples, report = loader(args.infile, **kwargs)
    corpus_mod.save_canonical(examples, args.out)
    summary = {"examples": len(examples), **report.summary()}
    if report.rejected:
        summary["rejections"] = [
            {"id": rid, "reason": reason} for rid, reason in report.rejected
        ]
    print(json.dumps(summary, indent=2, sort_keys=True))
    manifest = RunManifest("prepare-data", config={"format": args.format})
    manifest.add_input("data", args.infile)
    manifest.add_output("canonical", args.out)
    manifest.write(str(args.out) + ".manifest.json")
    return 0


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    corpus = corpus_mod.load_canonical(args.data)
    dev = corpus_mod.load_canonical(args.dev) if args.dev else None
    result = train(
        config,
        corpus,
        out_dir=args.out,
        dev_corpus=dev,
        resume_from=args.resume,
    )
    if result.dropped_examples:
        print(f"dropped {len(result.dropped_examples)} unrenderable examples")
    manifest = RunManifest("train", config=config.to_dict(), seed=config.seed)
    manifest.add_input("data", args.data)
    if args.dev:
        manifest.add_input("dev", args.dev)
    manifest.add_output("checkpoint", result.checkpoint_path)
    manifest.add_output("checkpoint_last", result.last_checkpoint_path)
    manifest.add_output("train_log", result.log_path)
    manifest.write(Path(args.out) / "manifest.json")
    if result.final_breakdown is not None:
        print(json.dumps({"final": result.final_breakdown.to_record()}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    model, tokenizer, settings = _load_model(args.checkpoint)
    corpus = corpus_mod.load_canonical(args.data)
    tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    report = evaluate(
        model,
        tokenizer,
        corpus,
        tasks=tasks,
        max_len=settings["max_len"],
        max_new=args.max_new,
        with_evidence=args.with_evidence,
        instructions=settings["instructions"],
        eaq_include_document=settings["eaq_include_document"],
        config_hash=settings["config_hash"],
    )
    report.write(args.out)
    if args.predictions:
        report.write_predictions(args.predictions)
    manifest = RunManifest(
        "evaluate", config={"tasks": list(tasks), "with_evidence": args.with_evidence},
        seed=settings["seed"],
    )
    manifest.add_input("checkpoint", args.checkpoint)
    manifest.add_input("data", args.data)
    manifest.add_output("report", args.out)
    if args.predictions:
        manifest.add_output("predictions", args.predictions)
    manifest.write(str(args.out) + ".manifest.json")
    summary = {k: v for k, v in report.to_dict().items() if k != "per_example"}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    model, tokenizer, settings = _load_model(args.checkpoint)
    corpus = corpus_mod.load_canonical(args.data)
    report = evaluate(
        model,
        tokenizer,
        corpus,
        tasks=(args.task,),
        max_len=settings["max_len"],
        max_new=args.max_new,
        instructions=settings["instructions"],
        eaq_include_document=settings["eaq_include_document"],
        config_hash=settings["config_hash"],
    )
    report.write_predictions(args.out)
    manifest = RunManifest("generate", config={"task": args.task}, seed=settings["seed"])
    manifest.add_input("checkpoint", args.checkpoint)
    manifest.add_input("data", args.data)
    manifest.add_output("predictions", args.out)
    manifest.write(str(args.out) + ".manifest.json")
    print(json.dumps({"predictions": len(report.predictions)}, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    manifest = RunManifest("analyze", config={"kind": args.kind})
    if args.kind in ("groups", "correlation"):
        if not args.report:
            raise TripletQAError(f"--report is required for --kind {args.kind}")
        records = analysis_mod.load_report_records(args.report)
        manifest.add_input("report", args.report)
        if args.kind == "groups":
            grouped = analysis_mod.grouped_f1(records, key=args.key, f1_field=args.f1_field)
            payload = grouped.to_dict()
            rows = [(g["mean_key"], g["mean_f1"]) for g in grouped.groups]
        else:
            corr = analysis_mod.correlation(records, bins=args.bins)
            payload = corr.to_dict()
            rows = [(b["qea"], b["qae"], b["eaq"]) for b in corr.bins]
        tsv = out.with_suffix(".tsv")
        analysis_mod.write_two_column(tsv, rows)
        manifest.add_output("table", tsv)
    else:
        if not (args.checkpoint and args.data):
            raise TripletQAError(
                f"--checkpoint and --data are required for --kind {args.kind}"
            )
        model, tokenizer, settings = _load_model(args.checkpoint)
        corpus = corpus_mod.load_canonical(args.data)
        manifest.add_input("checkpoint", args.checkpoint)
        manifest.add_input("data", args.data)
        if args.kind == "hallucination":
            probe = analysis_mod.hallucination_probe(
                model,
                tokenizer,
                corpus,
                max_len=settings["max_len"],
                max_new=args.max_new,
                instructions=settings["instructions"],
            )
            payload = probe.to_dict()
        else:
            stats = analysis_mod.attention_stats(
                model,
                tokenizer,
                corpus,
                max_len=settings["max_len"],
                instructions=settings["instructions"],
                eaq_include_document=settings["eaq_include_document"],
            )
            payload = stats.to_dict()
            tsv = out.with_suffix(".tsv")
            analysis_mod.write_two_column(
                tsv,
                [
                    (layer["layer"], layer["qea_to_document_per_token"], layer["qea_to_evidence_per_token"])
                    for layer in stats.layers
                ],
            )
            manifest.add_output("table", tsv)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    manifest.add_output("report", out)
    manifest.write(str(out) + ".manifest.json")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    values = tuple(float(v) for v in args.grid.split(","))
    combos = sweep_weight_grid(values)
    out_dir = Path(args.out)
    config_dir = out_dir / "configs"
    config_dir.mkdir(parents=True, exist_ok=True)
    base = TrainConfig()
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            base = TrainConfig.from_dict(json.load(f))
    index = []
    for i, weights in enumerate(combos):
        cfg_dict = base.to_dict()
        cfg_dict["weights"] = {**cfg_dict["weights"], **weights.to_dict()}
        cfg = TrainConfig.from_dict(cfg_dict)
        path = config_dir / f"sweep_{i:03d}.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        index.append(
            {
                "config": str(path),
                "hash": cfg.hash(),
                "alpha_qae": weights.alpha_qae,
                "alpha_qea": weights.alpha_qea,
                "alpha_eaq": weights.alpha_eaq,
            }
        )
    index_path = out_dir / "sweep_index.json"
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump({"grid": list(values), "configs": index}, f, indent=2, sort_keys=True)
        f.write("\n")
    if args.run:
        if not args.data:
            raise TripletQAError("--run requires --data")
        corpus = corpus_mod.load_canonical(args.data)
        for i, entry in enumerate(index):
            with open(entry["config"], "r", encoding="utf-8") as f:
                cfg = TrainConfig.from_dict(json.load(f))
            train(cfg, corpus, out_dir=out_dir / "runs" / f"{i:03d}")
    manifest = RunManifest("sweep", config={"grid": list(values), "run": bool(args.run)})
    if args.data:
        manifest.add_input("data", args.data)
    manifest.add_output("index", index_path)
    manifest.write(out_dir / "manifest.json")
    print(json.dumps({"configs": len(index)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tripletqa",
        description="Triplet instruction tuning for evidence-grounded generative QA",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="convert a native dataset to canonical records")
    p.add_argument("--format", required=True, choices=("multirc", "qasper"))
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--join-answers", action="store_true",
                   help="merge multiple gold answers into one joined reference")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train on a canonical corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--dev", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--adaptation-mode", choices=("adapters", "lora", "full"),
                   dest="adaptation_mode")
    p.add_argument("--alpha-qae", type=float, dest="alpha_qae")
    p.add_argument("--alpha-qea", type=float, dest="alpha_qea")
    p.add_argument("--alpha-eaq", type=float, dest="alpha_eaq")
    p.add_argument("--alpha-kl", type=float, dest="alpha_kl")
    p.add_argument("--no-evidence-generation", action="store_true",
                   dest="no_evidence_generation")
    p.add_argument("--no-question-restoration", action="store_true",
                   dest="no_question_restoration")
    p.add_argument("--no-kl", action="store_true", dest="no_kl")
    p.add_argument("--eaq-include-document", action="store_const", const=True,
                   default=None, dest="eaq_include_document")
    p.add_argument("--kl-direction", choices=("forward", "reverse", "symmetric"),
                   dest="kl_direction")
    p.add_argument("--kl-stopgrad", action="store_const", const=True, default=None,
                   dest="kl_stopgrad")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--adapter-count", type=int, dest="adapter_count")
    p.add_argument("--lora-rank", type=int, dest="lora_rank")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="generate and score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", default="qa",
                   help=f"comma-separated subset of {','.join(EVAL_TASKS)}")
    p.add_argument("--with-evidence", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--predictions", default=None)
    p.add_argument("--max-new", type=int, default=32, dest="max_new")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="write raw predictions for one task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", default="qa", choices=EVAL_TASKS)
    p.add_argument("--out", required=True)
    p.add_argument("--max-new", type=int, default=32, dest="max_new")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="grouping, correlation, and probes")
    p.add_argument("--kind", required=True,
                   choices=("groups", "correlation", "hallucination", "attention"))
    p.add_argument("--report", default=None, help="evaluation report JSON")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--key", default="doc_length",
                   choices=tuple(analysis_mod.GROUP_KEYS))
    p.add_argument("--f1-field", default="f1", dest="f1_field")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--max-new", type=int, default=32, dest="max_new")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="enumerate (and optionally run) the weight grid")
    p.add_argument("--grid", default=",".join(str(v) for v in ALPHA_GRID))
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="base config JSON")
    p.add_argument("--run", action="store_true")
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except FileNotFoundError as e:
        print(json.dumps({"error": "io", "message": str(e)}), file=sys.stderr)
        return EXIT_IO
    except TripletQAError as e:
        print(
            json.dumps({"error": e.category, "message": str(e)}), file=sys.stderr
        )
        return 1
    except ValueError as e:
        print(json.dumps({"error": "config", "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
