"""Command-line pipeline: one subcommand per phase, no hidden chaining.

Every stage reads and writes the JSONL dataset format, so each step is
independently cacheable and debuggable. The toy vocabulary is a pure function
of the difficulty preset; pass the same --difficulty to every stage of one
pipeline (checkpoints carry the vocab size and loading validates it).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import collection, engine, evaluation, judge as judge_mod, scales as scales_mod
from . import trainer as trainer_mod
from .corpus import build_vocab, generate_synthetic, load_jsonl, save_jsonl, subset
from .generation import DecodeConfig, ModelGenerator, OracleTeacher
from .instrumentation import Counters
from .models.transformer import TinyTransformer, TransformerConfig
from .prompts import get_templates
from .saliency import NlftConfig, allocate_correct, allocate_incorrect
from .trainer import TrainConfig

_CONFIG_FLAGS = {
    # flag destination -> TrainConfig field
    "algo": "algorithm",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "seed": "seed",
    "data_mode": "data_mode",
    "recollect_every": "recollect_every",
    "template_version": "template_version",
    "eval_every": "eval_every",
    "checkpoint_every": "checkpoint_every",
    "run_name": "run_name",
}


def _load_dataset(path: str):
    return load_jsonl(path, provenance={"source": str(path), "split": str(path)})


def _new_model(vocab, seed: int, context_window: int) -> TinyTransformer:
    return TinyTransformer(
        TransformerConfig(
            vocab_size=len(vocab), context_window=context_window, seed=seed
        )
    )


def _load_or_new_model(args, vocab):
    if getattr(args, "model", None):
        return engine.load_params(args.model, expected_vocab_size=len(vocab))
    return _new_model(vocab, getattr(args, "seed", 0), args.context_window)


def build_train_config(
    config_path: str | None, flags: dict
) -> tuple[TrainConfig, dict]:
    """Merge defaults, config file, and flag overrides; track provenance."""
    values: dict = {}
    provenance: dict = {}
    if config_path:
        file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        nlft_values = file_values.pop("nlft", None)
        gen_values = file_values.pop("gen_decode", None)
        eval_values = file_values.pop("eval_decode", None)
        for key, value in file_values.items():
            values[key] = value
            provenance[key] = "file"
        if nlft_values is not None:
            values["nlft"] = NlftConfig(**nlft_values)
            provenance["nlft"] = "file"
        if gen_values is not None:
            values["gen_decode"] = DecodeConfig(**gen_values)
            provenance["gen_decode"] = "file"
        if eval_values is not None:
            values["eval_decode"] = DecodeConfig(**eval_values)
            provenance["eval_decode"] = "file"
    for flag, field_name in _CONFIG_FLAGS.items():
        value = flags.get(flag)
        if value is not None:
            values[field_name] = value
            provenance[field_name] = "flag"
    config = TrainConfig(**values)
    for field_name in config.to_dict():
        provenance.setdefault(field_name, "default")
    return config, provenance


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    dataset = generate_synthetic(args.seed, args.count, args.difficulty)
    if args.subset:
        dataset = subset(dataset, args.subset, args.seed)
    save_jsonl(dataset, args.out)
    print(f"wrote {len(dataset)} examples to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    vocab = build_vocab(args.difficulty)
    dataset = _load_dataset(args.data)
    model = _new_model(vocab, args.seed, args.context_window)
    conditions = ("base", "standard", "judge") if args.judge_drill else ("base", "standard")
    trainer_mod.pretrain_base(
        model, dataset, vocab,
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, seed=args.seed,
        conditions=conditions,
        template_version=args.template_version,
    )
    engine.save_params(model, args.out)
    print(f"wrote pretrained base checkpoint to {args.out}")
    return 0


def cmd_gen_outputs(args) -> int:
    vocab = build_vocab(args.difficulty)
    dataset = _load_dataset(args.data)
    trainee = _load_or_new_model(args, vocab)
    teacher = None
    if args.mode == "teaching":
        teacher = (
            OracleTeacher()
            if args.teacher == "oracle"
            else ModelGenerator(
                engine.load_params(args.teacher, expected_vocab_size=len(vocab)),
                vocab,
                args.template_version,
            )
        )
    decode = DecodeConfig(
        temperature=args.temperature, max_tokens=args.max_tokens, seed=args.seed
    )
    updated = trainer_mod.generate_outputs(
        args.mode.replace("-", "_"), teacher, trainee, dataset, decode,
        vocab=vocab, template_version=args.template_version,
    )
    save_jsonl(updated, args.out)
    n_correct = sum(1 for e in updated if e.is_correct)
    print(f"wrote {len(updated)} outputs ({n_correct} correct) to {args.out}")
    return 0


def cmd_judge(args) -> int:
    dataset = _load_dataset(args.data)
    cache = judge_mod.JudgmentCache(args.cache_dir) if args.cache_dir else None
    if args.judge == "rule":
        judge_fn = judge_mod.rule_judge
        version = judge_mod.RULE_JUDGE_VERSION
    else:
        client = judge_mod.JudgeClientConfig(
            endpoint=args.endpoint,
            model=args.judge_model,
            cache_dir=args.cache_dir,
            max_concurrency=args.max_concurrency,
            template_version=args.template_version,
        )
        judge_fn = lambda example: judge_mod.remote_judge(client, example)  # noqa: E731
        version = client.judge_version
    updated = judge_mod.judge_dataset(
        dataset, judge_fn, cache=cache, judge_version=version,
        max_concurrency=args.max_concurrency,
    )
    save_jsonl(updated, args.out)
    n_judged = sum(1 for e in updated if e.judgment is not None)
    print(f"wrote {len(updated)} examples ({n_judged} judged) to {args.out}")
    return 0


def cmd_collect(args) -> int:
    vocab = build_vocab(args.difficulty)
    dataset = _load_dataset(args.data)
    model = engine.load_params(args.model, expected_vocab_size=len(vocab))
    counter = Counters()
    tables = collection.collect_batch(
        model, dataset, get_templates(args.template_version), vocab,
        eps=args.eps, parallelism=args.parallelism, counter=counter,
    )
    collection.save_tables(tables, args.out)
    forwards = counter.snapshot()["forwards"]["collection"]
    print(f"wrote {len(tables)} tables to {args.out} ({forwards} forward passes)")
    return 0


def cmd_train(args) -> int:
    flags = {name: getattr(args, name, None) for name in _CONFIG_FLAGS}
    config, provenance = build_train_config(args.config, flags)
    vocab = build_vocab(args.difficulty)
    dataset = _load_dataset(args.data)
    model = _load_or_new_model(args, vocab)
    eval_dataset = _load_dataset(args.eval_data) if args.eval_data else dataset
    teacher = OracleTeacher() if args.teacher == "oracle" else None
    if args.teacher and args.teacher != "oracle":
        teacher = ModelGenerator(
            engine.load_params(args.teacher, expected_vocab_size=len(vocab)),
            vocab,
            config.template_version,
        )
    _, manifest = trainer_mod.train(
        config, dataset, model, vocab,
        run_dir=args.out_dir,
        teacher=teacher,
        eval_dataset=eval_dataset,
        config_provenance=provenance,
    )
    final_row = manifest.epoch_rows[-1]
    print(
        f"run {manifest.run_name}: {config.epochs} epochs, "
        f"final loss {final_row['loss']:.6g}, "
        f"final accuracy {final_row['accuracy']}, artifacts in {args.out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    vocab = build_vocab(args.difficulty)
    dataset = _load_dataset(args.data)
    model = engine.load_params(args.model, expected_vocab_size=len(vocab))
    decode = DecodeConfig(
        temperature=args.temperature, max_tokens=args.max_tokens, seed=args.seed
    )
    result = evaluation.evaluate(
        ModelGenerator(model, vocab, args.template_version), dataset, decode
    )
    print(f"accuracy {result.accuracy:.4f} on {len(result.records)} examples")
    if args.out:
        payload = {
            "split_id": result.split_id,
            "accuracy": result.accuracy,
            "decode": {
                "temperature": decode.temperature,
                "max_tokens": decode.max_tokens,
                "seed": decode.seed,
            },
            "records": list(result.records),
        }
        Path(args.out).write_text(json.dumps(payload, indent=2), encoding="utf-8")
        print(f"wrote per-example records to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = trainer_mod.RunManifest.load(run_dir / trainer_mod.MANIFEST_NAME)
    config = TrainConfig(
        **{
            **manifest.config,
            "nlft": NlftConfig(**manifest.config["nlft"]),
            "gen_decode": DecodeConfig(**manifest.config["gen_decode"]),
            "eval_decode": DecodeConfig(**manifest.config["eval_decode"]),
        }
    )
    vocab = build_vocab(args.difficulty)
    dataset = _load_dataset(run_dir / "data.jsonl")
    matches = [e for e in dataset if e.id == args.example_id]
    if not matches:
        raise ValueError(f"example {args.example_id} not found in {run_dir}/data.jsonl")
    example = matches[0]
    model = engine.load_params(
        manifest.final_checkpoint, expected_vocab_size=len(vocab)
    )
    table = collection.collect(
        model, example, get_templates(config.template_version), vocab,
        eps=config.nlft.eps,
    )
    assignment = (
        allocate_correct(table, config.nlft)
        if table.is_correct
        else allocate_incorrect(table, config.nlft)
    )
    vec = scales_mod.scale_vector(table, assignment, config.nlft)
    out = args.out or str(run_dir / f"saliency_{args.example_id}.html")
    evaluation.saliency_report(example, table, assignment, vec, path=out)
    print(f"wrote saliency report to {out}")
    return 0


def cmd_compare(args) -> int:
    paths = []
    for item in args.runs:
        path = Path(item)
        paths.append(path / trainer_mod.MANIFEST_NAME if path.is_dir() else path)
    out_csv = f"{args.out}.csv"
    out_svg = f"{args.out}.svg"
    rows = evaluation.compare_runs(paths, out_csv=out_csv, out_svg=out_svg)
    print(f"wrote {len(rows)} rows to {out_csv} and chart to {out_svg}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common_model_flags(sub, with_model: bool = True):
    sub.add_argument("--difficulty", default="default",
                     help="synthetic-task difficulty preset (fixes the vocabulary)")
    sub.add_argument("--template-version", default="toy-v1")
    if with_model:
        sub.add_argument("--context-window", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlft-lab",
        description="Token-level saliency fine-tuning laboratory",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("gen-data", help="generate a synthetic dataset")
    sub.add_argument("--seed", type=int, required=True)
    sub.add_argument("--count", type=int, required=True)
    sub.add_argument("--difficulty", default="default")
    sub.add_argument("--subset", type=int, default=0,
                     help="shuffle and keep only this many examples")
    sub.add_argument("--out", required=True)
    sub.set_defaults(func=cmd_gen_data)

    sub = commands.add_parser("pretrain", help="pretrain a base checkpoint on a dataset")
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--epochs", type=int, default=12)
    sub.add_argument("--batch-size", type=int, default=16, dest="batch_size")
    sub.add_argument("--learning-rate", type=float, default=3e-3, dest="learning_rate")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--judge-drill", action="store_true", dest="judge_drill",
                     help="also drill judgment-block reading")
    _add_common_model_flags(sub)
    sub.set_defaults(func=cmd_pretrain)

    sub = commands.add_parser("gen-outputs", help="fill model outputs for a dataset")
    sub.add_argument("--mode", choices=["teaching", "self-study"], required=True)
    sub.add_argument("--model", help="trainee checkpoint (self-study source)")
    sub.add_argument("--teacher", default="oracle",
                     help="'oracle' or a teacher checkpoint path (teaching mode)")
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--temperature", type=float, default=0.6)
    sub.add_argument("--max-tokens", type=int, default=64)
    sub.add_argument("--seed", type=int, default=0)
    _add_common_model_flags(sub)
    sub.set_defaults(func=cmd_gen_outputs)

    sub = commands.add_parser("judge", help="judge incorrect outputs")
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--judge", choices=["rule", "remote"], default="rule")
    sub.add_argument("--endpoint", help="chat-completions URL (remote judge)")
    sub.add_argument("--judge-model", help="remote judge model name")
    sub.add_argument("--cache-dir", help="judgment cache directory")
    sub.add_argument("--max-concurrency", type=int, default=1)
    sub.add_argument("--template-version", default="toy-v1")
    sub.set_defaults(func=cmd_judge)

    sub = commands.add_parser("collect", help="collect condition probability tables")
    sub.add_argument("--model", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--eps", type=float, default=collection.DEFAULT_CLAMP_EPS)
    sub.add_argument("--parallelism", type=int, default=1)
    _add_common_model_flags(sub, with_model=False)
    sub.set_defaults(func=cmd_collect)

    sub = commands.add_parser("train", help="run fine-tuning")
    sub.add_argument("--algo", choices=["nlft", "sft"])
    sub.add_argument("--config", help="JSON config file mirroring TrainConfig")
    sub.add_argument("--data", required=True)
    sub.add_argument("--eval-data", help="held-out dataset (defaults to --data)")
    sub.add_argument("--out-dir", required=True)
    sub.add_argument("--model", help="initial checkpoint (default: fresh model)")
    sub.add_argument("--teacher", default="oracle")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--learning-rate", type=float, dest="learning_rate")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--data-mode", choices=["teaching", "self_study"], dest="data_mode")
    sub.add_argument("--recollect-every", type=int, dest="recollect_every")
    sub.add_argument("--eval-every", type=int, dest="eval_every")
    sub.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    sub.add_argument("--run-name", dest="run_name")
    _add_common_model_flags(sub)
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser("eval", help="evaluate a checkpoint")
    sub.add_argument("--model", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--temperature", type=float, default=0.6)
    sub.add_argument("--max-tokens", type=int, default=512)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", help="write per-example records to this JSON file")
    _add_common_model_flags(sub, with_model=False)
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser("inspect", help="render a token-level saliency report")
    sub.add_argument("--example-id", required=True)
    sub.add_argument("--run-dir", required=True)
    sub.add_argument("--out")
    sub.add_argument("--difficulty", default="default")
    sub.set_defaults(func=cmd_inspect)

    sub = commands.add_parser("compare", help="compare runs into CSV and SVG chart")
    sub.add_argument("--runs", nargs="+", required=True,
                     help="run directories or manifest paths")
    sub.add_argument("--out", required=True, help="output path prefix")
    sub.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
