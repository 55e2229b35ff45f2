"""Command-line entry point for the full workflow.

Configuration is a flat dict of dotted keys (model.*, train.*, gen.*,
classify.*) with precedence CLI --set > config file > defaults. Every command
that writes artifacts echoes its effective configuration into the output
directory so the run can be reproduced from the snapshot alone.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data/file,
5 training/numeric, 6 teacher.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TRAIN = 5
EXIT_TEACHER = 6


class ConfigError(Exception):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "model.embed_dim": 64,
    "model.heads": 4,
    "model.head_dim": 16,
    "model.layers": 4,
    "model.ff_mult": 4,
    "model.max_text_len": 64,
    "model.max_answer_len": 96,
    "model.itc_proj_dim": 32,
    "model.tau_init": 0.07,
    "model.tau_min": 0.01,
    "model.tau_max": 0.5,
    "model.num_patches": 49,
    "model.patch_dim": 3072,
    "model.share_fusion_text_layers": False,
    "train.epochs": 50,
    "train.lr": 1e-3,
    "train.batch_size": 48,
    "train.scheduler_patience": 5,
    "train.scheduler_min_delta": 1e-4,
    "train.early_stop_patience": 10,
    "train.k_folds": 10,
    "train.ablation": "none",
    "train.weight_itc": 1.0,
    "train.weight_itm": 1.0,
    "train.weight_lm": 1.0,
    "data.min_freq": 1,
    "gen.mode": "greedy",
    "gen.beam_size": 1,
    "gen.max_len": 96,
    "gen.length_penalty": 0.0,
    "classify.method": "itm",
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(config_path: str | None, overrides: list[str], seed: int | None) -> dict:
    values = dict(DEFAULTS)
    if config_path:
        loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        for key, value in loaded.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(raw)
    if seed is not None:
        values["seed"] = seed
    return values


def _group(values: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in values.items() if k.startswith(prefix + ".")}


def model_config(values: dict, vocab_size: int):
    from .model import ModelConfig
    return ModelConfig(vocab_size=vocab_size, **_group(values, "model"))


def train_config(values: dict):
    from .trainer import TrainConfig
    return TrainConfig(seed=int(values["seed"]), **_group(values, "train"))


def gen_config(values: dict):
    from .inference import GenerationConfig
    return GenerationConfig(**_group(values, "gen"))


def write_effective_config(out_dir, values: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(
        json.dumps(values, indent=2, sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    from .imaging import write_fixture_set
    values = build_config(args.config, args.set, args.seed)
    write_effective_config(args.out, values)
    entries = write_fixture_set(args.out, args.per_category, int(values["seed"]))
    print(f"wrote {len(entries)} images + manifest.json to {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .imaging import load_manifest
    from .teacher import (LiveTeacherClient, MockTeacherClient, SyntheticTeacherClient,
                          TeacherRequest, generate_records, validate_dataset,
                          write_records)
    values = build_config(args.config, args.set, args.seed)
    entries = load_manifest(args.manifest)
    images_root = Path(args.manifest).parent
    if args.live:
        if not args.endpoint:
            raise ConfigError("--live needs --endpoint")
        api_key = os.environ.get("NANOVLM_TEACHER_API_KEY", "")
        if not api_key:
            raise ConfigError("--live needs NANOVLM_TEACHER_API_KEY in the environment")
        client = LiveTeacherClient(args.endpoint, api_key)
    elif args.mock_dir:
        client = MockTeacherClient(args.mock_dir)
    else:
        client = SyntheticTeacherClient(seed=int(values["seed"]))
    template_ids = [int(t) for t in args.templates.split(",")]
    records, warnings = generate_records(entries, images_root, template_ids, client,
                                         TeacherRequest(),
                                         include_caption=not args.no_caption)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_records(out_path, records)
    report = validate_dataset(records, images_root)
    print(f"wrote {len(records)} records to {args.out} "
          f"({warnings} parse warnings, {len(report.violations)} validation violations)")
    return EXIT_OK if report.ok else EXIT_DATA


def _load_dataset(args, values):
    from .teacher import read_records
    from .trainer import prepare_items, vocab_from_records
    records = read_records(args.data)
    if not records:
        raise ConfigError(f"dataset {args.data} is empty")
    vocab = vocab_from_records(records, min_freq=int(values["data.min_freq"]))
    mcfg = model_config(values, len(vocab))
    images_root = args.images_root or str(Path(args.data).parent)
    items = prepare_items(records, vocab, mcfg, images_root)
    return records, vocab, mcfg, items, images_root


def cmd_train(args) -> int:
    from .trainer import train, train_kfold
    values = build_config(args.config, args.set, args.seed)
    write_effective_config(args.out, values)
    _, vocab, mcfg, items, _ = _load_dataset(args, values)
    tcfg = train_config(values)
    if args.kfold:
        summary = train_kfold(mcfg, tcfg, items, out_dir=args.out, vocab=vocab)
        for row in summary:
            print(f"fold {row['fold']}: best val {row['best_val']:.4f} "
                  f"(stopped at epoch {row['stopped_epoch']})")
    else:
        result = train(mcfg, tcfg, items, out_dir=args.out, vocab=vocab)
        print(f"trained {result.stopped_epoch} epochs, best val loss {result.best_val:.4f}")
    return EXIT_OK


def cmd_eval_vqa(args) -> int:
    from . import tensor as T
    from .inference import generate
    from .metrics import evaluate_text, text_markdown_table
    from .model import load_checkpoint
    from .teacher import read_records
    from .trainer import prepare_items
    values = build_config(args.config, args.set, args.seed)
    write_effective_config(args.out, values)
    params, mcfg, _, vocab = load_checkpoint(args.ckpt)
    if vocab is None:
        raise ConfigError(f"checkpoint {args.ckpt} has no vocab.txt")
    records = read_records(args.data)
    images_root = args.images_root or str(Path(args.data).parent)
    items = prepare_items(records, vocab, mcfg, images_root)
    gcfg = gen_config(values)
    pairs = []
    with T.no_grad():
        for item in items:
            answer = generate(params, mcfg, vocab, item.patches, item.question, gcfg)
            pairs.append((answer, item.answer))
    report = evaluate_text(pairs)
    out = Path(args.out)
    (out / "vqa_report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "vqa_report.md").write_text(
        text_markdown_table({"model": report.mean}), encoding="utf-8")
    print(" ".join(f"{k}={v:.3f}" for k, v in report.mean.items()))
    return EXIT_OK


def cmd_eval_classify(args) -> int:
    from .imaging import CATEGORIES, load_manifest, load_normalize, patchify
    from .inference import classify_zero_shot
    from .metrics import prf_confusion, prf_markdown_table, topk_accuracy
    from .model import load_checkpoint
    values = build_config(args.config, args.set, args.seed)
    write_effective_config(args.out, values)
    params, mcfg, _, vocab = load_checkpoint(args.ckpt)
    if vocab is None:
        raise ConfigError(f"checkpoint {args.ckpt} has no vocab.txt")
    entries = load_manifest(args.manifest)
    images_root = Path(args.manifest).parent
    method = str(values["classify.method"])
    rankings, labels = [], []
    for entry in entries:
        patches = patchify(load_normalize((images_root / entry["path"]).read_bytes()))
        scores = classify_zero_shot(params, mcfg, vocab, patches.astype(np.float32),
                                    CATEGORIES, method=method)
        rankings.append([s.category for s in scores])
        labels.append(entry["category"])
    top1 = topk_accuracy(rankings, labels, 1)
    top5 = topk_accuracy(rankings, labels, 5)
    prf = prf_confusion([r[0] for r in rankings], labels, CATEGORIES)
    out = Path(args.out)
    (out / "classify_report.json").write_text(
        json.dumps({"top1": top1, "top5": top5, "method": method, "prf": prf}, indent=2),
        encoding="utf-8")
    (out / "classify_report.md").write_text(prf_markdown_table(prf), encoding="utf-8")
    print(f"top1={top1:.3f} top5={top5:.3f} macro_f1={prf['macro']['f1']:.3f} ({method})")
    return EXIT_OK


def cmd_answer(args) -> int:
    from .imaging import load_normalize, patchify
    from .inference import generate
    from .model import load_checkpoint
    values = build_config(args.config, args.set, args.seed)
    if args.out:
        write_effective_config(args.out, values)
    params, mcfg, _, vocab = load_checkpoint(args.ckpt)
    if vocab is None:
        raise ConfigError(f"checkpoint {args.ckpt} has no vocab.txt")
    gcfg = gen_config(values)

    if args.batch:
        out_fh = open(Path(args.out) / "answers.jsonl", "w", encoding="utf-8") if args.out else sys.stdout
        with open(args.batch, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                request = json.loads(line)
                patches = patchify(load_normalize(Path(request["image_path"]).read_bytes()))
                start = time.perf_counter()
                answer = generate(params, mcfg, vocab, patches.astype(np.float32),
                                  request["instruction"], gcfg)
                elapsed_ms = (time.perf_counter() - start) * 1000.0
                out_fh.write(json.dumps({
                    "answer": answer,
                    "tokens": len(answer.split()) if answer else 0,
                    "latency_ms": round(elapsed_ms, 3),
                }) + "\n")
        if out_fh is not sys.stdout:
            out_fh.close()
        return EXIT_OK

    patches = patchify(load_normalize(Path(args.image).read_bytes()))
    answer = generate(params, mcfg, vocab, patches.astype(np.float32), args.question, gcfg)
    print(answer)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import run_ablation, ablation_markdown
    values = build_config(args.config, args.set, args.seed)
    write_effective_config(args.out, values)
    _, vocab, mcfg, items, _ = _load_dataset(args, values)
    tcfg = train_config(values)
    report = run_ablation(mcfg, tcfg, items, vocab, out_dir=args.out)
    print(ablation_markdown(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _common(parser):
    parser.add_argument("--config", help="JSON config file of dotted keys")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override (repeatable)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nanovlm",
                                     description="micrograph VQA assistant workflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic image fixture set")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--per-category", type=int, default=5)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("gen-data", help="build instruction records via the teacher")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--templates", default="1,2,3")
    p.add_argument("--mock-dir", help="canned-response directory (offline mock teacher)")
    p.add_argument("--live", action="store_true",
                   help="call the live teacher endpoint (the only networked path)")
    p.add_argument("--endpoint")
    p.add_argument("--no-caption", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on an instruction dataset")
    _common(p)
    p.add_argument("--data", required=True, help="records JSONL")
    p.add_argument("--images-root", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--kfold", action="store_true", help="cross-validate over train.k_folds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-vqa", help="score generated answers with text metrics")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--images-root", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_vqa)

    p = sub.add_parser("eval-classify", help="zero-shot classification over a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_classify)

    p = sub.add_parser("answer", help="answer one question (or a JSONL batch)")
    _common(p)
    p.add_argument("--image")
    p.add_argument("--question")
    p.add_argument("--batch", help="JSONL of {image_path, instruction}")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("ablate", help="train and compare the ablated variants")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--images-root", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    from .imaging import ImageFormatError
    from .model import ModelError
    from .teacher import TeacherError
    from .tensor import TensorError
    from .trainer import TrainerError, TrainingDiverged

    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command == "answer" and not args.batch and not (args.image and args.question):
        parser.error("answer needs --image and --question (or --batch)")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except TrainerError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TeacherError as exc:
        print(f"teacher error: {exc}", file=sys.stderr)
        return EXIT_TEACHER
    except (FileNotFoundError, ImageFormatError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TensorError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
