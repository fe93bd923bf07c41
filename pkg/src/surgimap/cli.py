"""Operator command line.

Subcommands: ``synth`` (generate a synthetic corpus), ``train``, ``eval``,
``selflabel``, ``map`` (offline multi-stage mapping of one feature file),
``serve`` (HTTP service), ``export-reprs``.  Exit codes: 0 success, 1 usage
error, 2 runtime failure.  One ``--seed`` flag fans out to every module;
config keys can be overridden through ``SURGIMAP_<KEY>`` environment
variables.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

ENV_PREFIX = "SURGIMAP_"


def _load_config(path: str | None) -> dict:
    """Read key=value or JSON config, then apply SURGIMAP_* env overrides."""
    data: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        stripped = text.lstrip()
        if stripped.startswith("{"):
            data = json.loads(text)
        else:
            for line in text.splitlines():
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                data[key.strip()] = _coerce(value.strip())
    for name, value in os.environ.items():
        if name.startswith(ENV_PREFIX):
            data[name[len(ENV_PREFIX):].lower()] = _coerce(value)
    return data


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def _split_model_keys(config: dict) -> tuple[dict, dict]:
    model_keys = {k[len("model_"):]: v for k, v in config.items()
                  if k.startswith("model_")}
    train_keys = {k: v for k, v in config.items() if not k.startswith("model_")}
    return train_keys, model_keys


def _parse_tasks(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surgimap",
        description="instruction-conditioned surgical component mapping",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=12)
    p.add_argument("--clips", type=int, default=40)
    p.add_argument("--task", default="1,2,3,4")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=1.0)

    p = sub.add_parser("train", help="train on one cross-validation fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=".")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--task", default="1,2,3,4")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fold's test set")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=".")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--task", default="1,2,3,4")

    p = sub.add_parser("selflabel", help="run the four-step atlas expansion")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=".")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--unlabeled", required=True,
                   help="comma-separated HSAF files of per-second features")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--task", default="2")

    p = sub.add_parser("map", help="offline multi-stage mapping of one video")
    p.add_argument("--features", required=True, help="per-second HSAF file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--task", default="3")
    p.add_argument("--step-filter")
    p.add_argument("--fine-window", type=float, default=4.0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="start the mapping service")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--port", type=int, default=8077)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-reprs",
                       help="export final-layer representations to HSAF")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=".")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_synth(args) -> int:
    from .corpus import SynthSpec, generate_synthetic, save_manifest, write_hsaf

    os.makedirs(args.out, exist_ok=True)
    spec = SynthSpec(
        n_videos=args.videos,
        clips_per_video=args.clips,
        tasks=_parse_tasks(args.task),
        feature_dim=args.dim,
        class_separation=args.separation,
        noise_sd=args.noise,
        seed=args.seed,
    )
    records, features = generate_synthetic(spec, feature_file="synthetic.hsaf")
    write_hsaf(os.path.join(args.out, "synthetic.hsaf"), features)
    save_manifest(records, os.path.join(args.out, "manifest.jsonl"))
    with open(os.path.join(args.out, "synth_spec.json"), "w") as fh:
        json.dump({
            "n_videos": spec.n_videos, "clips_per_video": spec.clips_per_video,
            "tasks": list(spec.tasks), "feature_dim": spec.feature_dim,
            "class_separation": spec.class_separation, "noise_sd": spec.noise_sd,
            "seed": spec.seed,
        }, fh, indent=2)
    print(f"wrote {len(records)} clips to {args.out}")
    return 0


def _load_fold(args, registry):
    from .corpus import load_manifest, make_folds

    records = load_manifest(args.manifest, registry)
    folds = make_folds(records, seed=args.seed)
    if not 0 <= args.fold < len(folds):
        raise ValueError(f"fold {args.fold} out of range")
    return records, folds[args.fold]


def cmd_train(args) -> int:
    from . import trainer
    from .encoder import HsafProvider
    from .taxonomy import default_registry
    from .tokenizer import build_vocab, save_vocab

    config = _load_config(args.config)
    train_keys, model_keys = _split_model_keys(config)
    train_keys.setdefault("seed", args.seed)
    tconfig = trainer.train_config_from_dict(train_keys)

    registry = default_registry
    records, fold = _load_fold(args, registry)
    tasks = _parse_tasks(args.task)
    vocab = build_vocab(registry.schemas(), records)
    provider = HsafProvider(args.features_dir)
    feature_dim = provider.embedding(records[0]).shape[0]
    mconfig = trainer.suggested_model_config(
        vocab, registry, feature_dim=feature_dim, **model_keys
    )
    from .model import init_state

    state = init_state(mconfig, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.smckpt")
    ledger, state = trainer.train(
        state, fold, tasks, tconfig, provider, vocab, registry,
        checkpoint_path=ckpt,
        log_path=os.path.join(args.out, "train_log.jsonl"),
    )
    save_vocab(vocab, os.path.join(args.out, "vocab.txt"))
    with open(os.path.join(args.out, "ledger.json"), "w") as fh:
        json.dump({
            "best_worst_metric": ledger.best_worst_metric,
            "checkpoint_path": ledger.checkpoint_path,
            "epochs": len(ledger.history),
        }, fh, indent=2)
    print(f"best worst-task metric: {ledger.best_worst_metric}")
    return 0


def _evaluation_report(state, vocab, fold, tasks, provider, registry, seed):
    from .inference import greedy_decode_batch, score_binary_tag_batch
    from .metrics import (
        UndefinedMetricError, binary_auroc, bootstrap_ci, exact_match_accuracy,
    )

    report = []
    for task_id in tasks:
        records = [r for r in fold.test if r.task_id == task_id]
        if not records:
            continue
        ev = np.asarray([provider.embedding(r) for r in records])
        decoded = greedy_decode_batch(state, vocab, ev, task_id,
                                      constrain=False, registry=registry)
        predictions = [d.annotation for d in decoded]
        truths = [r.tags for r in records]
        schema = registry.schema_for_task(task_id)
        for tag in schema.tags:
            pairs = list(zip(predictions, truths))
            value = exact_match_accuracy(predictions, truths, tag=tag.name)
            low, high = bootstrap_ci(
                lambda s: exact_match_accuracy(
                    [p for p, _ in s], [t for _, t in s], tag=tag.name),
                pairs, seed=seed,
            )
            report.append({
                "task": task_id, "tag": tag.name, "metric": "accuracy",
                "value": value, "ci_low": low, "ci_high": high,
                "n": len(records),
            })
            if len(tag.categories) == 2:
                positive = tag.categories[1]
                scores = score_binary_tag_batch(
                    state, vocab, ev, task_id, tag.name,
                    positive_category=positive, registry=registry,
                )
                labels = [int(t.tag_values[tag.name] == positive) for t in truths]
                try:
                    auroc = binary_auroc(scores, labels)
                except UndefinedMetricError:
                    continue
                samples = list(zip(scores.tolist(), labels))
                try:
                    low, high = bootstrap_ci(
                        lambda s: binary_auroc([x for x, _ in s],
                                               [y for _, y in s]),
                        samples, seed=seed,
                    )
                except Exception:
                    low = high = auroc
                report.append({
                    "task": task_id, "tag": tag.name, "metric": "auroc",
                    "value": auroc, "ci_low": low, "ci_high": high,
                    "n": len(records),
                })
    return report


def cmd_eval(args) -> int:
    from .encoder import HsafProvider
    from .model import load_checkpoint
    from .taxonomy import default_registry
    from .tokenizer import load_vocab

    registry = default_registry
    _, fold = _load_fold(args, registry)
    state = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    provider = HsafProvider(args.features_dir)
    report = _evaluation_report(state, vocab, fold, _parse_tasks(args.task),
                                provider, registry, args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    print(f"wrote {len(report)} metric rows to {args.out}")
    return 0


def cmd_selflabel(args) -> int:
    from . import selflabel as sl
    from .corpus import load_manifest, make_folds, read_hsaf, save_manifest, write_hsaf
    from .encoder import HsafProvider
    from .inference import greedy_decode_batch
    from .model import load_checkpoint
    from .taxonomy import default_registry
    from .tokenizer import load_vocab
    from .corpus import ClipRecord

    registry = default_registry
    records = load_manifest(args.manifest, registry)
    fold = make_folds(records, seed=args.seed)[args.fold]
    state = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    provider = HsafProvider(args.features_dir)
    task_id = _parse_tasks(args.task)[0]
    os.makedirs(args.out, exist_ok=True)

    # step 1: readiness gate on validation accuracy
    tasks_present = sorted({r.task_id for r in fold.validation})
    accuracies = {}
    val_predictions = []
    gate_tag = registry.schema_for_task(task_id).tags[0].name
    from .metrics import exact_match_accuracy

    for tid in tasks_present:
        recs = [r for r in fold.validation if r.task_id == tid]
        ev = np.asarray([provider.embedding(r) for r in recs])
        decoded = greedy_decode_batch(state, vocab, ev, tid, constrain=True,
                                      registry=registry)
        accuracies[tid] = exact_match_accuracy(
            [d.annotation for d in decoded], [r.tags for r in recs])
        if tid == task_id:
            for d, r in zip(decoded, recs):
                category = d.annotation.tag_values[gate_tag]
                correct = category == r.tags.tag_values[gate_tag]
                val_predictions.append(
                    (category, d.confidences.get(gate_tag, 0.0), correct))
    if not sl.readiness_gate(accuracies):
        print(f"readiness gate failed: accuracies {accuracies}", file=sys.stderr)
        return 2

    # step 3 calibration from validation predictions
    categories = registry.schema_for_task(task_id).tags[0].categories
    table = sl.calibrate_thresholds(val_predictions, categories=categories)
    with open(os.path.join(args.out, "thresholds.json"), "w") as fh:
        json.dump(table.to_json_obj(), fh, indent=2)

    # step 2+3: annotate unlabeled videos, filter, merge
    new_records: list[ClipRecord] = []
    new_features = []
    feature_file = "selflabel_features.hsaf"
    for path in args.unlabeled.split(","):
        rows = read_hsaf(path)
        video_id = os.path.splitext(os.path.basename(path))[0]
        merged = sl.annotate_unlabeled_video(
            state, vocab, rows, task_id, table, registry)
        for ann in merged:
            lo, hi = int(ann.span[0]), max(int(np.ceil(ann.span[1])), 1)
            new_features.append(rows[lo:hi].mean(axis=0))
            new_records.append(ClipRecord(
                video_id=video_id, span=ann.span, task_id=task_id,
                tags=ann, source="ai", feature_file=feature_file,
                feature_index=len(new_features) - 1,
            ))

    # step 4: grow the atlas
    if new_features:
        write_hsaf(os.path.join(args.out, feature_file), np.asarray(new_features))
    report = sl.expand_atlas(records, new_records,
                             os.path.join(args.out, "manifest_expanded.jsonl"),
                             registry)
    with open(os.path.join(args.out, "growth_report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps(report))
    return 0


def cmd_map(args) -> int:
    from .corpus import read_hsaf
    from .model import load_checkpoint
    from .taxonomy import default_registry
    from .tokenizer import load_vocab
    from .workflow import MappingRequest, run_mapping, timeline_to_json

    state = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    rows = read_hsaf(args.features)
    request = MappingRequest(
        video_id=os.path.splitext(os.path.basename(args.features))[0],
        task_id=_parse_tasks(args.task)[0],
        step_filter=args.step_filter,
        fine_window_s=args.fine_window,
    )
    timeline = run_mapping(rows, request, state, vocab, default_registry)
    with open(args.out, "wb") as fh:
        fh.write(timeline_to_json(timeline))
    print(f"wrote timeline with {len(timeline['segments'])} segments to {args.out}")
    return 0


def cmd_serve(args) -> int:
    from .service import ServiceConfig, serve

    config = _load_config(args.config)
    serve(ServiceConfig(
        store_dir=args.store,
        checkpoint_path=args.checkpoint,
        vocab_path=args.vocab,
        workers=int(config.get("workers", args.workers)),
        port=int(config.get("port", args.port)),
    ))
    return 0


def cmd_export_reprs(args) -> int:
    from .corpus import load_manifest, write_hsaf
    from .encoder import HsafProvider
    from .model import load_checkpoint, export_representation
    from .taxonomy import default_registry
    from .tokenizer import load_vocab
    from .trainer import make_sequence_batch

    registry = default_registry
    records = load_manifest(args.manifest, registry)
    state = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    provider = HsafProvider(args.features_dir)
    out_rows = []
    for start in range(0, len(records), 256):
        chunk = records[start : start + 256]
        ev = np.asarray([provider.embedding(r) for r in chunk])
        batch = make_sequence_batch(vocab, chunk, ev, registry,
                                    m_slots=state.config.n_instruction_slots)
        out_rows.append(export_representation(state, batch))
    write_hsaf(args.out, np.concatenate(out_rows, axis=0))
    print(f"exported {len(records)} representations to {args.out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "selflabel": cmd_selflabel,
    "map": cmd_map,
    "serve": cmd_serve,
    "export-reprs": cmd_export_reprs,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except BrokenPipeError:
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
