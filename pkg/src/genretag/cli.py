"""Command-line orchestration for reproducible experiment runs.

Every training run writes a key=value snapshot of its resolved parameters
next to its outputs; feeding that file back through --config reproduces the
run bit for bit on the same platform. Flags always win over config values.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from . import evaluation, promptgen, tsne
from .audio import FeatureConfig, FeaturePipeline, write_feature_cache
from .data import GENRES, load_gtzan_manifest, random_splits, read_manifest
from .errors import GenretagError
from .losses import DaConfig
from .model import ModelConfig, load_checkpoint, network_from_checkpoint
from .training import (
    Regime,
    RegimeData,
    TrainingConfig,
    resolve_learning_rate,
    train,
)

logger = logging.getLogger("genretag.cli")


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value file; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise GenretagError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _config_to_argv(values: dict[str, str]) -> list[str]:
    argv: list[str] = []
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                argv.append(flag)
        elif key == "fold_files":
            argv.append(flag)
            argv.extend(v for v in value.split(",") if v)
        else:
            argv.extend([flag, value])
    return argv


def _inject_config(argv: list[str]) -> list[str]:
    """Expand --config FILE into flags placed before the user's own flags."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise GenretagError("--config requires a file path")
    config_flags = _config_to_argv(parse_config_file(argv[idx + 1]))
    rest = argv[:idx] + argv[idx + 2 :]
    # Subcommand first, then config-derived flags, then explicit flags (which win).
    return rest[:1] + config_flags + rest[1:]


def _add_feature_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-mels", type=int, default=96)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--hop", type=int, default=256)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--crop-seconds", type=float, default=10.0)


def _add_data_flags(p: argparse.ArgumentParser, with_synth: bool = True) -> None:
    p.add_argument("--real-manifest", help="CSV manifest of real tracks (random 3-fold splits)")
    p.add_argument("--gtzan-root", help="GTZAN audio root (use with --fold-files)")
    p.add_argument("--fold-files", nargs=3, metavar="FILE",
                   help="three published fold files listing each fold's validation tracks")
    if with_synth:
        p.add_argument("--synth-manifest", help="CSV manifest of synthetic tracks")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--split-seed", type=int, default=0)


def _feature_config(args) -> FeatureConfig:
    return FeatureConfig(
        sample_rate=args.sample_rate,
        window=args.window,
        hop=args.hop,
        n_mels=args.n_mels,
        crop_seconds=args.crop_seconds,
    )


def _real_splits(args, parser):
    if args.gtzan_root and args.fold_files:
        return load_gtzan_manifest(args.gtzan_root, args.fold_files)
    if args.real_manifest:
        records = read_manifest(args.real_manifest)
        return random_splits(records, k=3, val_fraction=args.val_fraction, seed=args.split_seed)
    if args.gtzan_root or args.fold_files:
        parser.error("--gtzan-root and --fold-files must be given together")
    return None


def _synth_splits(args):
    if getattr(args, "synth_manifest", None):
        records = read_manifest(args.synth_manifest)
        return random_splits(records, k=3, val_fraction=args.val_fraction, seed=args.split_seed)
    return None


def _fold_ids(fold: str, n_folds: int, parser) -> list[int]:
    if fold == "all":
        return list(range(n_folds))
    try:
        idx = int(fold)
    except ValueError:
        parser.error(f"--fold must be an integer or 'all', got {fold!r}")
    if not 0 <= idx < n_folds:
        parser.error(f"--fold {idx} out of range for {n_folds} folds")
    return [idx]


# --- subcommand implementations -------------------------------------------


def _cmd_extract_features(args, parser) -> int:
    records = read_manifest(args.manifest)
    pipeline = FeaturePipeline(_feature_config(args), cache_waveforms=False)
    out_dir = Path(args.out)
    for record in records:
        values = pipeline.full_features(record.path)
        write_feature_cache(out_dir, record.path, values, record.genre)
    print(f"cached features for {len(records)} clips in {out_dir}")
    return 0


def _cmd_gen_prompts(args, parser) -> int:
    genres = [g for g in args.genres.split(",") if g] if args.genres else list(GENRES)
    if args.stub:
        client = promptgen.StubChatClient(seed=args.stub_seed)
    else:
        client = promptgen.HttpChatClient(model_name=args.model)
    stats = promptgen.generate_prompt_corpus(
        genres,
        args.n_per_genre,
        client,
        args.out,
        model_name=args.model,
        retry=promptgen.RetryPolicy(max_attempts=args.max_attempts, backoff_base_s=args.backoff_base),
        max_in_flight=args.max_in_flight,
    )
    print(
        f"wrote {stats.written} records to {args.out} "
        f"(skipped {stats.skipped_existing} existing, {stats.retries} retries)"
    )
    return 0


def _cmd_build_musicgen_prompts(args, parser) -> int:
    from datetime import datetime, timezone

    count = 0
    with open(args.descriptions) as src, open(args.out, "w") as dst:
        for line in src:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            record = promptgen.PromptRecord(
                record_id=obj.get("id", f"{obj['genre']}-{count:05d}"),
                genre=obj["genre"],
                llm_description=obj["llm_description"],
                musicgen_prompt=promptgen.build_musicgen_prompt(obj["genre"], obj["llm_description"]),
                created_at=obj.get("created_at", datetime.now(timezone.utc).isoformat()),
            )
            dst.write(promptgen.record_to_json(record) + "\n")
            count += 1
    print(f"wrote {count} prompt records to {args.out}")
    return 0


def _cmd_generate_audio(args, parser) -> int:
    corpus = promptgen.read_corpus(args.corpus)
    if args.limit:
        corpus = corpus[: args.limit]
    if args.adapter == "stub":
        adapter = promptgen.StubAdapter(args.out_dir, sample_rate=args.gen_sample_rate, seed=args.stub_seed)
    else:
        if not args.adapter_cmd:
            parser.error("--adapter-cmd is required for the subprocess adapter")
        adapter = promptgen.SubprocessAdapter(shlex.split(args.adapter_cmd))
    records = promptgen.build_synthetic_dataset(
        corpus, adapter, args.manifest, duration_s=args.duration
    )
    print(f"generated {len(records)} clips; manifest at {args.manifest}")
    return 0


def _snapshot(path: Path, values: dict) -> None:
    lines = []
    for key, value in values.items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n")


class _RaisingParser:
    """Parser stand-in for worker processes: errors become exceptions."""

    def error(self, message):
        raise GenretagError(message)


def _train_fold_worker(args_dict: dict, fold_id: int) -> str:
    args = argparse.Namespace(**args_dict)
    parser = _RaisingParser()
    regime_kind = args.regime.strip().lower().replace("_", "-")
    real = _real_splits(args, parser)
    synth = _synth_splits(args)
    config = TrainingConfig(
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        patience=args.patience,
        max_epochs=args.max_epochs,
        da=DaConfig(margin=args.margin, gamma=args.gamma),
        seed=args.seed,
        model=ModelConfig(n_mels=args.n_mels),
        features=_feature_config(args),
    )
    regime = Regime(regime_kind, init_checkpoint=args.init_checkpoint)
    data = RegimeData(
        real=real[fold_id] if real is not None else None,
        synth=synth[fold_id] if synth is not None else None,
    )
    out_dir = Path(args.out) / regime_kind / str(fold_id) / str(args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot(
        out_dir / "config.txt",
        {
            "regime": regime_kind,
            "fold": fold_id,
            "seed": args.seed,
            "learning_rate": resolve_learning_rate(regime_kind, args.learning_rate),
            "batch_size": args.batch_size,
            "patience": args.patience,
            "max_epochs": args.max_epochs,
            "margin": args.margin,
            "gamma": args.gamma,
            "n_mels": args.n_mels,
            "window": args.window,
            "hop": args.hop,
            "sample_rate": args.sample_rate,
            "crop_seconds": args.crop_seconds,
            "val_fraction": args.val_fraction,
            "split_seed": args.split_seed,
            "real_manifest": args.real_manifest,
            "gtzan_root": args.gtzan_root,
            "fold_files": args.fold_files,
            "synth_manifest": getattr(args, "synth_manifest", None),
            "init_checkpoint": args.init_checkpoint,
            "out": args.out,
        },
    )
    ckpt, history = train(regime, data, config, out_dir=out_dir)
    return (
        f"regime={regime_kind} fold={fold_id} seed={args.seed} "
        f"best_epoch={history.best_epoch} best_val_loss={min(history.val_loss):.6f} "
        f"stopped_epoch={history.stopped_epoch}"
    )


def _cmd_train(args, parser) -> int:
    regime_kind = args.regime.strip().lower().replace("_", "-")
    if regime_kind in ("tl", "ft") and not args.init_checkpoint:
        parser.error(f"--init-checkpoint is required for regime {regime_kind!r}")
    real = _real_splits(args, parser)
    synth = _synth_splits(args)
    if real is None and synth is None:
        parser.error("provide --real-manifest, --gtzan-root/--fold-files, or --synth-manifest")
    n_folds = len(real) if real is not None else len(synth)
    folds = _fold_ids(args.fold, n_folds, parser)

    if args.workers > 1 and len(folds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [pool.submit(_train_fold_worker, vars(args), fold_id) for fold_id in folds]
            for future in futures:
                print(future.result())
    else:
        for fold_id in folds:
            print(_train_fold_worker(vars(args), fold_id))
    return 0


def _select_records(split, which: str):
    if which == "train":
        return list(split.train)
    if which == "val":
        return list(split.val)
    return list(split.train) + list(split.val)


def _cmd_evaluate(args, parser) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    real = _real_splits(args, parser)
    synth = _synth_splits(args)
    splits = real if real is not None else synth
    if splits is None:
        parser.error("provide --real-manifest, --gtzan-root/--fold-files, or --synth-manifest")
    folds = _fold_ids(args.fold, len(splits), parser)
    pipeline = FeaturePipeline(_feature_config(args))
    for fold_id in folds:
        records = _select_records(splits[fold_id], args.split)
        result = evaluation.evaluate(net, records, pipeline, batch_size=args.batch_size, fold_id=fold_id)
        payload = {
            "regime": ckpt.meta.get("regime", "unknown"),
            "fold": fold_id,
            "accuracy": result.accuracy,
            "loss": result.loss,
            "n_items": len(records),
        }
        out = Path(args.out) if args.out else Path(args.checkpoint).parent / "result.json"
        if len(folds) > 1:
            out = out.with_name(f"result_fold{fold_id}.json")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=1))
        print(f"fold={fold_id} accuracy={result.accuracy:.4f} loss={result.loss:.4f} -> {out}")
    return 0


def _cmd_export_embeddings(args, parser) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    real = _real_splits(args, parser)
    synth = _synth_splits(args)
    records = []
    for splits in (real, synth):
        if splits is not None:
            folds = _fold_ids(args.fold, len(splits), parser)
            for fold_id in folds:
                records.extend(_select_records(splits[fold_id], args.split))
    if not records:
        parser.error("no records selected; provide a manifest")
    pipeline = FeaturePipeline(_feature_config(args))
    embeddings = evaluation.extract_embeddings(net, records, pipeline, batch_size=args.batch_size)
    evaluation.write_embeddings_jsonl(args.out, embeddings)
    print(f"wrote {len(embeddings)} embeddings to {args.out}")
    return 0


def _cmd_tsne_plot(args, parser) -> int:
    records = evaluation.read_embeddings_jsonl(args.embeddings)
    if not records:
        raise GenretagError(f"no embeddings in {args.embeddings}")
    matrix = np.stack([r.embedding for r in records])
    points = tsne.tsne_project(
        matrix, perplexity=args.perplexity, iterations=args.iterations, seed=args.seed
    )
    genres = None if args.genres is None else [g for g in args.genres.split(",") if g]
    evaluation.emit_scatter(
        points,
        [r.genre for r in records],
        [r.domain for r in records],
        args.out,
        genres=genres,
    )
    print(f"wrote scatter of {len(records)} points to {args.out}")
    return 0


def _cmd_report(args, parser) -> int:
    runs = Path(args.runs)
    per_regime: dict[str, list[evaluation.FoldResult]] = {}
    for result_file in sorted(runs.glob("*/*/*/result*.json")):
        payload = json.loads(result_file.read_text())
        per_regime.setdefault(payload["regime"], []).append(
            evaluation.FoldResult(
                fold_id=payload["fold"], accuracy=payload["accuracy"], loss=payload["loss"]
            )
        )
    if not per_regime:
        raise GenretagError(f"no result.json files under {runs}")
    text = evaluation.emit_report(per_regime, args.out_csv, args.out_text)
    print(text, end="")
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genretag",
        description="Genre tagging experiments over real and synthetic music.",
    )
    parser.add_argument("--config", help="key=value config file; explicit flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-features", help="cache mel features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_feature_flags(p)
    p.set_defaults(func=_cmd_extract_features)

    p = sub.add_parser("gen-prompts", help="generate genre track descriptions")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-genre", type=int, default=1000)
    p.add_argument("--genres", help="comma-separated subset; default all 10")
    p.add_argument("--model", default=promptgen.DEFAULT_MODEL)
    p.add_argument("--stub", action="store_true", help="use the offline canned client")
    p.add_argument("--stub-seed", type=int, default=0)
    p.add_argument("--max-attempts", type=int, default=5)
    p.add_argument("--backoff-base", type=float, default=0.5)
    p.add_argument("--max-in-flight", type=int, default=1)
    p.set_defaults(func=_cmd_gen_prompts)

    p = sub.add_parser("build-musicgen-prompts", help="derive generation prompts from descriptions")
    p.add_argument("--descriptions", required=True, help="JSONL with genre and llm_description")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_musicgen_prompts)

    p = sub.add_parser("generate-audio", help="synthesize audio for a prompt corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--adapter", choices=("stub", "subprocess"), default="stub")
    p.add_argument("--adapter-cmd", help="command line for the subprocess adapter")
    p.add_argument("--gen-sample-rate", type=int, default=32000)
    p.add_argument("--stub-seed", type=int, default=0)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=_cmd_generate_audio)

    p = sub.add_parser("train", help="run one training regime")
    p.add_argument("--regime", required=True)
    p.add_argument("--fold", default="0", help="fold index or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-checkpoint")
    p.add_argument("--out", default="runs")
    p.add_argument("--workers", type=int, default=1,
                   help="independent worker processes when training multiple folds")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--margin", type=float, default=2.0)
    p.add_argument("--gamma", type=float, default=0.7)
    _add_data_flags(p)
    _add_feature_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a fold's split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", default="0")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out")
    _add_data_flags(p)
    _add_feature_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="dump penultimate-layer embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", default="0")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", required=True)
    _add_data_flags(p)
    _add_feature_flags(p)
    p.set_defaults(func=_cmd_export_embeddings)

    p = sub.add_parser("tsne-plot", help="project embeddings to 2-D and plot")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--genres", help="comma-separated subset; empty string plots all")
    p.set_defaults(func=_cmd_tsne_plot)

    p = sub.add_parser("report", help="aggregate fold results into the results table")
    p.add_argument("--runs", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-text")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stdout)
    parser = build_parser()
    try:
        argv = _inject_config(argv)
        args = parser.parse_args(argv)
        return args.func(args, parser)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except GenretagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
