"""Command line: ``stylerec <command> [options]``.

Every command writes its artifacts under ``--out`` together with a
``manifest.json`` listing file digests. Logs go to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .encoding import ALL_IMAGE_FEATURES, ALL_USER_FEATURES, FeatureSchema, build_schema
from .evaluation import PopularityRanker, curves_csv, evaluate, markdown_table
from .model import TwoTowerModel
from .ranker import EmbeddingIndex, ModelRanker, build_index, click_popularity, rerank, rerank_record, search_candidates
from .studies import (
    DEFAULT_WEIGHT_GRID,
    STUDIES,
    StudyData,
    StudySettings,
    fusion_study,
    license_queries,
    run_study,
    train_model,
)
from .synthgen import GeneratorConfig, generate, write_dataset
from .trainer import TrainingDiverged

log = logging.getLogger("stylerec")


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _read_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _settings(args) -> StudySettings:
    cfg = _read_config(args.config)
    settings = StudySettings.from_dict(cfg)
    if args.seed is not None:
        settings = settings.with_seed(args.seed)
    return settings


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, args: dict, files) -> Path:
    """No timestamps, so identical runs give identical manifests."""
    entries = {}
    for f in sorted(set(Path(p) for p in files)):
        entries[str(f.relative_to(out))] = _digest(f)
    manifest = {"command": command, "version": __version__, "args": args, "files": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _load_trained(model_dir: Path):
    schema = FeatureSchema.load(model_dir / "schema.json")
    return TwoTowerModel.load(model_dir / "model.npz", schema)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> list[Path]:
    cfg = _read_config(args.config).get("generator", {})
    if args.seed is not None:
        cfg["seed"] = args.seed
    config = GeneratorConfig.from_dict(cfg)
    users, images, interactions, gt = generate(config)
    write_dataset(args.out, users, images, interactions, gt, config)
    log.info("generated %d users, %d images, %d clicks", len(users), len(images), len(interactions))
    return [args.out / n for n in ("users.jsonl", "images.jsonl", "interactions.jsonl",
                                   "ground_truth.json", "generator_config.json")]


def cmd_build_vocab(args) -> list[Path]:
    settings = _settings(args)
    data = StudyData.from_dir(args.data, settings.test_fraction)
    schema = build_schema(data.split.train, data.users, data.images, ALL_USER_FEATURES,
                          ALL_IMAGE_FEATURES + ("keywords",), settings.thresholds, settings.embedding_dims)
    files = []
    for spec in schema.user + schema.image:
        if spec.vocabulary is not None:
            path = args.out / "vocab" / f"{spec.name}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            spec.vocabulary.save(path)
            files.append(path)
            log.info("%s: %d tokens, %d oov buckets", spec.name, len(spec.vocabulary), spec.vocabulary.oov_buckets)
    return files


def cmd_train(args) -> list[Path]:
    settings = _settings(args)
    data = StudyData.from_dir(args.data, settings.test_fraction)
    model, history = train_model(data, settings)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    model.schema.save(out / "schema.json")
    model.save(out / "model.npz")
    files = [out / "schema.json", out / "model.npz",
             _write(out / "history.csv", history.to_csv()),
             _write(out / "settings.json", json.dumps(settings.to_dict(), indent=2, sort_keys=True) + "\n")]
    log.info("best epoch %d, val loss %.4f", history.best_epoch, history.best_val_loss)
    return files


def cmd_eval(args) -> list[Path]:
    settings = _settings(args)
    data = StudyData.from_dir(args.data, settings.test_fraction)
    if args.baseline == "popular":
        ranker, label = PopularityRanker(data.split.train), "Popular Baseline"
    else:
        if args.model is None:
            raise ValueError("--model is required unless --baseline popular")
        model = _load_trained(args.model)
        ranker, label = ModelRanker(model, data.users, build_index(model, data.images)), "VS RecSys"
    report, curve = evaluate(ranker, data.split.test, data.deep_features())
    out = args.out
    return [
        _write(out / "report.json", report.to_json()),
        _write(out / "report.md", markdown_table([(label, report)])),
        _write(out / "ecs.csv", curves_csv({label: curve})),
    ]


def cmd_rank(args) -> list[Path]:
    settings = _settings(args)
    data = StudyData.from_dir(args.data, settings.test_fraction)
    model = _load_trained(args.model)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    index_path = out / "index.bin"
    index = build_index(model, data.images, index_path)
    index = EmbeddingIndex.load(index_path)
    popularity = click_popularity(data.split.train)
    users = args.user or sorted(data.users)
    missing = [u for u in users if u not in data.users]
    if missing:
        raise KeyError(f"unknown user(s): {', '.join(missing[:10])}")
    candidates = search_candidates(args.query, data.images, args.n, popularity)
    lines = [rerank_record(u, args.query, rerank(data.users[u], candidates, model, index)) for u in users]
    log.info("re-ranked %d search results for %d user(s)", len(candidates), len(users))
    return [index_path, _write(out / "rerank.jsonl", "\n".join(lines) + "\n")]


def _parse_grid(text: str | None):
    if not text:
        return DEFAULT_WEIGHT_GRID
    grid = []
    for pair in text.split(";"):
        a, b = (float(x) for x in pair.split(","))
        grid.append((a, b))
    return tuple(grid)


def cmd_fuse(args) -> list[Path]:
    settings = _settings(args)
    data = StudyData.from_dir(args.data, settings.test_fraction)
    if args.model is not None:
        model = _load_trained(args.model)
    else:
        model, _ = train_model(data, settings)
    queries = license_queries(data, args.queries, args.users_per_query, settings.train.seed)
    result = fusion_study(data, model, queries, _parse_grid(args.weights))
    log.info("fusion over %d (query, user) pairs; best weights %s", len(queries), result.best_weights)
    return [_write(args.out / "fusion.md", result.markdown()), _write(args.out / "fusion.json", result.to_json())]


def cmd_ablate(args) -> list[Path]:
    settings = _settings(args)
    data = StudyData.from_dir(args.data, settings.test_fraction)
    result = run_study(args.study, data, settings)
    failed = [r.label for r in result.rows if r.failed]
    if failed:
        log.warning("rows marked FAILED: %s", ", ".join(failed))
    return result.write(args.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "fuse": cmd_fuse,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config (generator/thresholds/model/train sections)")
    common.add_argument("--seed", type=int, help="overrides the seed in the config")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stylerec", description="Visual-style two-tower recommender toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic marketplace")

    p = sub.add_parser("build-vocab", parents=[common], help="build vocabularies from training clicks")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train", parents=[common], help="train a two-tower model")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="offline metrics on the temporal test split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, help="directory written by `train`")
    p.add_argument("--baseline", choices=["popular"], help="evaluate a baseline instead of a model")

    p = sub.add_parser("rank", parents=[common], help="build the image index and re-rank keyword search results")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--user", action="append", help="user id (repeatable; default: all users)")
    p.add_argument("-n", type=int, default=1000, help="search results to re-rank")

    p = sub.add_parser("fuse", parents=[common], help="MAP of search, re-rank and reciprocal-rank fusion")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, help="directory written by `train` (default: train one)")
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--users-per-query", type=int, default=200)
    p.add_argument("--weights", help='weight grid as "search,recsys;..." (default 0.1..0.9 without 0.5)')

    p = sub.add_parser("ablate", parents=[common], help="run one ablation study")
    p.add_argument("--study", choices=STUDIES, required=True)
    p.add_argument("--data", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        files = COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, TrainingDiverged) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1
    recorded = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k not in ("out", "verbose", "command")}
    write_manifest(args.out, args.command, recorded, files)
    log.info("%s: wrote %d file(s) to %s", args.command, len(files), args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
