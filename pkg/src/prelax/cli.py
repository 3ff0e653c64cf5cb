"""Command-line entry point: pretrain, eval, retrieve, check, report.

One YAML config file describes a run (see :class:`RunConfig` for the
schema; every field has a default, so all of it is optional). Values
are resolved in precedence order

    --set overrides  >  PRELAX_OUTPUT_DIR (output_dir only)  >  config file  >  defaults

and every command that produces artifacts writes the fully resolved
config next to them, so a run can be reproduced from its output
directory alone.

``--set`` takes dotted paths (``--set train.base_lr=0.02 --set
dataset.n=512``); a bare key that is not a top-level section is treated
as a training field, so ``--set variant=prelax_rot`` works as well.

Exit codes: 0 success, 1 runtime failure (including failed check
suites), 2 config or validation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import augment, checks, data, evaluation, losses, model, report, trainer

OUTPUT_DIR_ENV = "PRELAX_OUTPUT_DIR"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class DatasetSpec:
    """Where training or evaluation images come from.

    ``synthetic`` draws from :func:`prelax.data.synthetic_dataset`;
    ``cifar`` reads the binary layout from ``path``.
    """

    kind: str = "synthetic"
    n: int = 2048
    classes: Optional[int] = None
    size: int = 32
    seed: int = 0
    noise: float = 0.1
    scheme: str = "banded"
    path: Optional[str] = None
    split: str = "train"

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "cifar"):
            raise ValueError(f"kind must be 'synthetic' or 'cifar', got {self.kind!r}")
        if self.kind == "cifar" and not self.path:
            raise ValueError("cifar datasets need a path")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def class_count(self) -> int:
        if self.classes is not None:
            return self.classes
        return 10 if self.kind == "cifar" else 4

    def build(self) -> data.LabeledDataset:
        if self.kind == "cifar":
            return data.load_cifar_binary(self.path, self.split, self.class_count())
        return data.synthetic_dataset(
            n=self.n,
            K=self.class_count(),
            size=self.size,
            rng=np.random.default_rng(self.seed),
            scheme=self.scheme,
            noise=self.noise,
        )


@dataclass(frozen=True)
class EvalSpec:
    """How a frozen checkpoint is evaluated."""

    mode: str = "linear"
    pooling: str = "backbone"
    k: int = 15
    queries: int = 8
    labels_per_class: Optional[int] = None
    probe: evaluation.ProbeConfig = field(default_factory=evaluation.ProbeConfig)
    test: Optional[DatasetSpec] = None

    def __post_init__(self) -> None:
        if self.mode not in ("linear", "transfer", "retrieve"):
            raise ValueError(f"mode must be linear, transfer or retrieve, got {self.mode!r}")
        if self.pooling not in ("backbone", "projector"):
            raise ValueError(f"pooling must be 'backbone' or 'projector', got {self.pooling!r}")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.queries < 1:
            raise ValueError(f"queries must be positive, got {self.queries}")
        if self.labels_per_class is not None and self.labels_per_class < 1:
            raise ValueError(f"labels_per_class must be positive, got {self.labels_per_class}")


@dataclass(frozen=True)
class RunConfig:
    """Top-level config: training, data, evaluation, output location."""

    output_dir: str = "runs/prelax"
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def test_dataset_spec(self) -> DatasetSpec:
        """The held-out counterpart of ``dataset``.

        Explicit ``eval.test`` fields win; otherwise synthetic data gets
        a shifted seed and half the examples, CIFAR switches split.
        """
        if self.eval.test is not None:
            return self.eval.test
        base = dataclasses.asdict(self.dataset)
        if self.dataset.kind == "cifar":
            base["split"] = "test"
        else:
            base["seed"] = self.dataset.seed + 1
            classes = self.dataset.class_count()
            base["n"] = max(classes, (self.dataset.n // 2) // classes * classes)
        return DatasetSpec(**base)


_SECTION_TYPES = {
    "train": trainer.TrainConfig,
    "dataset": DatasetSpec,
    "eval": EvalSpec,
    "model": model.ModelConfig,
    "augment": augment.AugmentConfig,
    "probe": evaluation.ProbeConfig,
    "test": DatasetSpec,
}


def _build_dataclass(cls: type, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key {where!r}; known keys: {', '.join(sorted(known))}")
        if key in _SECTION_TYPES and isinstance(value, dict):
            kwargs[key] = _build_dataclass(_SECTION_TYPES[key], value, where)
        elif isinstance(value, list) and "tuple" in str(known[key].type):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from exc


def _set_by_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {dotted!r} descends into non-mapping key {part!r}")
    node[parts[-1]] = value


def load_run_config(
    config_path: Optional[str],
    overrides: list[str],
) -> tuple[RunConfig, dict]:
    """Read the config file, apply env and --set overrides, validate.

    Returns the built config and the raw override tree (used to detect
    which keys were given explicitly).
    """
    tree: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping at top level")
        tree = loaded

    env_out = os.environ.get(OUTPUT_DIR_ENV)
    if env_out:
        tree["output_dir"] = env_out

    top_level = {f.name for f in dataclasses.fields(RunConfig)}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw_value = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if "." not in key and key not in top_level:
            key = f"train.{key}"
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse --set value {raw_value!r}: {exc}") from exc
        _set_by_path(tree, key, value)

    return _build_dataclass(RunConfig, tree, ""), tree


def resolved_config_dict(cfg: RunConfig) -> dict:
    out = {
        "output_dir": cfg.output_dir,
        "train": cfg.train.to_dict(),
        "dataset": dataclasses.asdict(cfg.dataset),
        "eval": dataclasses.asdict(cfg.eval),
    }
    out["eval"]["probe"] = {**out["eval"]["probe"], "milestones": list(cfg.eval.probe.milestones)}
    return out


def write_snapshot(cfg: RunConfig, out_dir: Path, command: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = dict(resolved_config_dict(cfg), command=command)
    path = out_dir / f"resolved_{command}.yaml"
    path.write_text(yaml.safe_dump(snap, sort_keys=False))
    return path


def _stratified_table(
    table: evaluation.EmbeddingTable,
    per_class: int,
    class_count: int,
    seed: int,
) -> evaluation.EmbeddingTable:
    """Random balanced subset of a labeled table, ``per_class`` rows per class."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(class_count):
        pool = np.flatnonzero(table.labels == c)
        if len(pool) == 0:
            raise ConfigError(f"no examples of class {c} to probe with")
        picks.extend(rng.choice(pool, size=min(per_class, len(pool)), replace=False))
    idx = np.sort(np.asarray(picks))
    return evaluation.EmbeddingTable(table.ids[idx], table.labels[idx], table.embeddings[idx])


def _load_checkpoint_for_eval(args, raw_tree: dict, cfg: RunConfig):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    net, meta = model.load_checkpoint(ckpt)
    requested = raw_tree.get("train", {}).get("model", {}).get("d_z")
    if requested is not None and requested != net.config.d_z:
        raise ConfigError(
            f"checkpoint {ckpt} was trained with d_z={net.config.d_z} "
            f"but the config requests d_z={requested}; embeddings would not line up"
        )
    if "channel_mean" in meta:
        mean = np.asarray(meta["channel_mean"], dtype=np.float32)
        std = np.asarray(meta["channel_std"], dtype=np.float32)
    else:
        mean, std = cfg.dataset.build().channel_stats()
    return net, meta, mean, std


def _check_size_consistency(cfg: RunConfig) -> None:
    m = cfg.train.model.image_size
    if cfg.train.augment.out_size != m:
        raise ConfigError(
            f"train.augment.out_size={cfg.train.augment.out_size} feeds a model with "
            f"train.model.image_size={m}; set both to the same value"
        )
    if cfg.dataset.kind == "synthetic" and cfg.dataset.size != m:
        raise ConfigError(
            f"dataset.size={cfg.dataset.size} does not match train.model.image_size={m}; "
            f"evaluation embeds full images, so the sizes must agree"
        )
    if cfg.dataset.kind == "cifar" and m != 32:
        raise ConfigError(f"cifar images are 32x32 but train.model.image_size={m}")


def cmd_pretrain(args) -> int:
    cfg, _ = load_run_config(args.config, args.set or [])
    _check_size_consistency(cfg)
    out_dir = Path(cfg.output_dir)
    write_snapshot(cfg, out_dir, "pretrain")
    dataset = cfg.dataset.build()
    result = trainer.pretrain(cfg.train, dataset, out_dir)
    final = result.final_record
    print(
        f"pretrain done: variant={cfg.train.variant} epochs={final['epoch']} "
        f"total={final['total']:.4f} residual_norm={final['residual_norm']:.4f}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, raw_tree = load_run_config(args.config, args.set or [])
    mode = args.mode or cfg.eval.mode
    if mode not in ("linear", "transfer", "retrieve"):
        raise ConfigError(f"mode must be linear, transfer or retrieve, got {mode!r}")
    out_dir = Path(cfg.output_dir)
    cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, mode=mode))
    write_snapshot(cfg, out_dir, "retrieve" if args.alias_retrieve else "eval")
    net, _, mean, std = _load_checkpoint_for_eval(args, raw_tree, cfg)
    encoder = net.online_encoder

    if mode == "retrieve":
        return _run_retrieve(cfg, encoder, mean, std, out_dir)

    train_ds = cfg.dataset.build()
    test_ds = cfg.test_dataset_spec().build()
    table_train = evaluation.extract_embeddings(encoder, train_ds, cfg.eval.pooling, channel_mean=mean, channel_std=std)
    table_test = evaluation.extract_embeddings(encoder, test_ds, cfg.eval.pooling, channel_mean=mean, channel_std=std)
    evaluation.write_table(table_train, out_dir / "embeddings_train.pxet")
    evaluation.write_table(table_test, out_dir / "embeddings_test.pxet")
    if cfg.eval.labels_per_class is not None:
        table_train = _stratified_table(
            table_train, cfg.eval.labels_per_class, train_ds.class_count, cfg.eval.probe.seed
        )
    accuracy = evaluation.linear_probe(table_train, table_test, cfg.eval.probe)
    print(f"accuracy={accuracy:.4f}")
    return EXIT_OK


def _run_retrieve(cfg: RunConfig, encoder, mean, std, out_dir: Path) -> int:
    dataset = cfg.dataset.build()
    k = cfg.eval.k
    if len(dataset) <= k:
        raise ConfigError(f"retrieval needs more than k={k} images, dataset has {len(dataset)}")
    table = evaluation.extract_embeddings(encoder, dataset, cfg.eval.pooling, channel_mean=mean, channel_std=std)
    evaluation.write_table(table, out_dir / "embeddings.pxet")

    queries = list(range(min(cfg.eval.queries, len(dataset))))
    rows = []
    neighbor_lists = []
    for qid in queries:
        ids = evaluation.knn_retrieve(table.embeddings[qid], table, k + 1)
        ids = [int(i) for i in ids if int(i) != qid][:k]
        neighbor_lists.append(ids)
        emb = table.embeddings.astype(np.float64)
        norms = np.maximum(np.linalg.norm(emb, axis=1), 1e-12)
        unit = emb / norms[:, None]
        for rank, nid in enumerate(ids, start=1):
            rows.append((qid, rank, nid, float(unit[qid] @ unit[nid])))

    csv_path = out_dir / "retrieval.csv"
    with open(csv_path, "w") as fh:
        fh.write("query_id,rank,neighbor_id,cosine\n")
        for qid, rank, nid, cos in rows:
            fh.write(f"{qid},{rank},{nid},{cos:.6f}\n")
    grid_path = report.render_retrieval_grid(dataset.images, queries, neighbor_lists, out_dir / "retrieval_grid.png")
    print(f"retrieved {k} neighbors for {len(queries)} queries")
    print(f"results: {csv_path}")
    print(f"figure: {grid_path}")
    return EXIT_OK


def cmd_check(args) -> int:
    if args.inject_fault:
        with losses.inject_fault(args.inject_fault):
            results = checks.run_all_checks(fast=args.fast)
    else:
        results = checks.run_all_checks(fast=args.fast)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} check suites passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    metrics_path = run_dir / "metrics.jsonl"
    if not metrics_path.is_file():
        raise ConfigError(f"no metrics log at {metrics_path}")
    records = trainer.read_metrics(metrics_path)
    if not records:
        raise ConfigError(f"{metrics_path} holds no records")
    written = report.render_run_report(records, run_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prelax",
        description="Self-supervised pretraining with residual-relaxed objectives.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="YAML run config (all fields optional)")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config field by dotted path; bare keys address the train section",
        )

    p_train = sub.add_parser("pretrain", help="run self-supervised pretraining")
    add_config_args(p_train)
    p_train.set_defaults(fn=cmd_pretrain)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint (linear, transfer, retrieve)")
    add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint file from pretrain")
    p_eval.add_argument("--mode", choices=("linear", "transfer", "retrieve"))
    p_eval.set_defaults(fn=cmd_eval, alias_retrieve=False)

    p_retr = sub.add_parser("retrieve", help="alias of eval --mode retrieve")
    add_config_args(p_retr)
    p_retr.add_argument("--checkpoint", required=True, help="checkpoint file from pretrain")
    p_retr.set_defaults(fn=cmd_eval, mode="retrieve", alias_retrieve=True)

    p_check = sub.add_parser("check", help="run the correctness check suites")
    p_check.add_argument("--fast", action="store_true", help="shrink the gradient suite to one objective")
    p_check.add_argument(
        "--inject-fault",
        choices=losses.KNOWN_FAULTS,
        help="enable a seeded fault to demonstrate the suite catches it",
    )
    p_check.set_defaults(fn=cmd_check)

    p_report = sub.add_parser("report", help="render metrics CSV and figures for a run directory")
    p_report.add_argument("--run", required=True, help="run directory holding metrics.jsonl")
    p_report.set_defaults(fn=cmd_report)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainer.TrainingAborted, data.DatasetParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
