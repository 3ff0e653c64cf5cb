"""Frozen-encoder evaluation: linear probing and nearest-neighbor retrieval.

Embeddings live in :class:`EmbeddingTable`, a flat structure with a
binary file format:

    header:  magic b"PXET", u32 format version (=1), u32 d_z,
             u64 row count, u8 labels-present flag
    rows:    u64 id, i32 label (-1 when absent), d_z little-endian
             float32 values

The probe is a single linear layer trained with momentum SGD and a
step schedule that decays the rate by 0.1 at fixed fractions of the
epoch budget (the classic recipe uses lr 30 for 100 epochs with drops
at 60 and 80; desk-scale configs pass smaller numbers). Probe weights
start at zero, so an untrained probe predicts class 0 everywhere and
scores the base rate on balanced data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import LabeledDataset
from .model import Encoder, parameter_checksum

_MAGIC = b"PXET"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIQB")

POOLINGS = ("backbone", "projector")


@dataclass
class EmbeddingTable:
    """Fixed-width embeddings keyed by unique u64 ids.

    ``labels`` uses -1 for unlabeled rows.
    """

    ids: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be 2-dimensional, got shape {self.embeddings.shape}")
        n = self.embeddings.shape[0]
        if self.ids.shape != (n,) or self.labels.shape != (n,):
            raise ValueError(
                f"ids {self.ids.shape} / labels {self.labels.shape} do not match {n} embedding rows"
            )
        if len(np.unique(self.ids)) != n:
            raise ValueError("embedding ids must be unique")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def has_labels(self) -> bool:
        return bool(len(self)) and bool((self.labels >= 0).all())


def write_table(table: EmbeddingTable, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(_MAGIC, _FORMAT_VERSION, table.dim, len(table), int(table.has_labels)))
        row = struct.Struct(f"<Qi{table.dim}f")
        for i in range(len(table)):
            f.write(row.pack(int(table.ids[i]), int(table.labels[i]), *table.embeddings[i].tolist()))
    return path


def read_table(path: str | Path) -> EmbeddingTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: too short for an embedding table header")
    magic, version, dim, count, _flag = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    row = struct.Struct(f"<Qi{dim}f")
    expected = _HEADER.size + count * row.size
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} rows, found {len(raw)}")
    ids = np.empty(count, dtype=np.uint64)
    labels = np.empty(count, dtype=np.int32)
    emb = np.empty((count, dim), dtype=np.float32)
    off = _HEADER.size
    for i in range(count):
        vals = row.unpack_from(raw, off)
        ids[i] = vals[0]
        labels[i] = vals[1]
        emb[i] = vals[2:]
        off += row.size
    return EmbeddingTable(ids=ids, labels=labels, embeddings=emb)


def extract_embeddings(
    encoder: Encoder,
    dataset: LabeledDataset,
    pooling: str = "backbone",
    batch_size: int = 256,
    channel_mean: Optional[np.ndarray] = None,
    channel_std: Optional[np.ndarray] = None,
    ids: Optional[np.ndarray] = None,
) -> EmbeddingTable:
    """Embed a dataset with a frozen encoder.

    ``pooling`` selects the pooled backbone features (default) or the
    projector output. The encoder is run in eval mode under no_grad and
    its parameters are untouched; ids default to the row index.
    """
    if pooling not in POOLINGS:
        raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    if dataset.images.shape[-1] != encoder.image_size and any(
        isinstance(m, torch.nn.Flatten) for m in encoder.backbone.modules()
    ):
        raise ValueError(
            f"encoder expects {encoder.image_size}x{encoder.image_size} inputs, "
            f"dataset provides {dataset.image_size}x{dataset.image_size}"
        )
    was_training = encoder.training
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            arr = dataset.images[start : start + batch_size]
            if channel_mean is not None:
                arr = (arr - channel_mean[None, :, None, None]) / channel_std[None, :, None, None]
            x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
            out = encoder.features(x) if pooling == "backbone" else encoder(x)
            chunks.append(out.numpy())
    if was_training:
        encoder.train()
    emb = np.concatenate(chunks) if chunks else np.zeros((0, encoder.feature_dim), dtype=np.float32)
    if ids is None:
        ids = np.arange(len(dataset), dtype=np.uint64)
    return EmbeddingTable(ids=ids, labels=dataset.labels.astype(np.int32), embeddings=emb)


@dataclass(frozen=True)
class ProbeConfig:
    """Linear-probe optimization settings."""

    lr: float = 30.0
    epochs: int = 100
    batch_size: int = 256
    momentum: float = 0.9
    milestones: tuple[float, float] = (0.6, 0.8)
    lr_decay: float = 0.1
    standardize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        for m in self.milestones:
            if not (0.0 < m <= 1.0):
                raise ValueError(f"milestones must lie in (0, 1], got {self.milestones}")


def _standardizer(train: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), 1e-8)
    return mean, std


def linear_probe(
    train_table: EmbeddingTable,
    test_table: EmbeddingTable,
    cfg: ProbeConfig = ProbeConfig(),
) -> float:
    """Train a linear classifier on frozen train embeddings, return test accuracy.

    Features are standardized with train-split statistics (shifting and
    rescaling embeddings leaves the result unchanged); the classifier
    weights start at zero.
    """
    if not train_table.has_labels or not test_table.has_labels:
        raise ValueError("linear_probe needs labeled train and test tables")
    if train_table.dim != test_table.dim:
        raise ValueError(f"embedding dims differ: {train_table.dim} vs {test_table.dim}")
    x_train = train_table.embeddings.astype(np.float64)
    x_test = test_table.embeddings.astype(np.float64)
    if cfg.standardize:
        mean, std = _standardizer(x_train)
        x_train = (x_train - mean) / std
        x_test = (x_test - mean) / std
    y_train = train_table.labels.astype(np.int64)
    n_classes = int(max(y_train.max(), test_table.labels.max())) + 1

    head = torch.nn.Linear(train_table.dim, n_classes, dtype=torch.float64)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    xt = torch.from_numpy(x_train)
    yt = torch.from_numpy(y_train)
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    drops = {int(m * cfg.epochs) for m in cfg.milestones}
    gen = torch.Generator().manual_seed(cfg.seed)
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in drops:
            lr *= cfg.lr_decay
            for group in opt.param_groups:
                group["lr"] = lr
        order = torch.randperm(len(xt), generator=gen)
        for start in range(0, len(xt), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(head(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = head(torch.from_numpy(x_test)).argmax(dim=1).numpy()
    return float((pred == test_table.labels).mean())


def knn_retrieve(query: np.ndarray, table: EmbeddingTable, k: int) -> np.ndarray:
    """Ids of the k most cosine-similar rows, best first.

    Ties break toward the smaller id. Zero-norm rows (or query) are
    compared as-is, contributing similarity 0.
    """
    if len(table) == 0:
        raise ValueError("cannot retrieve from an empty table")
    if not (1 <= k <= len(table)):
        raise ValueError(f"k must lie in [1, {len(table)}], got {k}")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != table.dim:
        raise ValueError(f"query dim {query.shape[0]} does not match table dim {table.dim}")
    qn = np.linalg.norm(query)
    q = query / qn if qn > 1e-12 else query
    emb = table.embeddings.astype(np.float64)
    norms = np.linalg.norm(emb, axis=1)
    safe = np.where(norms > 1e-12, norms, 1.0)
    sims = (emb / safe[:, None]) @ q
    order = np.lexsort((table.ids, -sims))
    return table.ids[order[:k]]


def transfer_probe(
    encoder: Encoder,
    train_dataset: LabeledDataset,
    test_dataset: LabeledDataset,
    cfg: ProbeConfig = ProbeConfig(),
    pooling: str = "backbone",
    channel_mean: Optional[np.ndarray] = None,
    channel_std: Optional[np.ndarray] = None,
) -> float:
    """Linear probe of a frozen encoder on another labeled corpus.

    With the pretraining corpus itself this coincides with the plain
    linear-probe evaluation.
    """
    train_table = extract_embeddings(
        encoder, train_dataset, pooling, channel_mean=channel_mean, channel_std=channel_std
    )
    test_table = extract_embeddings(
        encoder, test_dataset, pooling, channel_mean=channel_mean, channel_std=channel_std
    )
    return linear_probe(train_table, test_table, cfg)


def rotation_accuracy(
    net,
    dataset: LabeledDataset,
    aug_cfg,
    seed: int = 0,
    channel_mean: Optional[np.ndarray] = None,
    channel_std: Optional[np.ndarray] = None,
    batch_size: int = 128,
) -> float:
    """Quarter-turn prediction accuracy read off representation residuals.

    Draws one rotation bundle per image with a fresh generator, embeds
    the plain and rotated views with the frozen online encoder, and asks
    the pretext head to classify the turn from the residual z3 - z1.
    Everything runs in eval mode under no_grad; network state is
    restored afterwards.
    """
    from .augment import make_bundle

    rng = np.random.default_rng(seed)
    bundles = [make_bundle(img, rng, aug_cfg, "rot") for img in dataset.images]
    encoder = net.online_encoder
    head = net.pretext_head
    modes = (encoder.training, head.training)
    encoder.eval()
    head.eval()
    hits = 0
    with torch.no_grad():
        for start in range(0, len(bundles), batch_size):
            chunk = bundles[start : start + batch_size]
            x1 = np.stack([b.x1 for b in chunk])
            x3 = np.stack([b.x3 for b in chunk])
            angles = np.array([b.rotation for b in chunk])
            if channel_mean is not None:
                mean = np.asarray(channel_mean, dtype=np.float32)[:, None, None]
                std = np.asarray(channel_std, dtype=np.float32)[:, None, None]
                x1 = (x1 - mean) / std
                x3 = (x3 - mean) / std
            z1 = encoder(torch.from_numpy(x1.astype(np.float32)))
            z3 = encoder(torch.from_numpy(x3.astype(np.float32)))
            logits = head(z3 - z1).rotation_logits
            hits += int((logits.argmax(dim=1).numpy() == angles).sum())
    if modes[0]:
        encoder.train()
    if modes[1]:
        head.train()
    return hits / len(bundles)
