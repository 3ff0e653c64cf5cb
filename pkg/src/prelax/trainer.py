"""Pretraining loop, optimizer and schedules.

One run owns a numpy generator for augmentation sampling and a torch
seed for initialization and batch order, so a fixed config and seed
reproduce the metrics log byte for byte (wall-clock fields are zeroed
in deterministic mode for that reason).

The optimizer applies the classic momentum update

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

with an optional mask that exempts biases and normalization parameters
from weight decay. Non-finite losses or gradients abort the run with
the offending quantity named; the last written checkpoint is kept.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch

from . import augment, losses, model
from .data import LabeledDataset

VARIANTS = (
    "baseline_simsiam",
    "baseline_byol",
    "prelax_std",
    "prelax_rot",
    "prelax_all",
    "margin_baseline",
    "ablation",
)

_ROTATION_VARIANTS = frozenset({"prelax_rot", "prelax_all"})


class TrainingAborted(RuntimeError):
    """Raised when a run stops on a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    """Everything one pretraining run depends on."""

    variant: str = "prelax_std"
    alpha: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    gamma1: float = 0.1
    gamma2: float = 0.1
    eta: float = 0.5
    reverse_residual: bool = False
    symmetrize: bool = False
    normalization_mode: str = "composite"
    detach_residual_for_pl: bool = False
    ablation_toggles: tuple[str, ...] = ()
    target_rule: Optional[str] = None
    tau_base: float = 0.996
    epochs: int = 50
    batch_size: int = 64
    base_lr: float = 0.0125
    momentum: float = 0.9
    weight_decay: float = 5.0e-4
    wd_exclude_bias_bn: Optional[bool] = None
    checkpoint_every: Optional[int] = None
    prefetch: bool = False
    deterministic: bool = True
    seed: int = 0
    model: model.ModelConfig = field(default_factory=model.ModelConfig)
    augment: augment.AugmentConfig = field(default_factory=augment.AugmentConfig)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("alpha", "alpha1", "alpha2"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("beta", "gamma", "gamma1", "gamma2", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.normalization_mode not in losses.NORMALIZATION_MODES:
            raise ValueError(f"unknown normalization_mode {self.normalization_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (0.0 <= self.tau_base <= 1.0):
            raise ValueError(f"tau_base must lie in [0, 1], got {self.tau_base}")
        if self.variant == "ablation" and not self.ablation_toggles:
            raise ValueError("the ablation variant needs at least one toggle")
        if self.variant != "ablation" and self.ablation_toggles:
            raise ValueError("ablation_toggles are only valid with the ablation variant")
        if self.symmetrize and self.variant not in ("prelax_std", "baseline_simsiam", "margin_baseline"):
            raise ValueError("symmetrize only applies to two-view variants")
        rule = self.resolved_target_rule()
        if self.variant == "baseline_byol" and rule != "ema":
            raise ValueError("baseline_byol requires the ema target rule")
        if rule not in model.TARGET_RULES:
            raise ValueError(f"target_rule must be one of {model.TARGET_RULES}, got {rule!r}")

    def resolved_target_rule(self) -> str:
        if self.target_rule is not None:
            return self.target_rule
        return "ema" if self.variant == "baseline_byol" else "stop_gradient"

    def resolved_wd_exclusion(self) -> bool:
        """Bias/norm parameters skip weight decay under the ema rule by default."""
        if self.wd_exclude_bias_bn is not None:
            return self.wd_exclude_bias_bn
        return self.resolved_target_rule() == "ema"

    def needs_rotation(self) -> bool:
        if self.variant == "ablation":
            return bool({"r3s", "rotpl"} & set(self.ablation_toggles))
        return self.variant in _ROTATION_VARIANTS

    def bundle_variant(self) -> str:
        return "rot" if self.needs_rotation() else "std"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation_toggles"] = list(self.ablation_toggles)
        d["model"]["conv_widths"] = list(self.model.conv_widths)
        d["augment"]["crop_scale"] = list(self.augment.crop_scale)
        d["augment"]["crop_ratio"] = list(self.augment.crop_ratio)
        d["augment"]["jitter_strength"] = list(self.augment.jitter_strength)
        return d


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step must lie in [0, {total_steps}], got {step}")
    return base_lr * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


class SGD:
    """Momentum SGD with per-parameter weight-decay exemption.

    Keeps one velocity buffer per parameter. ``step`` checks every
    gradient for finiteness and aborts naming the parameter otherwise.
    """

    def __init__(
        self,
        named_params: Sequence[tuple[str, torch.nn.Parameter]],
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        exclude_bias_bn: bool = False,
    ):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [torch.zeros_like(p) for _, p in self.named_params]
        self.decay_mask = [
            0.0 if (exclude_bias_bn and (name.endswith("bias") or p.dim() <= 1)) else weight_decay
            for name, p in self.named_params
        ]

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for (name, p), v, wd in zip(self.named_params, self.velocities, self.decay_mask):
            if p.grad is None:
                continue
            if not torch.isfinite(p.grad).all():
                raise TrainingAborted(f"non-finite gradient in parameter {name!r}")
            v.mul_(self.momentum).add_(p.grad).add_(p, alpha=wd)
            p.add_(v, alpha=-lr)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None


def collate_bundles(
    bundles: Sequence[augment.ViewBundle],
    channel_mean: Optional[np.ndarray] = None,
    channel_std: Optional[np.ndarray] = None,
) -> losses.BundleBatch:
    """Stack bundles into tensors, standardizing channels when stats are given."""

    def stack(imgs: Sequence[np.ndarray]) -> torch.Tensor:
        arr = np.stack(imgs)
        if channel_mean is not None:
            arr = (arr - channel_mean[None, :, None, None]) / channel_std[None, :, None, None]
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))

    t1_cat, t1_cont = augment.encode_target_batch([b.t1 for b in bundles])
    t2_cat, t2_cont = augment.encode_target_batch([b.t2 for b in bundles])
    with_rot = bundles[0].rotation is not None
    return losses.BundleBatch(
        x1=stack([b.x1 for b in bundles]),
        x2=stack([b.x2 for b in bundles]),
        t1_discrete=torch.from_numpy(t1_cat),
        t1_continuous=torch.from_numpy(t1_cont.astype(np.float32)),
        t2_discrete=torch.from_numpy(t2_cat),
        t2_continuous=torch.from_numpy(t2_cont.astype(np.float32)),
        x3=stack([b.x3 for b in bundles]) if with_rot else None,
        rotation=torch.tensor([b.rotation for b in bundles], dtype=torch.long) if with_rot else None,
    )


class BundleLoader:
    """Yields collated view-bundle batches for one epoch at a time.

    A single numpy generator owned by the loader drives both the batch
    order and the augmentation sampling. With ``prefetch`` a producer
    thread builds batches ahead of the training step through a bounded
    queue; order and random draws are identical either way, so results
    do not depend on the mode.
    """

    _QUEUE_DEPTH = 4

    def __init__(
        self,
        dataset: LabeledDataset,
        cfg_augment: augment.AugmentConfig,
        batch_size: int,
        bundle_variant: str,
        rng: np.random.Generator,
        channel_mean: Optional[np.ndarray] = None,
        channel_std: Optional[np.ndarray] = None,
        prefetch: bool = False,
    ):
        if batch_size > len(dataset):
            raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.cfg_augment = cfg_augment
        self.batch_size = batch_size
        self.bundle_variant = bundle_variant
        self.rng = rng
        self.channel_mean = channel_mean
        self.channel_std = channel_std
        self.prefetch = prefetch

    @property
    def batches_per_epoch(self) -> int:
        return len(self.dataset) // self.batch_size

    def _epoch_batches(self) -> Iterator[losses.BundleBatch]:
        order = self.rng.permutation(len(self.dataset))
        for b in range(self.batches_per_epoch):
            idx = order[b * self.batch_size : (b + 1) * self.batch_size]
            bundles = [
                augment.make_bundle(self.dataset.images[i], self.rng, self.cfg_augment, self.bundle_variant)
                for i in idx
            ]
            yield collate_bundles(bundles, self.channel_mean, self.channel_std)

    def epoch(self) -> Iterator[losses.BundleBatch]:
        if not self.prefetch:
            yield from self._epoch_batches()
            return
        q: queue.Queue = queue.Queue(maxsize=self._QUEUE_DEPTH)
        sentinel = object()
        errors: list[BaseException] = []

        def produce() -> None:
            try:
                for batch in self._epoch_batches():
                    q.put(batch)
            except BaseException as exc:  # surfaced on the consumer side
                errors.append(exc)
            finally:
                q.put(sentinel)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        while True:
            item = q.get()
            if item is sentinel:
                break
            yield item
        worker.join()
        if errors:
            raise errors[0]


def compute_loss(net: model.NetworkSet, batch: losses.BundleBatch, cfg: TrainConfig) -> losses.LossBreakdown:
    """Evaluate the configured objective on one batch."""
    if cfg.variant == "baseline_simsiam" or cfg.variant == "baseline_byol":
        return losses.simsiam_dual(net, batch)
    if cfg.variant == "margin_baseline":
        return losses.margin_dual(net, batch, cfg.eta)
    if cfg.variant == "prelax_std":
        return losses.prelax_std(
            net,
            batch,
            alpha=cfg.alpha,
            beta=cfg.beta,
            gamma=cfg.gamma,
            reverse_residual=cfg.reverse_residual,
            normalization_mode=cfg.normalization_mode,
            detach_residual_for_pl=cfg.detach_residual_for_pl,
            symmetrize=cfg.symmetrize,
        )
    if cfg.variant == "prelax_rot":
        return losses.prelax_rot(
            net,
            batch,
            alpha=cfg.alpha,
            beta=cfg.beta,
            gamma=cfg.gamma,
            normalization_mode=cfg.normalization_mode,
            detach_residual_for_pl=cfg.detach_residual_for_pl,
        )
    if cfg.variant == "prelax_all":
        return losses.prelax_all(
            net,
            batch,
            alpha1=cfg.alpha1,
            alpha2=cfg.alpha2,
            beta=cfg.beta,
            gamma1=cfg.gamma1,
            gamma2=cfg.gamma2,
            reverse_residual=cfg.reverse_residual,
            normalization_mode=cfg.normalization_mode,
            detach_residual_for_pl=cfg.detach_residual_for_pl,
        )
    return losses.ablation_compose(
        net,
        batch,
        cfg.ablation_toggles,
        alpha=cfg.alpha,
        alpha2=cfg.alpha2,
        beta=cfg.beta,
        gamma=cfg.gamma,
        gamma2=cfg.gamma2,
        reverse_residual=cfg.reverse_residual,
        normalization_mode=cfg.normalization_mode,
        detach_residual_for_pl=cfg.detach_residual_for_pl,
    )


@dataclass
class PretrainResult:
    checkpoint_path: Path
    metrics_path: Path
    net: model.NetworkSet
    channel_mean: np.ndarray
    channel_std: np.ndarray
    final_record: dict


def _epoch_record(
    epoch: int,
    step: int,
    lr: float,
    tau: Optional[float],
    term_sums: dict,
    residual_sum: float,
    n_batches: int,
    wall_time: float,
    active: tuple[str, ...],
    coefficients: dict,
) -> dict:
    rec = {
        "epoch": epoch,
        "step": step,
        "lr": lr,
        "tau": tau,
        "total": term_sums["total"] / n_batches,
        "residual_norm": residual_sum / n_batches,
        "wall_time": wall_time,
        "active": list(active),
        "coefficients": coefficients,
    }
    for name in losses.TERM_NAMES:
        rec[name] = term_sums[name] / n_batches
    return rec


def pretrain(
    cfg: TrainConfig,
    dataset: LabeledDataset,
    out_dir: str | Path,
    step_callback: Optional[Callable[[int, losses.LossBreakdown], None]] = None,
) -> PretrainResult:
    """Run self-supervised pretraining and persist metrics and checkpoints.

    Writes ``metrics.jsonl`` (one record per epoch), periodic
    ``checkpoint_epoch*.npz`` archives and a final ``checkpoint_final``;
    returns the trained networks together with the dataset channel
    statistics embedded in the checkpoints.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    rule = cfg.resolved_target_rule()
    net = model.build_networks(cfg.model, rule)
    net.train()
    optimizer = SGD(
        list(net.named_trainable_parameters()),
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        exclude_bias_bn=cfg.resolved_wd_exclusion(),
    )

    channel_mean, channel_std = dataset.channel_stats()
    loader = BundleLoader(
        dataset,
        cfg.augment,
        cfg.batch_size,
        cfg.bundle_variant(),
        rng,
        channel_mean,
        channel_std,
        prefetch=cfg.prefetch and not cfg.deterministic,
    )
    total_steps = cfg.epochs * loader.batches_per_epoch
    ckpt_every = cfg.checkpoint_every if cfg.checkpoint_every is not None else max(1, cfg.epochs // 10)
    meta = {
        "train_config": cfg.to_dict(),
        "channel_mean": channel_mean.tolist(),
        "channel_std": channel_std.tolist(),
    }

    last_checkpoint = model.save_checkpoint(out_dir / "checkpoint_init.npz", net, meta)
    global_step = 0
    lr = cfg.base_lr
    tau = cfg.tau_base if rule == "ema" else None
    final_record: dict = {}

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        term_sums = {name: 0.0 for name in losses.TERM_NAMES}
        term_sums["total"] = 0.0
        residual_sum = 0.0
        active: tuple[str, ...] = ()
        coefficients: dict = {}
        n_batches = 0

        for batch in loader.epoch():
            breakdown = compute_loss(net, batch, cfg)
            total = breakdown.total
            if not torch.isfinite(total.detach()):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch} step {global_step}; "
                    f"last checkpoint kept at {last_checkpoint}"
                )
            optimizer.zero_grad()
            total.backward()
            lr = cosine_lr(global_step, total_steps, cfg.base_lr)
            optimizer.step(lr)
            if rule == "ema":
                tau = model.tau_schedule(global_step, total_steps, cfg.tau_base)
                model.ema_update(net, tau)
            global_step += 1
            for name in losses.TERM_NAMES:
                term_sums[name] += getattr(breakdown, name)
            term_sums["total"] += float(total.detach())
            residual_sum += breakdown.residual_norm
            active = breakdown.active
            coefficients = breakdown.coefficients
            n_batches += 1
            if step_callback is not None:
                step_callback(global_step, breakdown)

        if rule == "stop_gradient" and net.target_encoder is not net.online_encoder:
            raise TrainingAborted("stop-gradient target encoder stopped aliasing the online one")

        wall = 0.0 if cfg.deterministic else time.perf_counter() - started
        record = _epoch_record(
            epoch, global_step, lr, tau, term_sums, residual_sum, n_batches, wall, active, coefficients
        )
        with metrics_path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        final_record = record

        if epoch % ckpt_every == 0 and epoch < cfg.epochs:
            last_checkpoint = model.save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.npz", net, meta)

    last_checkpoint = model.save_checkpoint(out_dir / "checkpoint_final.npz", net, meta)
    return PretrainResult(
        checkpoint_path=last_checkpoint,
        metrics_path=metrics_path,
        net=net,
        channel_mean=channel_mean,
        channel_std=channel_std,
        final_record=final_record,
    )


def read_metrics(path: str | Path) -> list[dict]:
    """Load a metrics log written by :func:`pretrain`."""
    records = []
    with Path(path).open() as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
