"""Encoder, predictor and pretext-head networks plus target-network rules.

The online path is encoder F (backbone + projector) followed by
predictor G. The target path F_phi is either the online encoder behind
a stop-gradient (the two share parameters) or a slow exponential moving
average copy. A small pretext head H maps representation residuals to
the augmentation targets recorded by :mod:`prelax.augment`.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from torch import nn

from . import augment

CHECKPOINT_FORMAT_VERSION = 1

TARGET_RULES = ("stop_gradient", "ema")
BACKBONES = ("mlp", "small_conv", "resnet18", "resnet34")
NORM_KINDS = ("group", "batch", "none")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings for one network set.

    ``norm`` picks the normalization layers: ``group`` (the default)
    behaves identically in train and eval mode and is independent of
    batch composition, ``batch`` uses running statistics, ``none``
    drops normalization entirely. ``head_norm`` overrides ``norm`` for
    the projector and pretext head, ``predictor_norm`` overrides both
    for the predictor. The defaults keep every module that embeddings
    and pretext readouts flow through batch-independent while the
    predictor, which only shapes training gradients, keeps the batch
    coupling that guards the alignment terms against collapse.
    """

    backbone: str = "small_conv"
    image_size: int = 32
    in_channels: int = 3
    conv_widths: tuple[int, ...] = (32, 64, 128)
    mlp_hidden: int = 64
    d_z: int = 64
    projector_hidden: Optional[int] = None
    predictor_hidden: Optional[int] = None
    pretext_hidden: Optional[int] = None
    norm: str = "group"
    head_norm: Optional[str] = None
    predictor_norm: Optional[str] = "batch"

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.head_norm is not None and self.head_norm not in NORM_KINDS:
            raise ValueError(f"head_norm must be one of {NORM_KINDS}, got {self.head_norm!r}")
        if self.predictor_norm is not None and self.predictor_norm not in NORM_KINDS:
            raise ValueError(
                f"predictor_norm must be one of {NORM_KINDS}, got {self.predictor_norm!r}"
            )
        if self.d_z < 1:
            raise ValueError(f"d_z must be positive, got {self.d_z}")
        if self.image_size < 4:
            raise ValueError(f"image_size must be at least 4, got {self.image_size}")
        if self.backbone == "small_conv" and len(self.conv_widths) != 3:
            raise ValueError(f"small_conv expects 3 stage widths, got {self.conv_widths}")

    def resolved_predictor_hidden(self) -> int:
        return self.predictor_hidden if self.predictor_hidden is not None else max(self.d_z // 4, 4)

    def resolved_pretext_hidden(self) -> int:
        return self.pretext_hidden if self.pretext_hidden is not None else self.d_z

    def resolved_head_norm(self) -> str:
        return self.head_norm if self.head_norm is not None else self.norm

    def resolved_predictor_norm(self) -> str:
        if self.predictor_norm is not None:
            return self.predictor_norm
        return self.resolved_head_norm()


def _norm_2d(kind: str, channels: int) -> list[nn.Module]:
    if kind == "batch":
        return [nn.BatchNorm2d(channels)]
    if kind == "group":
        return [nn.GroupNorm(math.gcd(8, channels), channels)]
    return []


def _norm_1d(kind: str, dim: int) -> list[nn.Module]:
    """Normalization for flat feature vectors.

    The grouped flavor uses a single group (whole-vector statistics per
    sample). Small per-channel groups on a flat vector would normalize
    pairs or singletons of scalars, which erases their values.
    """
    if kind == "batch":
        return [nn.BatchNorm1d(dim)]
    if kind == "group":
        return [nn.GroupNorm(1, dim)]
    return []


class MLPBackbone(nn.Module):
    """Two-layer perceptron over flattened pixels.

    Kept free of batch normalization so its loss surfaces stay smooth,
    which the finite-difference consistency checks rely on.
    """

    def __init__(self, image_size: int, in_channels: int, hidden: int, feature_dim: int):
        super().__init__()
        self.image_size = image_size
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        in_dim = in_channels * image_size * image_size
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, feature_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"mlp backbone expects {self.image_size}x{self.image_size} inputs, got {tuple(x.shape[-2:])}"
            )
        return self.net(x)


class SmallConvBackbone(nn.Module):
    """Three normalized conv stages with global average pooling."""

    def __init__(self, in_channels: int, widths: tuple[int, ...], norm: str = "group"):
        super().__init__()
        self.feature_dim = widths[-1]
        layers: list[nn.Module] = []
        prev = in_channels
        for i, w in enumerate(widths):
            layers.append(nn.Conv2d(prev, w, 3, padding=1, bias=False))
            layers.extend(_norm_2d(norm, w))
            layers.append(nn.ReLU(inplace=True))
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            prev = w
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _resnet_backbone(name: str, in_channels: int) -> nn.Module:
    """torchvision ResNet with a 3x3 stem and no initial pooling, headless."""
    from torchvision import models

    factory = {"resnet18": models.resnet18, "resnet34": models.resnet34}[name]
    net = factory(weights=None)
    net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    net.fc = nn.Identity()
    net.feature_dim = 512
    return net


def build_backbone(cfg: ModelConfig) -> nn.Module:
    if cfg.backbone == "mlp":
        return MLPBackbone(cfg.image_size, cfg.in_channels, cfg.mlp_hidden, cfg.mlp_hidden)
    if cfg.backbone == "small_conv":
        return SmallConvBackbone(cfg.in_channels, cfg.conv_widths, cfg.norm)
    return _resnet_backbone(cfg.backbone, cfg.in_channels)


class Encoder(nn.Module):
    """Backbone plus projection head; ``features`` exposes the pooled
    pre-projection output used for evaluation."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.backbone = build_backbone(cfg)
        feat = self.backbone.feature_dim
        if cfg.projector_hidden is None:
            self.projector = nn.Linear(feat, cfg.d_z)
        else:
            mid: list[nn.Module] = [nn.Linear(feat, cfg.projector_hidden)]
            mid.extend(_norm_1d(cfg.resolved_head_norm(), cfg.projector_hidden))
            mid += [nn.ReLU(inplace=True), nn.Linear(cfg.projector_hidden, cfg.d_z)]
            self.projector = nn.Sequential(*mid)
        self.feature_dim = feat
        self.d_z = cfg.d_z

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projector(self.backbone(x))


def _mlp_head(d_in: int, hidden: int, d_out: int, norm: str) -> nn.Sequential:
    mid: list[nn.Module] = [nn.Linear(d_in, hidden)]
    mid.extend(_norm_1d(norm, hidden))
    mid += [nn.ReLU(inplace=True), nn.Linear(hidden, d_out)]
    return nn.Sequential(*mid)


@dataclass
class PretextPrediction:
    """Logits and regression output of the pretext head."""

    discrete_logits: list[torch.Tensor]
    rotation_logits: torch.Tensor
    continuous: torch.Tensor


class PretextHead(nn.Module):
    """Maps a representation residual to augmentation-parameter targets.

    One linear block per discrete variable (sizes 2, 2, 2), a 4-way
    rotation block, and a single linear regressor for the continuous
    target vector, all sharing a one-layer trunk.
    """

    def __init__(self, d_z: int, hidden: int):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(d_z, hidden), nn.ReLU(inplace=True))
        self.discrete = nn.ModuleList(
            nn.Linear(hidden, size) for size in augment.DISCRETE_CLASS_SIZES
        )
        self.rotation = nn.Linear(hidden, augment.ROTATION_CLASSES)
        self.continuous = nn.Linear(hidden, len(augment.CONTINUOUS_FIELDS))

    def forward(self, r: torch.Tensor) -> PretextPrediction:
        h = self.trunk(r)
        return PretextPrediction(
            discrete_logits=[block(h) for block in self.discrete],
            rotation_logits=self.rotation(h),
            continuous=self.continuous(h),
        )


class NetworkSet:
    """Online encoder, predictor, pretext head and target encoder.

    Under the ``stop_gradient`` rule the target encoder *is* the online
    encoder (same module object); detachment happens at forward time.
    Under ``ema`` it is a deep copy updated by :func:`ema_update` and
    never receives gradients.
    """

    def __init__(self, cfg: ModelConfig, target_rule: str = "stop_gradient"):
        if target_rule not in TARGET_RULES:
            raise ValueError(f"target_rule must be one of {TARGET_RULES}, got {target_rule!r}")
        self.config = cfg
        self.target_rule = target_rule
        self.online_encoder = Encoder(cfg)
        self.predictor = _mlp_head(
            cfg.d_z, cfg.resolved_predictor_hidden(), cfg.d_z, cfg.resolved_predictor_norm()
        )
        self.pretext_head = PretextHead(cfg.d_z, cfg.resolved_pretext_hidden())
        if target_rule == "ema":
            self.target_encoder = copy.deepcopy(self.online_encoder)
            self.target_encoder.requires_grad_(False)
        else:
            self.target_encoder = self.online_encoder

    def trainable_modules(self) -> dict[str, nn.Module]:
        return {
            "online_encoder": self.online_encoder,
            "predictor": self.predictor,
            "pretext_head": self.pretext_head,
        }

    def named_trainable_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for prefix, module in self.trainable_modules().items():
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def train(self) -> None:
        for m in self.trainable_modules().values():
            m.train()
        self.target_encoder.train()

    def eval(self) -> None:
        for m in self.trainable_modules().values():
            m.eval()
        self.target_encoder.eval()

    def to(self, dtype: torch.dtype) -> "NetworkSet":
        for m in self.trainable_modules().values():
            m.to(dtype)
        self.target_encoder.to(dtype)
        return self


def build_networks(cfg: ModelConfig, target_rule: str = "stop_gradient") -> NetworkSet:
    return NetworkSet(cfg, target_rule)


def forward_online(net: NetworkSet, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Online pass: representation z = F(x) and prediction p = G(z)."""
    z = net.online_encoder(x)
    return z, net.predictor(z)


def forward_target(net: NetworkSet, x: torch.Tensor) -> torch.Tensor:
    """Target pass, never part of the gradient graph.

    Under ``stop_gradient`` this evaluates the online encoder itself
    (parameter aliasing), so it returns the same values as
    ``forward_online`` for the same input and mode.
    """
    with torch.no_grad():
        return net.target_encoder(x)


def residual(z_a: torch.Tensor, z_b: torch.Tensor) -> torch.Tensor:
    """Representation difference z_a - z_b."""
    if z_a.shape != z_b.shape:
        raise ValueError(f"residual operands must share a shape, got {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    return z_a - z_b


def predict_pretext(net: NetworkSet, r: torch.Tensor) -> PretextPrediction:
    return net.pretext_head(r)


def tau_schedule(step: int, total_steps: int, tau_base: float) -> float:
    """Cosine ramp of the moving-average rate from tau_base to 1.

    Exact at the endpoints: step 0 gives tau_base, step == total_steps
    gives 1.0.
    """
    if not (0.0 <= tau_base <= 1.0):
        raise ValueError(f"tau_base must lie in [0, 1], got {tau_base}")
    if total_steps < 1:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step must lie in [0, {total_steps}], got {step}")
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def ema_update(net: NetworkSet, tau: float) -> None:
    """Move target parameters toward the online ones: phi <- tau*phi + (1-tau)*theta.

    Float buffers (batch-norm running statistics) are copied from the
    online encoder; integer buffers likewise.
    """
    if net.target_rule != "ema":
        raise ValueError("ema_update requires the 'ema' target rule")
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    with torch.no_grad():
        for p_t, p_o in zip(net.target_encoder.parameters(), net.online_encoder.parameters()):
            p_t.copy_(p_t * tau + p_o * (1.0 - tau))
        for b_t, b_o in zip(net.target_encoder.buffers(), net.online_encoder.buffers()):
            b_t.copy_(b_o)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, for frozen-weight checks."""
    h = hashlib.sha256()
    for _, t in sorted(module.state_dict().items()):
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, net: NetworkSet, extra_meta: Optional[dict] = None) -> Path:
    """Write all network state to a single zip archive of float32 arrays.

    Each array is stored little-endian under ``<module>/<state key>``;
    a JSON ``meta`` member records the format version, model config and
    target rule (plus caller-supplied entries such as the train config
    and dataset channel statistics). Under the stop-gradient rule no
    separate target entries exist.
    """
    path = Path(path)
    modules = dict(net.trainable_modules())
    if net.target_rule == "ema":
        modules["target_encoder"] = net.target_encoder
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "target_rule": net.target_rule,
        "model_config": asdict(net.config),
        "state_dtypes": {},
    }
    if extra_meta:
        meta.update(extra_meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for prefix, module in modules.items():
            for key, tensor in module.state_dict().items():
                arr = tensor.detach().cpu().numpy()
                meta["state_dtypes"][f"{prefix}/{key}"] = str(arr.dtype)
                buf = io.BytesIO()
                np.save(buf, arr.astype("<f4"))
                zf.writestr(f"{prefix}/{key}.npy", buf.getvalue())
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[NetworkSet, dict]:
    """Rebuild a network set from :func:`save_checkpoint` output.

    Returns the networks and the stored metadata dict. Arrays are cast
    back to the dtypes recorded at save time.
    """
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ValueError(f"{path} is not a checkpoint archive: {exc}") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        version = meta.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version!r} in {path}")
        mc = dict(meta["model_config"])
        mc["conv_widths"] = tuple(mc["conv_widths"])
        cfg = ModelConfig(**mc)
        net = build_networks(cfg, meta["target_rule"])
        modules = dict(net.trainable_modules())
        if net.target_rule == "ema":
            modules["target_encoder"] = net.target_encoder
        dtypes = meta["state_dtypes"]
        for prefix, module in modules.items():
            state = {}
            for key, tensor in module.state_dict().items():
                full = f"{prefix}/{key}"
                arr = np.load(io.BytesIO(zf.read(f"{full}.npy")))
                state[key] = torch.from_numpy(arr.astype(dtypes[full])).reshape(tensor.shape)
            module.load_state_dict(state)
    return net, meta
