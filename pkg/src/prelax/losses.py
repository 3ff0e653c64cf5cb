"""Alignment objectives over view bundles.

The building blocks are a negative-cosine similarity written as a
squared distance between unit vectors, its residual-relaxed form (the
prediction may spend a budget of ``alpha`` times the predicted residual
before being compared to the target), pretext-parameter prediction
losses on residuals, and a margin variant of the similarity. Composite
objectives assemble these per training variant and report a
:class:`LossBreakdown` whose ``total`` stays attached to the autograd
graph while the per-term values are plain floats for logging.

Targets are always detached inside the losses; gradients flow only
through predictions and residuals.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import torch
import torch.nn.functional as F

from .model import NetworkSet, forward_online, forward_target, predict_pretext, residual

logger = logging.getLogger(__name__)

TERM_NAMES = ("sim", "r2s", "r3s", "pl_ce", "pl_mse", "rotpl")
NORMALIZATION_MODES = ("composite", "endpoints_only", "none")
ABLATION_TOGGLES = ("sim", "pl", "r2s", "r3s", "rotpl")

_DEGENERATE_EPS = 1e-12

# Test hook: names of deliberately injected faults, see inject_fault().
_ACTIVE_FAULT: Optional[str] = None
KNOWN_FAULTS = ("r2s_sign",)


@contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Deliberately corrupt one loss computation while the context is live.

    Exists so the self-check suite can demonstrate that it catches a
    seeded defect; never use outside of diagnostics.
    """
    global _ACTIVE_FAULT
    if name not in KNOWN_FAULTS:
        raise ValueError(f"unknown fault {name!r}, known: {KNOWN_FAULTS}")
    _ACTIVE_FAULT = name
    try:
        yield
    finally:
        _ACTIVE_FAULT = None


@dataclass
class LossBreakdown:
    """Per-term values of one objective evaluation.

    ``total`` is a scalar tensor carrying the autograd graph. Term
    fields hold the unweighted per-term values; ``weights`` holds the
    effective multiplier each active term enters the total with, and
    ``coefficients`` echoes the configured hyperparameters. Inactive
    terms are exactly 0 and absent from ``active``. ``residual_norm``
    is the batch-mean Euclidean norm of the residual(s) the variant
    uses, 0.0 for variants without one.
    """

    total: torch.Tensor
    sim: float = 0.0
    r2s: float = 0.0
    r3s: float = 0.0
    pl_ce: float = 0.0
    pl_mse: float = 0.0
    rotpl: float = 0.0
    active: tuple[str, ...] = ()
    weights: dict = field(default_factory=dict)
    coefficients: dict = field(default_factory=dict)
    residual_norm: float = 0.0

    def recombined(self) -> float:
        """Weighted sum of the active terms; matches ``total`` closely."""
        return sum(self.weights[name] * getattr(self, name) for name in self.active)

    def as_dict(self) -> dict:
        d = {name: getattr(self, name) for name in TERM_NAMES}
        d["total"] = float(self.total.detach())
        d["active"] = list(self.active)
        d["coefficients"] = dict(self.coefficients)
        d["residual_norm"] = self.residual_norm
        return d


def _as_batch(v: torch.Tensor) -> torch.Tensor:
    if v.dim() == 1:
        return v.unsqueeze(0)
    if v.dim() == 2:
        return v
    raise ValueError(f"expected a vector or a batch of vectors, got shape {tuple(v.shape)}")


def normalize_with_flag(v: torch.Tensor, eps: float = _DEGENERATE_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-normalize to unit length, leaving near-zero rows unchanged.

    Returns the normalized tensor and a boolean mask of degenerate rows
    (norm below ``eps``) that were passed through untouched.
    """
    norms = v.norm(dim=-1, keepdim=True)
    degenerate = norms < eps
    safe = torch.where(degenerate, torch.ones_like(norms), norms)
    return v / safe, degenerate.squeeze(-1)


def normalize(v: torch.Tensor) -> torch.Tensor:
    return normalize_with_flag(v)[0]


def sim_loss(p: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    """Squared distance between unit-normalized prediction and target.

    Equals 2 - 2 cos(p, z) per sample, so it lives in [0, 4]; the
    target is detached and the batch mean is returned.
    """
    p = _as_batch(p)
    z = _as_batch(z_target).detach()
    d = normalize(p) - normalize(z)
    return (d * d).sum(dim=-1).mean()


def r2s_loss(
    p: torch.Tensor,
    g_r: torch.Tensor,
    z_target: torch.Tensor,
    alpha: float,
    normalization_mode: str = "composite",
) -> torch.Tensor:
    """Residual-relaxed similarity.

    The prediction is granted an offset of ``alpha`` times the predicted
    residual ``g_r`` before being compared to the target:

    * ``composite`` (default): normalize(p - alpha*g_r) against normalize(z);
    * ``endpoints_only``: normalize p and z but leave the offset raw;
    * ``none``: raw squared distance without any normalization.

    With ``alpha == 0`` both normalizing modes reduce exactly to
    ``sim_loss``; ``none`` stays a raw distance.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if normalization_mode not in NORMALIZATION_MODES:
        raise ValueError(f"normalization_mode must be one of {NORMALIZATION_MODES}, got {normalization_mode!r}")
    p = _as_batch(p)
    g_r = _as_batch(g_r)
    z = _as_batch(z_target).detach()
    if _ACTIVE_FAULT == "r2s_sign":
        g_r = -g_r
    if normalization_mode == "composite":
        d = normalize(p - alpha * g_r) - normalize(z)
    elif normalization_mode == "endpoints_only":
        d = normalize(p) - alpha * g_r - normalize(z)
    else:
        d = p - alpha * g_r - z
    return (d * d).sum(dim=-1).mean()


def pl_loss(
    discrete_logits: Sequence[torch.Tensor],
    continuous_pred: torch.Tensor,
    discrete_targets: torch.Tensor,
    continuous_targets: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pretext-parameter prediction loss.

    Cross entropy summed over the discrete variables plus squared error
    over the continuous target vector, each averaged over the batch.
    Returns the two parts separately.
    """
    discrete_targets = _as_batch(discrete_targets) if discrete_targets.dim() == 1 else discrete_targets
    if len(discrete_logits) != discrete_targets.shape[-1]:
        raise ValueError(
            f"got {len(discrete_logits)} logit blocks for {discrete_targets.shape[-1]} discrete targets"
        )
    ce = continuous_pred.new_zeros(())
    for i, logits in enumerate(discrete_logits):
        t = discrete_targets[:, i]
        if t.min() < 0 or t.max() >= logits.shape[-1]:
            raise ValueError(
                f"discrete target {i} out of range [0, {logits.shape[-1]}): {t.min().item()}..{t.max().item()}"
            )
        ce = ce + F.cross_entropy(logits, t)
    diff = continuous_pred - continuous_targets.to(continuous_pred.dtype).detach()
    mse = (diff * diff).sum(dim=-1).mean()
    return ce, mse


def rotpl_loss(rotation_logits: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Cross entropy on the 4-way rotation label."""
    if angles.min() < 0 or angles.max() >= rotation_logits.shape[-1]:
        raise ValueError(
            f"rotation label out of range [0, {rotation_logits.shape[-1]}): {angles.min().item()}..{angles.max().item()}"
        )
    return F.cross_entropy(rotation_logits, angles)


def margin_loss(p: torch.Tensor, z_target: torch.Tensor, eta: float) -> torch.Tensor:
    """Similarity loss that only bites above a slack of ``eta``.

    Per sample: max(sim - eta, 0); zero gradient once a pair is within
    the margin.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    p = _as_batch(p)
    z = _as_batch(z_target).detach()
    d = normalize(p) - normalize(z)
    per_sample = (d * d).sum(dim=-1)
    return torch.clamp(per_sample - eta, min=0.0).mean()


@dataclass
class BundleBatch:
    """Collated tensors of a batch of view bundles."""

    x1: torch.Tensor
    x2: torch.Tensor
    t1_discrete: torch.Tensor
    t1_continuous: torch.Tensor
    t2_discrete: torch.Tensor
    t2_continuous: torch.Tensor
    x3: Optional[torch.Tensor] = None
    rotation: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if (self.x3 is None) != (self.rotation is None):
            raise ValueError("x3 and rotation must be provided together")

    def require_rotation(self, who: str) -> None:
        if self.x3 is None:
            raise ValueError(f"{who} needs bundles with a rotation view")


class _Pass:
    """Shared forward pass for the composite objectives.

    Online views are encoded lazily and cached; targets come from
    ``z.detach()`` under the stop-gradient rule (value-identical to a
    second forward of the shared encoder) and from the target encoder
    otherwise.
    """

    def __init__(self, net: NetworkSet, batch: BundleBatch):
        self.net = net
        self.batch = batch
        self._z: dict[str, torch.Tensor] = {}
        self._p: dict[str, torch.Tensor] = {}
        self._t: dict[str, torch.Tensor] = {}

    def _view(self, name: str) -> torch.Tensor:
        x = getattr(self.batch, name)
        if x is None:
            raise ValueError(f"batch has no view {name}")
        return x

    def online(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        if name not in self._z:
            z, p = forward_online(self.net, self._view(name))
            self._z[name] = z
            self._p[name] = p
        return self._z[name], self._p[name]

    def target(self, name: str) -> torch.Tensor:
        if name not in self._t:
            if self.net.target_rule == "stop_gradient":
                self._t[name] = self.online(name)[0].detach()
            else:
                self._t[name] = forward_target(self.net, self._view(name))
        return self._t[name]


def _residual_between(p: _Pass, a: str, b: str) -> torch.Tensor:
    return residual(p.online(a)[0], p.online(b)[0])


def _mean_norm(r: torch.Tensor) -> float:
    return float(r.detach().norm(dim=-1).mean())


def simsiam_dual(net: NetworkSet, batch: BundleBatch) -> LossBreakdown:
    """Symmetric two-view alignment, both directions through sim_loss."""
    run = _Pass(net, batch)
    _, p1 = run.online("x1")
    _, p2 = run.online("x2")
    loss = sim_loss(p1, run.target("x2")) + sim_loss(p2, run.target("x1"))
    return LossBreakdown(
        total=loss,
        sim=float(loss.detach()),
        active=("sim",),
        weights={"sim": 1.0},
        coefficients={},
    )


def margin_dual(net: NetworkSet, batch: BundleBatch, eta: float) -> LossBreakdown:
    """Symmetric two-view alignment through the margin loss.

    Reported under the ``sim`` slot since it is the variant's (relaxed)
    similarity term.
    """
    run = _Pass(net, batch)
    _, p1 = run.online("x1")
    _, p2 = run.online("x2")
    loss = margin_loss(p1, run.target("x2"), eta) + margin_loss(p2, run.target("x1"), eta)
    return LossBreakdown(
        total=loss,
        sim=float(loss.detach()),
        active=("sim",),
        weights={"sim": 1.0},
        coefficients={"eta": eta},
    )


def _pl_on_residual(
    net: NetworkSet,
    r: torch.Tensor,
    discrete: torch.Tensor,
    continuous: torch.Tensor,
    detach_residual: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    r_in = r.detach() if detach_residual else r
    pred = predict_pretext(net, r_in)
    return pl_loss(pred.discrete_logits, pred.continuous, discrete, continuous)


def prelax_std(
    net: NetworkSet,
    batch: BundleBatch,
    alpha: float = 1.0,
    beta: float = 1.0,
    gamma: float = 0.1,
    reverse_residual: bool = False,
    normalization_mode: str = "composite",
    detach_residual_for_pl: bool = False,
    symmetrize: bool = False,
) -> LossBreakdown:
    """Two-view objective with a residual-relaxed forward direction.

    The first view's prediction is relaxed by the predicted residual
    between the views, the residual additionally feeds the pretext
    losses (always against the first view's targets), and the second
    view is aligned plainly. ``reverse_residual`` flips the residual's
    sign convention. With ``symmetrize`` the mirrored assignment of the
    two views is averaged in.
    """
    _check_coeffs(beta=beta, gamma=gamma)
    run = _Pass(net, batch)

    def one_direction(a: str, b: str, t_disc: torch.Tensor, t_cont: torch.Tensor):
        z_a, p_a = run.online(a)
        z_b, p_b = run.online(b)
        r = residual(z_b, z_a) if reverse_residual else residual(z_a, z_b)
        g_r = net.predictor(r)
        l_r2s = r2s_loss(p_a, g_r, run.target(b), alpha, normalization_mode)
        l_ce, l_mse = _pl_on_residual(net, r, t_disc, t_cont, detach_residual_for_pl)
        l_sim = sim_loss(p_b, run.target(a))
        return l_r2s, l_ce, l_mse, l_sim, _mean_norm(r)

    parts = [one_direction("x1", "x2", batch.t1_discrete, batch.t1_continuous)]
    if symmetrize:
        parts.append(one_direction("x2", "x1", batch.t2_discrete, batch.t2_continuous))
    n = len(parts)
    l_r2s = sum(p[0] for p in parts) / n
    l_ce = sum(p[1] for p in parts) / n
    l_mse = sum(p[2] for p in parts) / n
    l_sim = sum(p[3] for p in parts) / n
    total = l_r2s + gamma * (l_ce + l_mse) + beta * l_sim
    return LossBreakdown(
        total=total,
        sim=float(l_sim.detach()),
        r2s=float(l_r2s.detach()),
        pl_ce=float(l_ce.detach()),
        pl_mse=float(l_mse.detach()),
        active=("sim", "r2s", "pl_ce", "pl_mse"),
        weights={"sim": beta, "r2s": 1.0, "pl_ce": gamma, "pl_mse": gamma},
        coefficients={"alpha": alpha, "beta": beta, "gamma": gamma},
        residual_norm=sum(p[4] for p in parts) / n,
    )


def prelax_rot(
    net: NetworkSet,
    batch: BundleBatch,
    alpha: float = 1.0,
    beta: float = 1.0,
    gamma: float = 0.1,
    normalization_mode: str = "composite",
    detach_residual_for_pl: bool = False,
) -> LossBreakdown:
    """Rotation-view objective.

    The rotated view's prediction is relaxed by the predicted residual
    against the unrotated first view, the same residual feeds the
    rotation classifier, and the second view is aligned plainly.
    """
    _check_coeffs(beta=beta, gamma=gamma)
    batch.require_rotation("prelax_rot")
    run = _Pass(net, batch)
    z1, _ = run.online("x1")
    z3, p3 = run.online("x3")
    _, p2 = run.online("x2")
    r31 = residual(z3, z1)
    g_r = net.predictor(r31)
    l_r3s = r2s_loss(p3, g_r, run.target("x2"), alpha, normalization_mode)
    r_in = r31.detach() if detach_residual_for_pl else r31
    l_rot = rotpl_loss(predict_pretext(net, r_in).rotation_logits, batch.rotation)
    l_sim = sim_loss(p2, run.target("x1"))
    total = l_r3s + gamma * l_rot + beta * l_sim
    return LossBreakdown(
        total=total,
        sim=float(l_sim.detach()),
        r3s=float(l_r3s.detach()),
        rotpl=float(l_rot.detach()),
        active=("sim", "r3s", "rotpl"),
        weights={"sim": beta, "r3s": 1.0, "rotpl": gamma},
        coefficients={"alpha": alpha, "beta": beta, "gamma": gamma},
        residual_norm=_mean_norm(r31),
    )


def prelax_all(
    net: NetworkSet,
    batch: BundleBatch,
    alpha1: float = 1.0,
    alpha2: float = 1.0,
    beta: float = 1.0,
    gamma1: float = 0.1,
    gamma2: float = 0.1,
    reverse_residual: bool = False,
    normalization_mode: str = "composite",
    detach_residual_for_pl: bool = False,
) -> LossBreakdown:
    """Combined objective: both relaxation routes at half weight each.

    The two-view relaxation (with its pretext losses scaled by
    ``gamma1/2``) and the rotation relaxation (classifier scaled by
    ``gamma2/2``) are averaged, and the plain alignment of the second
    view is kept at full weight ``beta``.
    """
    _check_coeffs(beta=beta, gamma=gamma1, gamma2=gamma2)
    batch.require_rotation("prelax_all")
    run = _Pass(net, batch)
    z1, p1 = run.online("x1")
    z2, p2 = run.online("x2")
    z3, p3 = run.online("x3")
    t2 = run.target("x2")

    r12 = residual(z2, z1) if reverse_residual else residual(z1, z2)
    l_r2s = r2s_loss(p1, net.predictor(r12), t2, alpha1, normalization_mode)
    l_ce, l_mse = _pl_on_residual(
        net, r12, batch.t1_discrete, batch.t1_continuous, detach_residual_for_pl
    )

    r31 = residual(z3, z1)
    l_r3s = r2s_loss(p3, net.predictor(r31), t2, alpha2, normalization_mode)
    r31_in = r31.detach() if detach_residual_for_pl else r31
    l_rot = rotpl_loss(predict_pretext(net, r31_in).rotation_logits, batch.rotation)

    l_sim = sim_loss(p2, run.target("x1"))
    total = (
        0.5 * (l_r2s + l_r3s)
        + 0.5 * gamma1 * (l_ce + l_mse)
        + 0.5 * gamma2 * l_rot
        + beta * l_sim
    )
    return LossBreakdown(
        total=total,
        sim=float(l_sim.detach()),
        r2s=float(l_r2s.detach()),
        r3s=float(l_r3s.detach()),
        pl_ce=float(l_ce.detach()),
        pl_mse=float(l_mse.detach()),
        rotpl=float(l_rot.detach()),
        active=("sim", "r2s", "r3s", "pl_ce", "pl_mse", "rotpl"),
        weights={
            "sim": beta,
            "r2s": 0.5,
            "r3s": 0.5,
            "pl_ce": 0.5 * gamma1,
            "pl_mse": 0.5 * gamma1,
            "rotpl": 0.5 * gamma2,
        },
        coefficients={
            "alpha1": alpha1,
            "alpha2": alpha2,
            "beta": beta,
            "gamma1": gamma1,
            "gamma2": gamma2,
        },
        residual_norm=(_mean_norm(r12) + _mean_norm(r31)) / 2.0,
    )


def ablation_compose(
    net: NetworkSet,
    batch: BundleBatch,
    toggles: Sequence[str],
    alpha: float = 1.0,
    alpha2: float = 1.0,
    beta: float = 1.0,
    gamma: float = 0.1,
    gamma2: float = 0.1,
    reverse_residual: bool = False,
    normalization_mode: str = "composite",
    detach_residual_for_pl: bool = False,
) -> LossBreakdown:
    """Assemble an objective from individually toggled terms.

    Toggles come from {sim, pl, r2s, r3s, rotpl}. When a relaxation
    term (r2s or r3s) is active the similarity runs in the single
    reverse direction (second view against the first), otherwise it is
    the symmetric dual. Term combinations without any similarity are
    accepted but logged, since nothing then anchors the two views.
    """
    toggles = tuple(dict.fromkeys(toggles))
    if not toggles:
        raise ValueError("at least one loss toggle is required")
    unknown = [t for t in toggles if t not in ABLATION_TOGGLES]
    if unknown:
        raise ValueError(f"unknown toggles {unknown}, known: {ABLATION_TOGGLES}")
    if ("r3s" in toggles or "rotpl" in toggles) and batch.x3 is None:
        raise ValueError("r3s/rotpl toggles need bundles with a rotation view")
    if "sim" not in toggles:
        logger.warning("ablation %s has no similarity constraint; views are unanchored", toggles)

    run = _Pass(net, batch)
    relaxed = "r2s" in toggles or "r3s" in toggles
    terms: dict[str, torch.Tensor] = {}
    weights: dict[str, float] = {}
    norms: list[float] = []

    if "r2s" in toggles or "pl" in toggles:
        z1, p1 = run.online("x1")
        z2, _ = run.online("x2")
        r12 = residual(z2, z1) if reverse_residual else residual(z1, z2)
        if "r2s" in toggles:
            terms["r2s"] = r2s_loss(p1, net.predictor(r12), run.target("x2"), alpha, normalization_mode)
            weights["r2s"] = 1.0
            norms.append(_mean_norm(r12))
        if "pl" in toggles:
            l_ce, l_mse = _pl_on_residual(
                net, r12, batch.t1_discrete, batch.t1_continuous, detach_residual_for_pl
            )
            terms["pl_ce"] = l_ce
            terms["pl_mse"] = l_mse
            weights["pl_ce"] = gamma
            weights["pl_mse"] = gamma
            if "r2s" not in toggles:
                norms.append(_mean_norm(r12))

    if "r3s" in toggles or "rotpl" in toggles:
        z1, _ = run.online("x1")
        z3, p3 = run.online("x3")
        r31 = residual(z3, z1)
        if "r3s" in toggles:
            terms["r3s"] = r2s_loss(p3, net.predictor(r31), run.target("x2"), alpha2, normalization_mode)
            weights["r3s"] = 1.0
        if "rotpl" in toggles:
            r_in = r31.detach() if detach_residual_for_pl else r31
            terms["rotpl"] = rotpl_loss(predict_pretext(net, r_in).rotation_logits, batch.rotation)
            weights["rotpl"] = gamma2
        norms.append(_mean_norm(r31))

    if "sim" in toggles:
        _, p2 = run.online("x2")
        if relaxed:
            terms["sim"] = sim_loss(p2, run.target("x1"))
            weights["sim"] = beta
        else:
            _, p1 = run.online("x1")
            terms["sim"] = sim_loss(p1, run.target("x2")) + sim_loss(p2, run.target("x1"))
            weights["sim"] = 1.0

    total = sum(weights[k] * terms[k] for k in terms)
    bd = LossBreakdown(
        total=total,
        active=tuple(k for k in TERM_NAMES if k in terms),
        weights=weights,
        coefficients={
            "alpha": alpha,
            "alpha2": alpha2,
            "beta": beta,
            "gamma": gamma,
            "gamma2": gamma2,
        },
        residual_norm=sum(norms) / len(norms) if norms else 0.0,
    )
    for k, v in terms.items():
        setattr(bd, k, float(v.detach()))
    return bd


def _check_coeffs(beta: float, gamma: float, gamma2: Optional[float] = None) -> None:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if gamma2 is not None and gamma2 < 0:
        raise ValueError(f"gamma2 must be >= 0, got {gamma2}")
