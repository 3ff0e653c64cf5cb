"""Self-contained correctness checks for the loss and target machinery.

Each check returns a :class:`CheckResult` and is built around an
independent reference: closed-form reductions, central finite
differences, or an exactly replayed recurrence. The CLI ``check``
command runs them all; the test suite calls them with pinned
tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from . import losses, model, trainer


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _tiny_config() -> model.ModelConfig:
    """The smallest differentiable-everywhere network set.

    Two-layer perceptron backbone on 8x8 inputs, 8-dimensional
    representation, no batch norm anywhere.
    """
    return model.ModelConfig(
        backbone="mlp",
        image_size=8,
        mlp_hidden=12,
        d_z=8,
        projector_hidden=None,
        predictor_hidden=4,
        pretext_hidden=8,
        norm="none",
    )


def _tiny_batch(rng: np.random.Generator, with_rotation: bool, batch: int = 4) -> losses.BundleBatch:
    def img() -> torch.Tensor:
        return torch.from_numpy(rng.random((batch, 3, 8, 8))).double()

    return losses.BundleBatch(
        x1=img(),
        x2=img(),
        t1_discrete=torch.from_numpy(rng.integers(0, 2, (batch, 3))),
        t1_continuous=torch.from_numpy(rng.random((batch, 8))).double(),
        t2_discrete=torch.from_numpy(rng.integers(0, 2, (batch, 3))),
        t2_continuous=torch.from_numpy(rng.random((batch, 8))).double(),
        x3=img() if with_rotation else None,
        rotation=torch.from_numpy(rng.integers(0, 4, (batch,))) if with_rotation else None,
    )


def check_reduction_identity(trials: int = 1000, dim: int = 64, tol: float = 1e-9, seed: int = 0) -> CheckResult:
    """r2s at alpha=0 must agree with the plain similarity, triple by triple."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = torch.from_numpy(rng.standard_normal(dim))
        g = torch.from_numpy(rng.standard_normal(dim))
        z = torch.from_numpy(rng.standard_normal(dim))
        diff = abs(float(losses.r2s_loss(p, g, z, 0.0)) - float(losses.sim_loss(p, z)))
        worst = max(worst, diff)
    return CheckResult(
        name="r2s-reduction-identity",
        passed=worst <= tol,
        detail=f"max |r2s(alpha=0) - sim| = {worst:.3e} over {trials} triples (tol {tol:.0e})",
    )


def check_representation_identity(trials: int = 1000, dim: int = 64, tol: float = 1e-9, seed: int = 1) -> CheckResult:
    """With an identity predictor and alpha=1 the relaxed loss vanishes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        z_prime = torch.from_numpy(rng.standard_normal(dim))
        z = torch.from_numpy(rng.standard_normal(dim))
        worst = max(worst, abs(float(losses.r2s_loss(z_prime, z_prime - z, z, 1.0))))
    return CheckResult(
        name="r2s-representation-identity",
        passed=worst <= tol,
        detail=f"max r2s(z', z'-z, z; alpha=1) = {worst:.3e} over {trials} pairs (tol {tol:.0e})",
    )


def _objectives() -> dict[str, Callable[[model.NetworkSet, losses.BundleBatch], losses.LossBreakdown]]:
    return {
        "prelax_std": lambda net, b: losses.prelax_std(net, b, alpha=0.7, beta=1.0, gamma=0.1),
        "prelax_rot": lambda net, b: losses.prelax_rot(net, b, alpha=0.7, beta=1.0, gamma=0.1),
        "prelax_all": lambda net, b: losses.prelax_all(net, b, alpha1=0.7, alpha2=1.0, beta=1.0),
        "simsiam_dual": losses.simsiam_dual,
        "margin_loss": lambda net, b: losses.margin_dual(net, b, eta=0.5),
    }


def check_gradient_consistency(
    step: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    objectives: Optional[list[str]] = None,
) -> CheckResult:
    """Analytic gradients against central finite differences.

    Runs every composite objective on the tiny double-precision network
    and compares each parameter's autograd gradient with
    (f(w+h) - f(w-h)) / 2h elementwise. Relative error is measured
    against max(|analytic|, |numeric|, 1e-6).

    The networks are built under the ema rule with the target copy left
    untouched, so the targets are true constants of the optimization.
    The values and analytic gradients are then identical to the
    stop-gradient case (the fresh copy aliases the online values), but
    the finite differences do not pick up derivative mass through the
    target branch, which by construction carries none.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    details = []
    worst_overall = 0.0
    selected = _objectives()
    if objectives is not None:
        selected = {k: v for k, v in selected.items() if k in objectives}
    for name, fn in selected.items():
        net = model.build_networks(_tiny_config(), target_rule="ema").to(torch.float64)
        batch = _tiny_batch(rng, with_rotation=(name in ("prelax_rot", "prelax_all")))
        params = [p for _, p in net.named_trainable_parameters()]

        def value() -> float:
            return float(fn(net, batch).total.detach())

        total = fn(net, batch).total
        analytic = torch.autograd.grad(total, params, allow_unused=True)
        worst = 0.0
        largest = 0.0
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.detach().reshape(-1)
            gflat = g.reshape(-1)
            largest = max(largest, float(g.abs().max()))
            for i in range(flat.numel()):
                orig = float(flat[i])
                with torch.no_grad():
                    flat[i] = orig + step
                f_plus = value()
                with torch.no_grad():
                    flat[i] = orig - step
                f_minus = value()
                with torch.no_grad():
                    flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                denom = max(abs(float(gflat[i])), abs(numeric), 1e-6)
                worst = max(worst, abs(float(gflat[i]) - numeric) / denom)
        if largest == 0.0:
            return CheckResult(
                name="gradient-consistency",
                passed=False,
                detail=f"{name} produced an all-zero analytic gradient; the comparison is vacuous",
            )
        details.append(f"{name}={worst:.2e}")
        worst_overall = max(worst_overall, worst)
    return CheckResult(
        name="gradient-consistency",
        passed=worst_overall <= tol,
        detail=f"max relative error {worst_overall:.3e} (tol {tol:.0e}); " + ", ".join(details),
    )


def check_target_detachment(steps: int = 10, seed: int = 3) -> CheckResult:
    """Target paths carry no gradient and the EMA recurrence is exact.

    Trains the tiny network for ``steps`` optimizer steps under both
    target rules. Under stop-gradient the target outputs must be
    outside the autograd graph; under ema the target parameters must
    equal an independently replayed phi <- tau*phi + (1-tau)*theta
    using the recorded online snapshots, bit for bit, and the schedule
    endpoints must be 0.996 and 1.0 exactly.
    """
    rng = np.random.default_rng(seed)
    problems = []

    # stop-gradient rule: targets never enter the graph
    torch.manual_seed(seed)
    net = model.build_networks(_tiny_config()).to(torch.float64)
    opt = trainer.SGD(list(net.named_trainable_parameters()), momentum=0.9, weight_decay=1e-4)
    for k in range(steps):
        batch = _tiny_batch(rng, with_rotation=False)
        run = losses._Pass(net, batch)
        t1 = run.target("x1")
        t2 = run.target("x2")
        if t1.requires_grad or t1.grad_fn is not None or t2.requires_grad or t2.grad_fn is not None:
            problems.append(f"stop-gradient target entered the graph at step {k}")
            break
        bd = losses.prelax_std(net, batch)
        opt.zero_grad()
        bd.total.backward()
        opt.step(0.05)
    if net.target_encoder is not net.online_encoder:
        problems.append("stop-gradient target encoder is a separate copy")

    # ema rule: exact recurrence against recorded snapshots
    torch.manual_seed(seed + 1)
    net2 = model.build_networks(_tiny_config(), target_rule="ema").to(torch.float64)
    opt2 = trainer.SGD(list(net2.named_trainable_parameters()), momentum=0.9, weight_decay=0.0)
    reference = [p.detach().clone() for p in net2.target_encoder.parameters()]
    for k in range(steps):
        batch = _tiny_batch(rng, with_rotation=False)
        bd = losses.simsiam_dual(net2, batch)
        opt2.zero_grad()
        bd.total.backward()
        if any(p.grad is not None for p in net2.target_encoder.parameters()):
            problems.append(f"ema target received a gradient at step {k}")
            break
        opt2.step(0.05)
        tau = model.tau_schedule(k, steps, 0.996)
        model.ema_update(net2, tau)
        with torch.no_grad():
            for ref, online in zip(reference, net2.online_encoder.parameters()):
                ref.copy_(ref * tau + online.detach() * (1.0 - tau))
    for ref, actual in zip(reference, net2.target_encoder.parameters()):
        if not torch.equal(ref, actual.detach()):
            problems.append("ema parameters deviate from the exact recurrence")
            break

    if model.tau_schedule(0, 100, 0.996) != 0.996:
        problems.append("tau_schedule(0) is not 0.996")
    if model.tau_schedule(100, 100, 0.996) != 1.0:
        problems.append("tau_schedule(total) is not 1.0")

    return CheckResult(
        name="target-detachment-ema",
        passed=not problems,
        detail="; ".join(problems) if problems else f"clean over {steps} steps under both rules",
    )


def check_rotation_group(trials: int = 50, seed: int = 4) -> CheckResult:
    """Quarter-turn rotations compose additively modulo 4."""
    from . import augment

    rng = np.random.default_rng(seed)
    for t in range(trials):
        img = rng.random((3, 8, 8)).astype(np.float32)
        k1 = int(rng.integers(4))
        k2 = int(rng.integers(4))
        lhs = augment.rotate90(augment.rotate90(img, k1), k2)
        rhs = augment.rotate90(img, (k1 + k2) % 4)
        if not np.array_equal(lhs, rhs):
            return CheckResult("rotation-group", False, f"composition failed for k1={k1}, k2={k2}")
    return CheckResult("rotation-group", True, f"composition exact over {trials} trials")


def run_all_checks(fast: bool = False) -> list[CheckResult]:
    """Run the whole suite; ``fast`` shrinks the gradient check."""
    grad_kwargs = {"objectives": ["prelax_std"]} if fast else {}
    return [
        check_reduction_identity(),
        check_representation_identity(),
        check_rotation_group(),
        check_target_detachment(),
        check_gradient_consistency(**grad_kwargs),
    ]
