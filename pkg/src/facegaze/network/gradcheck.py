"""Finite-difference verification of the analytic gradients.

For every parameter group a random subset of entries is perturbed and the
central difference of the loss is compared against the analytic gradient.

With all ReLU masks, pool argmax choices, and L1 signs frozen, the loss is
affine in any single parameter, so a valid central difference must be taken
on a kink-free interval: whenever the activation pattern differs between the
+eps and -eps evaluations, the step is shrunk (and the entry resampled if a
clean interval cannot be found).

The weight-map branch parameters carry a deliberate 1/N scaling (N = number
of feature channels entering the spatial weights stage), so their analytic
gradients are multiplied by N before comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Network
from .training import l1_loss

KINK_TOL = 1e-6


def _quadratic_loss(pred: np.ndarray, target: np.ndarray):
    d = pred - target
    loss = float((d**2).sum(axis=1).mean())
    grad = 2.0 * d / d.shape[0]
    return loss, grad


_LOSSES = {"l1": l1_loss, "quadratic": _quadratic_loss}


@dataclass
class GroupReport:
    name: str
    checked: int
    skipped: int  # entries with no kink-free interval found
    max_rel_error: float
    max_abs_error: float
    scale: float  # factor applied to the analytic gradient before comparing


@dataclass
class GradCheckReport:
    groups: list[GroupReport]

    @property
    def max_rel_error(self) -> float:
        return max(g.max_rel_error for g in self.groups)

    def by_name(self) -> dict[str, GroupReport]:
        return {g.name: g for g in self.groups}

    def __str__(self) -> str:
        lines = [
            f"{g.name:14s} checked {g.checked:4d}  scale {g.scale:g}  "
            f"max rel {g.max_rel_error:.3e}  max abs {g.max_abs_error:.3e}"
            for g in self.groups
        ]
        lines.append(f"overall max relative error: {self.max_rel_error:.3e}")
        return "\n".join(lines)


def _patterns_equal(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _loss_and_pattern(net, loss_fn, batch, target):
    pred = net.forward(batch)
    loss, _ = loss_fn(pred, target)
    pattern = net.activation_pattern()
    pattern.append(np.sign(pred - target))
    return loss, pattern


def grad_check(
    net: Network,
    sample,
    epsilon: float = 1e-4,
    loss: str = "l1",
    max_per_group: int = 12,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``sample`` is an (input, target) pair for a single example.  The loss
    must be evaluated away from an L1 kink; callers should resample the
    target if any |pred - target| < 1e-6.
    """
    loss_fn = _LOSSES[loss]
    if rng is None:
        rng = np.random.default_rng(0)
    x, target = sample
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        batch = x[None, None]
    elif x.ndim == 3:
        batch = x[None] if x.shape[0] == net.config.input_channels else x[:, None]
    else:
        batch = x
    target = np.asarray(target, dtype=float).reshape(1, 2)

    pred = net.forward(batch)
    if loss == "l1" and np.any(np.abs(pred - target) < KINK_TOL):
        raise ValueError("loss sits at an L1 kink; resample the target")
    _, dpred = loss_fn(pred, target)
    analytic = net.backward(dpred)

    n_channels = net.config.conv[-1].channels
    reports = []
    for name in sorted(net.params):
        param = net.params[name]
        grad = analytic[name]
        scale = float(n_channels) if name.startswith("sw") else 1.0
        size = param.size
        candidates = rng.permutation(size) if size > max_per_group else np.arange(size)
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        checked = 0
        skipped = 0
        max_rel = 0.0
        max_abs = 0.0
        for i in candidates:
            if checked >= max_per_group:
                break
            fd = None
            eps = epsilon
            for _ in range(6):
                orig = flat[i]
                flat[i] = orig + eps
                up, up_pat = _loss_and_pattern(net, loss_fn, batch, target)
                flat[i] = orig - eps
                down, down_pat = _loss_and_pattern(net, loss_fn, batch, target)
                flat[i] = orig
                if _patterns_equal(up_pat, down_pat):
                    fd = (up - down) / (2.0 * eps)
                    break
                eps /= 8.0
            if fd is None:
                skipped += 1
                continue
            a = gflat[i] * scale
            abs_err = abs(a - fd)
            rel = abs_err / max(abs(a), abs(fd), 1e-8)
            max_rel = max(max_rel, rel)
            max_abs = max(max_abs, abs_err)
            checked += 1
        reports.append(GroupReport(name, checked, skipped, max_rel, max_abs, scale))
    return GradCheckReport(reports)
