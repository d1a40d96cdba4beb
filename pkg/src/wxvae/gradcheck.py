"""Central finite-difference checks of reverse-mode gradients.

Runs in float64. ReLU and clamp are not differentiable at their kinks; an
entry whose ``+h``/``-h`` stencil changes any activation pattern is reported
as kinked and left out of the comparison, since the difference quotient there
does not estimate a derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, VaeParams, forward_loss

TOY_CONFIG = ModelConfig((8, 8, 8), conv_channels=8, bottleneck_width=16, latent_dim=4, decoder_channels=8)


@dataclass
class ParamCheck:
    name: str
    rel_error: float
    checked: int
    kinked: int


@dataclass
class GradcheckReport:
    step: float
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.rel_error <= self.tolerance and p.checked > 0 for p in self.params)

    def lines(self) -> list[str]:
        out = [f"{p.name:<26} rel_err={p.rel_error:.3e} checked={p.checked} kinked={p.kinked}" for p in self.params]
        out.append(f"max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:g} {'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def _eval(fn: Callable[[], T.Tensor]) -> tuple[float, list[np.ndarray]]:
    log: list[np.ndarray] = []
    T.record_kinks(log)
    try:
        value = fn().item()
    finally:
        T.record_kinks(None)
    return value, log


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numerical_gradient(fn: Callable[[], T.Tensor], arr: np.ndarray, step: float = 1e-4, min_step: float = 1e-7):
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (perturbed in place).

    An entry whose +-step stencil flips a ReLU or clamp is retried with the
    step shrunk tenfold down to ``min_step``. Entries that still straddle a
    kink come back flagged in the returned mask.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    kinked = np.zeros(arr.shape, dtype=bool)
    flat, g, k = arr.reshape(-1), grad.reshape(-1), kinked.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = step
        while True:
            flat[i] = orig + h
            fp, lp = _eval(fn)
            flat[i] = orig - h
            fm, lm = _eval(fn)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
            k[i] = not _same_pattern(lp, lm)
            if not k[i] or h / 10 < min_step:
                break
            h /= 10
    return grad, kinked


def check_gradients(
    fn: Callable[[], T.Tensor],
    tensors: Sequence[T.Tensor],
    names: Sequence[str] | None = None,
    step: float = 1e-4,
    tolerance: float = 1e-3,
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences."""
    names = list(names or [t.name or f"arg{i}" for i, t in enumerate(tensors)])
    for t in tensors:
        t.grad = None
    T.backward(fn())
    # a tensor the loss never reaches keeps grad None: its gradient is zero
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in tensors]
    report = GradcheckReport(step, tolerance)
    for name, t, a in zip(names, tensors, analytic):
        num, kinked = numerical_gradient(fn, t.data, step)
        ok = ~kinked
        report.params.append(ParamCheck(name, relative_error(a[ok], num[ok]), int(ok.sum()), int(kinked.sum())))
    for t in tensors:
        t.grad = None
    return report


def gradcheck_model(
    config: ModelConfig = TOY_CONFIG,
    seed: int = 0,
    batch: int = 2,
    beta: float = 0.5,
    step: float = 1e-4,
    tolerance: float = 1e-3,
) -> GradcheckReport:
    """Check d(total loss)/d(param) for every VAE parameter on a random batch."""
    rng = np.random.default_rng(seed)
    params = VaeParams.init(config, seed, dtype=np.float64)
    # perturb biases off zero so they are exercised like trained values
    for name, t in params.items():
        if name.endswith(".bias"):
            t.data[...] = rng.uniform(-0.1, 0.1, t.shape)
    x = rng.uniform(0, 1, (batch, *config.input_extent))
    noise = rng.standard_normal((batch, config.latent_dim))

    def loss():
        return forward_loss(x, params, noise, beta)[0].total

    return check_gradients(loss, [t for _, t in params.items()], list(params), step, tolerance)
