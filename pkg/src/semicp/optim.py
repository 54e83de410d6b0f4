"""Adam, early stopping, and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import NonFiniteGradient, NonFiniteLoss

LossAndGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass(frozen=True, eq=False)
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
        x = np.array(params, dtype=np.float64)
        return cls(x, np.zeros_like(x), np.zeros_like(x), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, gradient) -> AdamState:
    """One bias-corrected Adam update; returns a new state."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.params.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {state.params.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains NaN or inf")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    x = state.params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, params=x, m=m, v=v, step=t)


@dataclass(frozen=True)
class ConvergencePolicy:
    max_iterations: int = 500
    rel_tol: float = 1e-5
    patience: int = 20

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class EarlyStopping:
    """Tracks the best loss; signals a stop after ``patience`` evaluations
    without a relative improvement of at least ``rel_tol`` over the best."""

    def __init__(self, policy: ConvergencePolicy):
        self.policy = policy
        self.best = np.inf
        self.best_iteration = -1
        self.stale = 0
        self.count = 0

    def update(self, loss: float) -> bool:
        """Record ``loss``; returns True when the best so far was improved."""
        self.count += 1
        improved = loss < self.best
        if self.best == np.inf or loss < self.best - self.policy.rel_tol * abs(self.best):
            self.stale = 0
        else:
            self.stale += 1
        if improved:
            self.best = loss
            self.best_iteration = self.count - 1
        return improved

    @property
    def converged(self) -> bool:
        return self.stale >= self.policy.patience

    @property
    def exhausted(self) -> bool:
        return self.count >= self.policy.max_iterations

    @property
    def done(self) -> bool:
        return self.converged or self.exhausted


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    trace: list = field(default_factory=list)
    converged: bool = False
    failed: bool = False
    message: str = ""

    @property
    def iterations(self) -> int:
        return len(self.trace)


def minimize(
    loss_and_grad: LossAndGrad,
    x0,
    policy: ConvergencePolicy | None = None,
    lr: float = 1e-3,
) -> MinimizeResult:
    """Run Adam from ``x0`` until ``policy`` stops it; returns the best iterate.

    A non-finite loss or gradient aborts the run with ``failed`` set; the best
    iterate seen so far is still returned.
    """
    policy = policy or ConvergencePolicy()
    stopper = EarlyStopping(policy)
    state = AdamState.init(x0, lr=lr)
    best_x = state.params.copy()
    trace = []
    while True:
        f, g = loss_and_grad(state.params)
        f = float(f)
        if not np.isfinite(f):
            if not trace:
                raise NonFiniteLoss("initial loss is not finite")
            return MinimizeResult(best_x, stopper.best, trace, False, True, "non-finite loss")
        trace.append(f)
        if stopper.update(f):
            best_x = state.params.copy()
        if stopper.done:
            break
        try:
            state = adam_step(state, g)
        except NonFiniteGradient as exc:
            return MinimizeResult(best_x, stopper.best, trace, False, True, str(exc))
    return MinimizeResult(best_x, stopper.best, trace, stopper.converged, False, "")


def check_gradient(loss_and_grad: LossAndGrad, x, h: float = 1e-4) -> float:
    """Max component-wise relative error between the analytic gradient and
    central differences, each relative to ``max(|analytic|, |numeric|, 1e-8)``."""
    x = np.array(x, dtype=np.float64)
    _, g = loss_and_grad(x)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    num = np.empty_like(g)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(loss_and_grad(x)[0])
        flat[i] = old - h
        fm = float(loss_and_grad(x)[0])
        flat[i] = old
        num[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
    return float(np.max(np.abs(g - num) / denom))
