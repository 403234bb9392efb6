"""Aggregator functions theta on the nonnegative orthant and their
preprocessing pipeline.

A valid aggregator is continuous, homogeneous of degree 1, monotone on
R^K_+ and positive off the origin.  Before the aggregation engine consumes
one, it is unit-scaled (every axis touches the unit level set at 1) and
bar-augmented (theta + mean(t)), which pins the gradient into
[1/K, 1 + 1/K] on the open orthant at the price of a sqrt(2) sandwich
factor.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, InvalidThetaError, StateError

__all__ = [
    "ThetaAggregator",
    "theta_lq",
    "linear_theta",
    "custom_theta",
    "unit_scale",
    "bar_augment",
    "restrict_theta",
    "validate_theta",
]

_FD_STEP = 1e-7


@dataclass(frozen=True)
class ThetaAggregator:
    """A monotone, degree-1 homogeneous, positive-off-origin function on R^K_+.

    ``_eval`` and ``_grad`` vectorize over stacked rows.  ``_grad`` implements
    the formula on the closed orthant minus the origin; the public
    :meth:`gradient` only admits strictly positive points, since that is the
    only place the aggregation engine is allowed to query (boundary behaviour
    is handled by restriction to the active coordinates, not by limits).
    """

    arity: int
    _eval: Callable[[np.ndarray], np.ndarray]
    _grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    is_absolute_norm: bool = False
    is_differentiable_off_origin: bool = True
    scale: Optional[np.ndarray] = None
    bar_augmented: bool = False
    grad_is_fd: bool = False
    name: str = "theta"

    def _coerce(self, t):
        t = np.asarray(t, dtype=float)
        if t.shape[-1] != self.arity:
            raise DomainError(f"{self.name} has arity {self.arity}, got point of shape {t.shape}")
        if np.any(t < 0.0):
            raise DomainError(f"{self.name} is only defined on the nonnegative orthant")
        return t

    def value(self, t):
        return self._eval(self._coerce(t))

    def gradient(self, t):
        t = self._coerce(t)
        if np.any(t <= 0.0):
            raise DomainError(
                f"gradient of {self.name} queried on the boundary of the orthant; "
                "restrict to the active coordinates instead"
            )
        return self._gradient_unchecked(t)

    def _gradient_unchecked(self, t):
        # t >= 0, t != 0 rowwise; formula gradients extend continuously here.
        if self._grad is not None:
            return self._grad(t)
        return _fd_orthant_gradient(self._eval, t)

    def __repr__(self):
        return f"ThetaAggregator({self.name}, K={self.arity})"


def _fd_orthant_gradient(f, t):
    """Central differences that never leave the nonnegative orthant."""
    t = np.asarray(t, dtype=float)
    single = t.ndim == 1
    t = np.atleast_2d(t)
    base = _FD_STEP * np.maximum(t.max(axis=-1), 1e-300)
    out = np.empty_like(t)
    for j in range(t.shape[-1]):
        h = np.minimum(base, np.where(t[..., j] > 0, t[..., j] / 2.0, base))
        tp = t.copy()
        tm = t.copy()
        tp[..., j] += h
        tm[..., j] = np.maximum(tm[..., j] - h, 0.0)
        out[..., j] = (f(tp) - f(tm)) / (tp[..., j] - tm[..., j])
    return out[0] if single else out


def theta_lq(q, K) -> ThetaAggregator:
    """The lq aggregator ``theta(t) = ||t||_q`` on R^K_+, q in [1, inf).

    Gradient ``(t_j/||t||_q)^(q-1)``; for q = 1 it is identically ones.
    """
    q = float(q)
    if q < 1.0:
        raise DomainError(f"theta_lq needs q >= 1 (a norm), got {q}")
    if K < 1:
        raise DomainError("arity must be >= 1")

    if q == 1.0:
        _eval = lambda t: t.sum(axis=-1)
        _grad = lambda t: np.ones_like(t)
    else:
        def _eval(t):
            m = t.max(axis=-1, keepdims=True)
            safe = np.where(m > 0.0, m, 1.0)
            return np.squeeze(m, -1) * ((t / safe) ** q).sum(axis=-1) ** (1.0 / q)

        def _grad(t):
            nrm = np.expand_dims(_eval(t), -1)
            safe = np.where(nrm > 0.0, nrm, 1.0)
            return (t / safe) ** (q - 1.0)

    return ThetaAggregator(
        arity=K, _eval=_eval, _grad=_grad,
        is_absolute_norm=True, is_differentiable_off_origin=True,
        name=f"l{q:g} aggregator (K={K})",
    )


def linear_theta(weights) -> ThetaAggregator:
    """``theta(t) = <w, t>`` for strictly positive weights."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if np.any(w <= 0.0) or w.size < 1:
        raise InvalidThetaError("linear aggregator needs strictly positive weights")
    w = w.copy()
    w.setflags(write=False)
    return ThetaAggregator(
        arity=w.size,
        _eval=lambda t: t @ w,
        _grad=lambda t: np.broadcast_to(w, t.shape).copy(),
        is_absolute_norm=True, is_differentiable_off_origin=True,
        name=f"weighted sum (K={w.size})",
    )


def custom_theta(eval_fn, K, grad_fn=None, is_absolute_norm=False, name="custom theta") -> ThetaAggregator:
    """Wrap a user-supplied aggregator.

    When ``grad_fn`` is omitted a central finite-difference fallback is used
    (step 1e-7 * max(t), clipped to stay in the orthant); the flag is visible
    as ``grad_is_fd`` and ends up in certificate trace notes.
    """
    return ThetaAggregator(
        arity=K, _eval=eval_fn, _grad=grad_fn,
        is_absolute_norm=is_absolute_norm,
        is_differentiable_off_origin=grad_fn is not None,
        grad_is_fd=grad_fn is None,
        name=name,
    )


def axis_touch_points(theta: ThetaAggregator) -> np.ndarray:
    """``s_i = max{t_i : theta(t) <= 1} = 1/theta(e_i)`` (monotonicity puts the
    maximum on the i-th axis)."""
    K = theta.arity
    vals = theta.value(np.eye(K))
    if np.any(vals <= 0.0) or not np.all(np.isfinite(vals)):
        raise InvalidThetaError(
            f"{theta.name} is not positive on the axes: theta(e_i) = {vals}"
        )
    return 1.0 / vals


def unit_scale(theta: ThetaAggregator) -> ThetaAggregator:
    """Rescale coordinates so every axis touches the unit level set at 1.

    Returns ``t -> theta(D t)`` with D = diag(s), recording the cumulative
    diagonal.  Applying it twice is the same as applying it once.
    """
    s = axis_touch_points(theta)
    inner_eval, inner_grad = theta._eval, theta._grad

    def _eval(t):
        return inner_eval(t * s)

    _grad = None
    if inner_grad is not None:
        def _grad(t):
            return inner_grad(t * s) * s

    cumulative = s if theta.scale is None else theta.scale * s
    cumulative = cumulative.copy()
    cumulative.setflags(write=False)
    return replace(
        theta, _eval=_eval, _grad=_grad, scale=cumulative,
        name=f"{theta.name}, unit-scaled",
    )


def bar_augment(theta: ThetaAggregator) -> ThetaAggregator:
    """``theta_bar(t) = theta(t) + mean(t)`` on a unit-scaled aggregator.

    Sandwiched as ``theta <= theta_bar <= 2 theta`` on the orthant, and its
    gradient components lie in [1/K, 1 + 1/K] wherever t > 0.
    """
    if theta.scale is None:
        raise StateError("bar_augment requires a unit-scaled aggregator (run unit_scale first)")
    K = theta.arity
    axis_vals = theta.value(np.eye(K))
    if np.any(np.abs(axis_vals - 1.0) > 1e-8):
        raise StateError(f"aggregator is not unit-scaled: theta(e_i) = {axis_vals}")
    inner_eval, inner_grad = theta._eval, theta._grad

    def _eval(t):
        return inner_eval(t) + t.sum(axis=-1) / K

    _grad = None
    if inner_grad is not None:
        def _grad(t):
            return inner_grad(t) + 1.0 / K

    return replace(
        theta, _eval=_eval, _grad=_grad, bar_augmented=True,
        name=f"{theta.name}, bar-augmented",
    )


def restrict_theta(theta: ThetaAggregator, active) -> ThetaAggregator:
    """The aggregator induced on a subset of coordinates (others pinned to 0).

    Formula gradients are evaluated at the embedded point, which on the
    catalog aggregators coincides with the gradient of the restriction;
    finite-difference aggregators re-differentiate the restricted evaluation.
    """
    active = np.asarray(active, dtype=int)
    if active.size < 1:
        raise DomainError("restriction needs at least one active coordinate")
    K = theta.arity

    def _embed(s):
        s = np.asarray(s, dtype=float)
        full = np.zeros(s.shape[:-1] + (K,))
        full[..., active] = s
        return full

    inner_eval, inner_grad = theta._eval, theta._grad

    def _eval(s):
        return inner_eval(_embed(s))

    _grad = None
    if inner_grad is not None:
        def _grad(s):
            return inner_grad(_embed(s))[..., active]

    return replace(
        theta, arity=int(active.size), _eval=_eval, _grad=_grad,
        scale=None if theta.scale is None else theta.scale[active],
        name=f"{theta.name}, restricted to {active.tolist()}",
    )


def validate_theta(theta: ThetaAggregator, seed=0, samples=64, tol=1e-6):
    """Sampled validation of the aggregator axioms; raises InvalidThetaError.

    Checks positive homogeneity, monotonicity, positivity off the origin and,
    when a gradient is available, the Euler identity t.grad(t) = theta(t).
    Sampling is a falsifier, not a proof.
    """
    rng = np.random.default_rng(seed)
    K = theta.arity
    t = rng.uniform(0.05, 3.0, size=(samples, K))
    vals = theta.value(t)
    if np.any(vals <= 0.0):
        raise InvalidThetaError(f"{theta.name} is not positive off the origin")
    for lam in (0.5, 2.0, 10.0):
        if np.any(np.abs(theta.value(lam * t) - lam * vals) > tol * lam * np.abs(vals)):
            raise InvalidThetaError(f"{theta.name} is not homogeneous of degree 1")
    bump = t + rng.uniform(0.0, 1.0, size=t.shape)
    if np.any(theta.value(bump) < vals - tol * np.abs(vals)):
        raise InvalidThetaError(f"{theta.name} is not monotone on the orthant")
    g = theta.gradient(t)
    euler = (t * g).sum(axis=-1)
    fd_tol = 1e-4 if theta.grad_is_fd else tol
    if np.any(np.abs(euler - vals) > fd_tol * (1.0 + np.abs(vals))):
        raise InvalidThetaError(f"{theta.name} gradient fails the Euler identity")
    return True
