"""Concrete base norms: lp and Schatten squared norms with closed-form
gradients and known smoothness constants, plus smooth stand-ins for the
max-norm and the spectral norm.

For 2 <= p < inf the square of the lp norm is (p-1)-smooth and the square of
the Schatten-p norm is max(2, p-1)-smooth; those constants are what the
certificates carry.
"""

from __future__ import annotations

import math

import numpy as np

from .core import (
    RegularityCertificate,
    SmoothSquaredNorm,
    TraceStep,
    base_certificate,
    ensure_finite,
)
from .errors import DomainError, NumericalError

__all__ = [
    "lp_sq_eval_grad",
    "schatten_sq_eval_grad",
    "lp_squared_norm",
    "schatten_squared_norm",
    "lp_certificate",
    "schatten_certificate",
    "smooth_surrogate_for_linf",
    "smooth_surrogate_for_spectral",
]


def _check_p(p):
    p = float(p)
    if not (2.0 <= p < math.inf):
        raise DomainError(f"p must lie in [2, inf), got {p}")
    return p


def lp_norm_value(p, x):
    """``||x||_p`` for p in [2, inf], stable under large entries; rows vectorized."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    if math.isinf(p):
        return ax.max(axis=-1)
    m = ax.max(axis=-1, keepdims=True)
    safe = np.where(m > 0.0, m, 1.0)
    s = ((ax / safe) ** p).sum(axis=-1) ** (1.0 / p)
    return np.squeeze(m, -1) * s


def lp_sq_eval_grad(p, x):
    """Value and gradient of ``||x||_p^2`` for 2 <= p < inf.

    The gradient is ``2 ||x||_p^(2-p) * |x_j|^(p-1) sign(x_j)`` and 0 at the
    origin; for p > 2 it vanishes coordinate-wise where x does, so no
    subgradient selection is ever involved.
    """
    p = _check_p(p)
    x = ensure_finite(x, "x")
    if p == 2.0:
        val = (x * x).sum(axis=-1)
        return val, 2.0 * x
    ax = np.abs(x)
    m = ax.max(axis=-1, keepdims=True)
    safe = np.where(m > 0.0, m, 1.0)
    u = ax / safe
    nrm_u = (u ** p).sum(axis=-1, keepdims=True) ** (1.0 / p)
    nrm = np.squeeze(m * nrm_u, -1)
    val = nrm * nrm
    # grad = 2 m * nrm_u^(2-p) * u^(p-1) * sign(x): scale-free in the large entry
    with np.errstate(divide="ignore", invalid="ignore"):
        g = 2.0 * m * np.where(nrm_u > 0.0, nrm_u, 1.0) ** (2.0 - p) * u ** (p - 1.0) * np.sign(x)
    g = np.where(m > 0.0, g, 0.0)
    return val, g


def schatten_sq_eval_grad(p, X):
    """Value and gradient of the squared Schatten-p norm of an m-by-n matrix.

    Both are computed through one thin SVD: with ``X = U diag(s) V^T``,
    the value is ``||s||_p^2`` and the gradient ``U diag(g(s)) V^T`` where
    ``g`` is the lp-squared gradient on the spectrum.  The gradient does not
    depend on the choice of singular vectors inside degenerate blocks.
    """
    p = _check_p(p)
    X = ensure_finite(X, "X")
    if X.ndim < 2:
        raise DomainError("schatten norm needs a matrix argument")
    try:
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed to converge: {exc}") from exc
    val, gs = lp_sq_eval_grad(p, s)
    grad = (U * gs[..., None, :]) @ Vt
    return val, grad


def lp_squared_norm(p, n, name=None) -> SmoothSquaredNorm:
    """``||x||_p^2`` on R^n as a SmoothSquaredNorm (kappa = max(1, p-1))."""
    p = _check_p(p)
    return SmoothSquaredNorm(
        eval=lambda x: lp_sq_eval_grad(p, x)[0],
        grad=lambda x: lp_sq_eval_grad(p, x)[1],
        kappa=max(1.0, p - 1.0),
        dim=n,
        name=name or f"l{p:g}^2 on R^{n}",
        absolute=True,
    )


def schatten_squared_norm(p, m, n, name=None) -> SmoothSquaredNorm:
    """Squared Schatten-p norm on m-by-n matrices, flattened row-major.

    kappa = max(2, p-1).  eval/grad accept vectors of length m*n (or stacks
    of such rows) and reshape internally.
    """
    p = _check_p(p)

    def _eval(x):
        x = np.asarray(x, dtype=float)
        return schatten_sq_eval_grad(p, x.reshape(x.shape[:-1] + (m, n)))[0]

    def _grad(x):
        x = np.asarray(x, dtype=float)
        g = schatten_sq_eval_grad(p, x.reshape(x.shape[:-1] + (m, n)))[1]
        return g.reshape(x.shape)

    return SmoothSquaredNorm(
        eval=_eval, grad=_grad, kappa=max(2.0, p - 1.0), dim=m * n,
        name=name or f"schatten-{p:g}^2 on {m}x{n}", absolute=False,
    )


def lp_certificate(p, n) -> RegularityCertificate:
    """Certificate for the lp norm, 2 <= p < inf: its own square is the
    surrogate, so sigma = 1."""
    return base_certificate(lp_squared_norm(p, n), sigma=1.0)


def schatten_certificate(p, m, n) -> RegularityCertificate:
    """Certificate for the Schatten-p norm, 2 <= p < inf (sigma = 1)."""
    return base_certificate(schatten_squared_norm(p, m, n), sigma=1.0)


def _log_exponent(count):
    # q = max(2, ceil(ln(count+1)) + 1) keeps count**(1/q) <= e
    return max(2, math.ceil(math.log(count + 1.0)) + 1)


def smooth_surrogate_for_linf(n):
    """Smooth stand-in for the max-norm on R^n.

    Returns the lq squared norm with q = max(2, ceil(ln(n+1))+1) and a
    certificate (kappa = q-1, sigma = n^(1/q) <= e), from the sandwich
    ``||x||_q / n^(1/q) <= ||x||_inf <= ||x||_q``.
    """
    if n < 1:
        raise DomainError("dimension must be >= 1")
    q = _log_exponent(n)
    surrogate = lp_squared_norm(float(q), n, name=f"l{q}^2 surrogate for linf on R^{n}")
    sigma = float(n) ** (1.0 / q)
    step = TraceStep(
        rule="base",
        params={"kappa": float(q - 1), "sigma": sigma},
        kappa=float(q - 1), sigma=sigma,
        note=f"l{q} within factor n^(1/q)={sigma:.6g} of linf, q chosen logarithmically in n",
    )
    cert = RegularityCertificate(step.kappa, step.sigma, surrogate, (step,))
    return surrogate, cert


def smooth_surrogate_for_spectral(m, n):
    """Smooth stand-in for the spectral norm on m-by-n matrices.

    Schatten-q with q = max(2, ceil(ln(min(m,n)+1))+1); certificate
    kappa = max(2, q-1), sigma = min(m,n)^(1/q) from the spectrum sandwich.
    """
    if m < 1 or n < 1:
        raise DomainError("matrix dimensions must be >= 1")
    r = min(m, n)
    q = _log_exponent(r)
    surrogate = schatten_squared_norm(
        float(q), m, n, name=f"schatten-{q}^2 surrogate for spectral norm on {m}x{n}"
    )
    sigma = float(r) ** (1.0 / q)
    step = TraceStep(
        rule="base",
        params={"kappa": float(max(2, q - 1)), "sigma": sigma},
        kappa=float(max(2, q - 1)), sigma=sigma,
        note=f"schatten-{q} within factor min(m,n)^(1/q)={sigma:.6g} of the spectral norm",
    )
    cert = RegularityCertificate(step.kappa, step.sigma, surrogate, (step,))
    return surrogate, cert
