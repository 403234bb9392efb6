"""Evaluation and compilation of norm descriptors.

``norm_value`` walks a descriptor tree and returns exact norm values (the
quotient case is solved numerically over the fiber); ``build_certificate``
compiles the same tree into a smooth surrogate with composed regularity
constants.  Both vectorize over stacked rows.
"""

from __future__ import annotations

import math

import numpy as np

from .aggregation import _SurrogateLeaf, aggregate_absolute, aggregate_general
from .catalog import (
    lp_certificate,
    lp_norm_value,
    lp_squared_norm,
    schatten_certificate,
    smooth_surrogate_for_linf,
    smooth_surrogate_for_spectral,
)
from .core import (
    AggregateDescriptor,
    EllitopeNormDescriptor,
    LpDescriptor,
    PullbackDescriptor,
    QuotientDescriptor,
    RegularityCertificate,
    SchattenDescriptor,
    SpectratopeNormDescriptor,
    base_certificate,
    pullback_certificate,
)
from .errors import DataError, DomainError
from .geometry import (
    Ellitope,
    Spectratope,
    ellitope_norm_eval,
    regular_surrogate,
    spectratope_norm_eval,
)
from .quotient import quotient_certificate, quotient_eval, quotient_norm

__all__ = ["norm_value", "build_certificate", "lq_theta_certificate"]


def _schatten_value(p, m, n, x):
    x = np.asarray(x, dtype=float)
    mats = x.reshape(x.shape[:-1] + (m, n))
    s = np.linalg.svd(mats, compute_uv=False)
    if math.isinf(p):
        return s.max(axis=-1)
    return lp_norm_value(p, s)


def _block_slices(dims):
    out, k = [], 0
    for n in dims:
        out.append(slice(k, k + n))
        k += n
    return out


def norm_value(desc, x):
    """Exact value of the descriptor's norm at x (rows vectorized).

    Quotient descriptors are evaluated by minimizing the child norm over the
    fiber, so their accuracy is solver-limited.
    """
    x = np.asarray(x, dtype=float)
    if isinstance(desc, LpDescriptor):
        return lp_norm_value(desc.p, x)
    if isinstance(desc, SchattenDescriptor):
        return _schatten_value(desc.p, desc.m, desc.n, x)
    if isinstance(desc, PullbackDescriptor):
        return norm_value(desc.child, x @ desc.A.T)
    if isinstance(desc, _SurrogateLeaf):
        return np.sqrt(desc.sq.eval(x))
    if isinstance(desc, AggregateDescriptor):
        w = np.stack(
            [norm_value(c, x[..., sl]) ** 2
             for c, sl in zip(desc.children, _block_slices(desc.block_dims))],
            axis=-1,
        )
        return np.sqrt(desc.theta.value(w))
    if isinstance(desc, QuotientDescriptor):
        cert = build_certificate(desc.child)
        qn = quotient_norm(desc.P, cert.surrogate,
                           child_norm=lambda X: norm_value(desc.child, X))
        vals, _ = quotient_eval(qn, np.atleast_2d(x), which="original")
        return vals[0] if x.ndim == 1 else vals
    if isinstance(desc, EllitopeNormDescriptor):
        return _body_norm_value(desc.body, x, ellitope_norm_eval)
    if isinstance(desc, SpectratopeNormDescriptor):
        return _body_norm_value(desc.body, x, spectratope_norm_eval)
    raise DataError(f"cannot evaluate descriptor of type {type(desc).__name__}")


def _body_norm_value(body, x, basic_eval):
    if body.is_basic:
        return basic_eval(body, x)
    from dataclasses import replace
    basic = replace(body, P=None)
    sq, _ = regular_surrogate(basic)
    qn = quotient_norm(body.P, sq, child_norm=lambda X: basic_eval(basic, X))
    vals, _ = quotient_eval(qn, np.atleast_2d(x), which="original")
    return vals[0] if np.asarray(x).ndim == 1 else vals


def lq_theta_certificate(q, K) -> RegularityCertificate:
    """Certificate for the lq norm on R^K as an aggregator norm.

    For q >= 2 the norm is its own (q-1)-smooth surrogate; for q in [1, 2)
    it is certified through a rescaled Euclidean norm with
    sigma = K^((1/q - 1/2)/2).
    """
    q = float(q)
    if q >= 2.0:
        return lp_certificate(q, K)
    if q < 1.0:
        raise DomainError("aggregator exponents below 1 are not norms")
    sigma = float(K) ** ((1.0 / q - 0.5) / 2.0)
    balanced = sigma  # the balanced scaling of the Euclidean square
    base = lp_squared_norm(2.0, K)
    from .core import SmoothSquaredNorm
    surrogate = SmoothSquaredNorm(
        eval=lambda x: balanced ** 2 * base.eval(x),
        grad=lambda x: balanced ** 2 * base.grad(x),
        kappa=1.0, dim=K,
        name=f"{balanced:g}^2 * l2^2 surrogate for l{q:g} on R^{K}",
        absolute=True,
    )
    return base_certificate(
        surrogate, sigma=sigma,
        note=f"l{q:g} within factor K^(1/q-1/2)={sigma ** 2:.6g} of the balanced Euclidean norm",
    )


def build_certificate(desc) -> RegularityCertificate:
    """Compile a descriptor into its smooth surrogate and certificate."""
    if isinstance(desc, LpDescriptor):
        if math.isinf(desc.p):
            return smooth_surrogate_for_linf(desc.n)[1]
        return lp_certificate(desc.p, desc.n)
    if isinstance(desc, SchattenDescriptor):
        if math.isinf(desc.p):
            return smooth_surrogate_for_spectral(desc.m, desc.n)[1]
        return schatten_certificate(desc.p, desc.m, desc.n)
    if isinstance(desc, PullbackDescriptor):
        return pullback_certificate(build_certificate(desc.child), desc.A)
    if isinstance(desc, _SurrogateLeaf):
        return base_certificate(desc.sq, sigma=1.0)
    if isinstance(desc, AggregateDescriptor):
        pairs = [build_certificate(c) for c in desc.children]
        if desc.mode == "absolute":
            if desc.theta_cert is None:
                raise DataError(
                    "absolute-mode aggregation needs a certificate for the aggregator norm"
                )
            _, cert = aggregate_absolute(desc.theta, desc.theta_cert, pairs,
                                         child_descriptors=desc.children)
        else:
            _, cert = aggregate_general(desc.theta, pairs,
                                        child_descriptors=desc.children)
        return cert
    if isinstance(desc, QuotientDescriptor):
        child_cert = build_certificate(desc.child)
        return quotient_certificate(child_cert, desc.P,
                                    child_norm=lambda X: norm_value(desc.child, X))
    if isinstance(desc, (EllitopeNormDescriptor, SpectratopeNormDescriptor)):
        _, cert = regular_surrogate(desc.body)
        return cert
    raise DataError(f"cannot compile descriptor of type {type(desc).__name__}")
