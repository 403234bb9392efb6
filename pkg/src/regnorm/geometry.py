"""Ellitopes and spectratopes as norm unit balls.

A basic ellitope is ``{x : exists t with theta(t) <= 1, x^T T_i x <= t_i}``
for PSD matrices T_i with positive definite sum; a basic spectratope replaces
the quadratic forms by ``S_i[x]^2 <= t_i I`` for symmetric-matrix valued
linear maps with trivial joint kernel.  Both sets are unit balls of explicit
norms, evaluated here, and their smooth surrogates are assembled from the
aggregation engine, a pullback through the defining linear maps, and (for
linear images) a quotient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace
from typing import Optional

import numpy as np

from .aggregation import aggregate_general
from .catalog import lp_certificate, smooth_surrogate_for_spectral
from .core import check_full_row_rank, ensure_finite, pullback_certificate
from .errors import DataError, DomainError, NumericalError
from .quotient import quotient_certificate
from .theta import ThetaAggregator, custom_theta, theta_lq

__all__ = [
    "Ellitope",
    "Spectratope",
    "ellitope",
    "spectratope",
    "ellitope_norm_eval",
    "spectratope_norm_eval",
    "membership",
    "regular_surrogate",
    "direct_product",
    "linear_image",
    "as_spectratope",
    "lp_ball_ellitope",
    "intersection_ellitope",
    "symmetric_spectral_ball",
    "rectangular_spectral_ball",
]

PSD_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class Ellitope:
    n: int
    T_list: tuple
    theta: ThetaAggregator
    P: Optional[np.ndarray] = None
    roots: tuple = ()

    @property
    def K(self):
        return len(self.T_list)

    @property
    def is_basic(self):
        return self.P is None

    @property
    def dim(self):
        return self.n if self.P is None else self.P.shape[0]


@dataclass(frozen=True, eq=False)
class Spectratope:
    n: int
    S_maps: tuple            # entry i: array (n, d_i, d_i), S_i[x] = sum_j x_j * S_maps[i][j]
    theta: ThetaAggregator
    P: Optional[np.ndarray] = None

    @property
    def K(self):
        return len(self.S_maps)

    @property
    def block_sizes(self):
        return tuple(s.shape[1] for s in self.S_maps)

    @property
    def is_basic(self):
        return self.P is None

    @property
    def dim(self):
        return self.n if self.P is None else self.P.shape[0]


def _clamped_root(T, name):
    T = ensure_finite(T, name)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise DataError(f"{name} must be square")
    if np.abs(T - T.T).max() > 1e-10 * (1.0 + np.abs(T).max()):
        raise DataError(f"{name} is not symmetric")
    w, V = np.linalg.eigh(0.5 * (T + T.T))
    top = max(w.max(), 0.0)
    if w.min() < -PSD_RTOL * max(top, 1.0):
        raise DataError(f"{name} is not PSD: min eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def ellitope(T_list, theta: ThetaAggregator, P=None) -> Ellitope:
    """Validate the defining data and precompute the matrix square roots."""
    T_list = tuple(np.asarray(T, dtype=float) for T in T_list)
    if len(T_list) < 1:
        raise DataError("an ellitope needs at least one quadratic form")
    n = T_list[0].shape[0]
    roots = tuple(_clamped_root(T, f"T_{i}") for i, T in enumerate(T_list))
    for T in T_list:
        if T.shape != (n, n):
            raise DataError("all quadratic forms must share the ambient dimension")
    total = sum(T_list)
    w = np.linalg.eigvalsh(0.5 * (total + total.T))
    if w.min() <= PSD_RTOL * max(w.max(), 1.0):
        raise DataError(f"sum of the quadratic forms is not positive definite (min eig {w.min():.3e})")
    if theta.arity != len(T_list):
        raise DataError("aggregator arity must match the number of quadratic forms")
    if P is not None:
        P = check_full_row_rank(P, "P")
        if P.shape[1] != n:
            raise DataError("linear image map must act on the ambient space")
    return Ellitope(n=n, T_list=T_list, theta=theta, P=P, roots=roots)


def spectratope(S_maps, theta: ThetaAggregator, P=None) -> Spectratope:
    """Validate symmetry of the coefficient matrices and joint-kernel triviality."""
    mats = []
    n = None
    for i, S in enumerate(S_maps):
        S = ensure_finite(S, f"S_{i}")
        if S.ndim != 3 or S.shape[1] != S.shape[2]:
            raise DataError(f"S_{i} must have shape (n, d, d)")
        if n is None:
            n = S.shape[0]
        elif S.shape[0] != n:
            raise DataError("all maps must share the ambient dimension")
        if np.abs(S - np.swapaxes(S, 1, 2)).max() > 1e-10 * (1.0 + np.abs(S).max()):
            raise DataError(f"S_{i} coefficient matrices are not symmetric")
        mats.append(S)
    if not mats:
        raise DataError("a spectratope needs at least one matrix map")
    stacked = np.concatenate([S.reshape(n, -1) for S in mats], axis=1).T  # (sum d_i^2, n)
    s = np.linalg.svd(stacked, compute_uv=False)
    if s[-1] <= PSD_RTOL * s[0]:
        raise DataError("the stacked matrix maps have a nontrivial joint kernel")
    if theta.arity != len(mats):
        raise DataError("aggregator arity must match the number of matrix maps")
    if P is not None:
        P = check_full_row_rank(P, "P")
        if P.shape[1] != n:
            raise DataError("linear image map must act on the ambient space")
    return Spectratope(n=n, S_maps=tuple(mats), theta=theta, P=P)


# --- evaluation --------------------------------------------------------------

def _ellitope_block_values(E: Ellitope, X):
    X = np.asarray(X, dtype=float)
    return np.stack([((X @ R.T) ** 2).sum(axis=-1) for R in E.roots], axis=-1)


def ellitope_norm_eval(E: Ellitope, x):
    """``theta^(1/2)(x^T T_1 x, ..., x^T T_K x)`` for a basic ellitope; rows
    vectorize."""
    if not E.is_basic:
        raise DomainError("linear-image ellitopes are evaluated through the quotient")
    return np.sqrt(E.theta.value(_ellitope_block_values(E, x)))


def _spectral_sq(mats):
    try:
        w = np.linalg.eigvalsh(mats)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    return np.maximum(w[..., 0] ** 2, w[..., -1] ** 2)


def _spectratope_block_values(S: Spectratope, X):
    X = np.asarray(X, dtype=float)
    out = []
    for Si in S.S_maps:
        d = Si.shape[1]
        mats = (X @ Si.reshape(S.n, d * d)).reshape(X.shape[:-1] + (d, d))
        out.append(_spectral_sq(mats))
    return np.stack(out, axis=-1)


def spectratope_norm_eval(S: Spectratope, x):
    """``theta^(1/2)(||S_1[x]||^2, ..., ||S_K[x]||^2)`` with spectral norms by
    symmetric eigenvalue extremes; basic spectratopes only."""
    if not S.is_basic:
        raise DomainError("linear-image spectratopes are evaluated through the quotient")
    return np.sqrt(S.theta.value(_spectratope_block_values(S, x)))


def membership(body, x, tol=1e-9):
    """Unit-ball membership through the norm: ``norm(x) <= 1 + tol``."""
    if isinstance(body, Ellitope):
        val = ellitope_norm_eval(body, x)
    elif isinstance(body, Spectratope):
        val = spectratope_norm_eval(body, x)
    else:
        raise DataError(f"membership is defined for ellitopes and spectratopes, got {type(body)}")
    return val <= 1.0 + tol


# --- smooth surrogates -------------------------------------------------------

def regular_surrogate(body):
    """Smooth squared norm and certificate for an ellitopic/spectratopic norm.

    Ellitope: aggregate K Euclidean children and pull back through
    ``x -> [T_1^(1/2) x; ...; T_K^(1/2) x]``.  Spectratope: aggregate the
    Schatten surrogates of the spectral norms and pull back through
    ``x -> (S_1[x], ..., S_K[x])``.  A linear image adds a quotient step.
    Returns ``(SmoothSquaredNorm, RegularityCertificate)``.
    """
    if isinstance(body, Ellitope):
        children = [lp_certificate(2.0, body.n) for _ in range(body.K)]
        _, cert = aggregate_general(body.theta, children)
        A = np.vstack(body.roots)
        cert = pullback_certificate(cert, A)
        if body.P is not None:
            basic = dc_replace(body, P=None)
            cert = quotient_certificate(cert, body.P,
                                        child_norm=lambda X: ellitope_norm_eval(basic, X))
        return cert.surrogate, cert
    if isinstance(body, Spectratope):
        pairs = []
        for d in body.block_sizes:
            sq, c = smooth_surrogate_for_spectral(d, d)
            pairs.append((sq, c))
        _, cert = aggregate_general(body.theta, pairs)
        A = np.vstack([Si.reshape(body.n, -1).T for Si in body.S_maps])
        cert = pullback_certificate(cert, A)
        if body.P is not None:
            basic = dc_replace(body, P=None)
            cert = quotient_certificate(cert, body.P,
                                        child_norm=lambda X: spectratope_norm_eval(basic, X))
        return cert.surrogate, cert
    raise DataError(f"no surrogate construction for {type(body)}")


def _log_grid_exponent(count):
    import math
    return max(2, math.ceil(math.log(count + 1.0)) + 1)


# --- calculus: direct products and linear images ------------------------------

def _combined_theta(ta: ThetaAggregator, tb: ThetaAggregator,
                    combine: ThetaAggregator) -> ThetaAggregator:
    """Aggregator ``t -> combine(theta_a(t_a), theta_b(t_b))`` on the
    concatenated coordinates."""
    if combine.arity != 2:
        raise DataError("the combining aggregator must have arity 2")
    Ka, Kb = ta.arity, tb.arity

    def _eval(t):
        va = ta._eval(t[..., :Ka])
        vb = tb._eval(t[..., Ka:])
        return combine._eval(np.stack([va, vb], axis=-1))

    def _grad(t):
        va = ta._eval(t[..., :Ka])
        vb = tb._eval(t[..., Ka:])
        outer = combine._gradient_unchecked(np.stack([va, vb], axis=-1))
        ga = ta._gradient_unchecked(t[..., :Ka]) * outer[..., :1]
        gb = tb._gradient_unchecked(t[..., Ka:]) * outer[..., 1:]
        return np.concatenate([ga, gb], axis=-1)

    return custom_theta(
        _eval, Ka + Kb, grad_fn=_grad,
        is_absolute_norm=ta.is_absolute_norm and tb.is_absolute_norm and combine.is_absolute_norm,
        name=f"{combine.name}({ta.name}, {tb.name})",
    )


def direct_product(a, b, combine: Optional[ThetaAggregator] = None):
    """Direct product of two basic bodies of the same kind.

    The quadratic forms / matrix maps are zero-padded onto the product space
    and the two aggregators are merged through ``combine`` (default: the sum,
    whose unit set is contained in the true product within a factor 2).
    """
    if combine is None:
        combine = theta_lq(1.0, 2)
    if isinstance(a, Ellitope) and isinstance(b, Ellitope):
        if not (a.is_basic and b.is_basic):
            raise DomainError("direct products are formed on basic bodies; apply the image last")
        n = a.n + b.n
        T_list = [np.pad(T, ((0, b.n), (0, b.n))) for T in a.T_list]
        T_list += [np.pad(T, ((a.n, 0), (a.n, 0))) for T in b.T_list]
        return ellitope(T_list, _combined_theta(a.theta, b.theta, combine))
    if isinstance(a, Spectratope) and isinstance(b, Spectratope):
        if not (a.is_basic and b.is_basic):
            raise DomainError("direct products are formed on basic bodies; apply the image last")
        S_list = [np.pad(S, ((0, b.n), (0, 0), (0, 0))) for S in a.S_maps]
        S_list += [np.pad(S, ((a.n, 0), (0, 0), (0, 0))) for S in b.S_maps]
        return spectratope(S_list, _combined_theta(a.theta, b.theta, combine))
    raise DataError(
        "direct products need two ellitopes or two spectratopes "
        "(convert with as_spectratope to mix)"
    )


def linear_image(body, P):
    """Attach or compose a linear image map (must stay onto)."""
    P = check_full_row_rank(P, "P")
    if body.P is None:
        if P.shape[1] != body.n:
            raise DataError("image map must act on the ambient space")
        return dc_replace(body, P=P)
    if P.shape[1] != body.P.shape[0]:
        raise DataError("image maps do not compose: dimension mismatch")
    return dc_replace(body, P=check_full_row_rank(P @ body.P, "P composed"))


def as_spectratope(E: Ellitope) -> Spectratope:
    """Every ellitope is a spectratope: ``x^T T x <= t`` becomes
    ``S[x]^2 <= t I`` for the arrow embedding ``S[x] = [[0, Bx], [x^T B^T, 0]]``
    with ``T = B^T B`` (reduced rows), and the norms coincide."""
    S_maps = []
    for T in E.T_list:
        w, V = np.linalg.eigh(0.5 * (T + T.T))
        keep = w > PSD_RTOL * max(w.max(), 1.0)
        B = (np.sqrt(w[keep])[:, None] * V[:, keep].T)    # (r, n), T = B^T B
        r = B.shape[0]
        if r == 0:
            raise DataError("cannot embed an identically zero quadratic form")
        S = np.zeros((E.n, r + 1, r + 1))
        S[:, :r, r] = B.T
        S[:, r, :r] = B.T
        S_maps.append(S)
    return spectratope(S_maps, E.theta, P=E.P)


# --- common constructions ----------------------------------------------------

def lp_ball_ellitope(p, n) -> Ellitope:
    """The lp ball (p >= 2) as an ellitope: coordinate quadratic forms with
    the l_{p/2} aggregator."""
    p = float(p)
    if p < 2.0:
        raise DomainError("lp balls are ellitopes for p >= 2")
    T_list = [np.diag(np.eye(n)[i]) for i in range(n)]
    return ellitope(T_list, theta_lq(p / 2.0, n))


def intersection_ellitope(T_list, q=None) -> Ellitope:
    """Intersection of centered ellipsoids, with the max-aggregator encoded as
    a large-q lq norm (the K^(1/q) slack is the price of smoothness)."""
    K = len(T_list)
    if q is None:
        q = _log_grid_exponent(K)
    return ellitope(T_list, theta_lq(float(q), K))


def _symmetric_basis(m):
    basis = []
    for i in range(m):
        for j in range(i, m):
            B = np.zeros((m, m))
            B[i, j] = 1.0
            B[j, i] = 1.0
            basis.append(B)
    return np.stack(basis)    # (m(m+1)/2, m, m)


def symmetric_spectral_ball(m) -> Spectratope:
    """Unit ball of the spectral norm on symmetric m x m matrices
    (coordinates: upper triangle, off-diagonals entered once)."""
    return spectratope([_symmetric_basis(m)], theta_lq(1.0, 1))


def rectangular_spectral_ball(m, n) -> Spectratope:
    """Unit ball of the spectral norm on m x n matrices via the arrow
    embedding ``[[0, X], [X^T, 0]]`` (coordinates: row-major entries)."""
    d = m + n
    S = np.zeros((m * n, d, d))
    for a in range(m):
        for b in range(n):
            j = a * n + b
            S[j, a, m + b] = 1.0
            S[j, m + b, a] = 1.0
    return spectratope([S], theta_lq(1.0, 1))
