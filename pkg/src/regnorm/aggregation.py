"""Smooth surrogates for theta-aggregated block norms.

Given child squared norms ``w_i`` and a preprocessed aggregator
``theta_bar``, the engine minimizes

    f(x, t) = sum_i w_i(x_i)^(p+1) / t_i^p     over  {t >= 0, theta_bar(t) = 1}

and exposes ``phi(x) = min_t f(x, t)`` together with ``Phi = phi^(1/(p+1))``,
which is the square of a smooth norm.  The minimizer satisfies the
stationarity system

    p * w_i^(p+1) / t_i^(p+1) = lambda * [grad theta_bar(t)]_i

on the blocks with ``x_i != 0`` (and ``t_i = 0`` elsewhere), which turns into
the fixed point ``t_i ~ w_i * g_i^(-1/(p+1))`` renormalized onto the level
set.  Writing ``g_i`` for the gradient components at the solution and
``S = sum_i w_i * g_i^(p/(p+1))``, the closed forms are

    phi(x)   = S^(p+1),        lambda(x) = p * S^(p+1),
    Phi(x)   = S,              [grad Phi(x)]_i = g_i^(p/(p+1)) * grad w_i(x_i).

Direct composition through a smooth absolute norm (no inner minimization)
is provided by :func:`aggregate_absolute`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    AggregateDescriptor,
    BlockVector,
    RegularityCertificate,
    SmoothSquaredNorm,
    make_step,
)
from .errors import (
    AbsolutizationCostError,
    ConvergenceError,
    DomainError,
    InvalidThetaError,
    NumericalError,
)
from .theta import ThetaAggregator, bar_augment, restrict_theta, unit_scale, validate_theta

__all__ = [
    "AggregateState",
    "MinimizerResult",
    "make_aggregate_state",
    "t_of_x",
    "phi_eval",
    "phi_grad",
    "surrogate_from_state",
    "aggregate_general",
    "aggregate_absolute",
    "absolutize_squared_norm",
]

#: Blocks with w_i below this fraction of the largest block value are treated
#: as exactly zero (keeps the t-system away from division blowup).
ZERO_BLOCK_RTOL = 1e-14

FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAX_ITERS = 500
FEASIBILITY_TOL = 1e-10


@dataclass(frozen=True)
class AggregateState:
    """Preprocessed engine inputs: the aggregator on the unit level set, the
    exponent p, and the child squared norms (already rescaled so that the
    aggregated norm is unchanged by preprocessing)."""

    theta_bar: ThetaAggregator
    p: int
    children: tuple
    kappa_child: float

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if self.p < 1:
            raise DomainError("exponent p must be a positive integer")
        if self.theta_bar.arity != len(self.children):
            raise DomainError("aggregator arity must match the number of blocks")

    @property
    def arity(self):
        return len(self.children)

    @property
    def q(self):
        return self.p / (self.p + 1.0)

    @property
    def block_dims(self):
        return tuple(c.dim for c in self.children)

    @property
    def total_dim(self):
        return sum(self.block_dims)

    def block_slices(self):
        out, k = [], 0
        for n in self.block_dims:
            out.append(slice(k, k + n))
            k += n
        return out


@dataclass(frozen=True)
class MinimizerResult:
    """Solution of the inner t-problem at one point: the minimizer on the
    unit level set, the multiplier, and the aggregator gradient there
    (zeros on inactive blocks)."""

    t: np.ndarray
    lam: float
    theta_grad_at_t: np.ndarray


def default_p(K: int) -> int:
    return max(1, math.ceil(math.log(K + 1.0)))


def make_aggregate_state(theta: ThetaAggregator, children: Sequence[SmoothSquaredNorm],
                         p: Optional[int] = None) -> AggregateState:
    """Run the preprocessing pipeline and assemble the engine state.

    Unit-scales the aggregator, divides each child squared norm by the axis
    touch point so the aggregated norm is unchanged, bar-augments, and picks
    ``p = ceil(ln(K+1))`` unless overridden.
    """
    K = len(children)
    if theta.arity != K:
        raise DomainError(f"aggregator arity {theta.arity} != number of children {K}")
    scaled = unit_scale(theta)
    s = scaled.scale if theta.scale is None else scaled.scale / theta.scale
    theta_bar = bar_augment(scaled)
    rescaled = tuple(
        child if s_i == 1.0 else _scale_squared_norm(child, 1.0 / s_i)
        for child, s_i in zip(children, s)
    )
    if p is None:
        p = default_p(K)
    p = int(p)
    kappa_child = max(c.kappa for c in children)
    return AggregateState(theta_bar=theta_bar, p=p, children=rescaled, kappa_child=kappa_child)


def _scale_squared_norm(sq: SmoothSquaredNorm, factor: float) -> SmoothSquaredNorm:
    # multiplying a squared norm by a positive constant keeps its smoothness
    # constant and its absoluteness
    factor = float(factor)
    return SmoothSquaredNorm(
        eval=lambda x, _e=sq.eval: factor * _e(x),
        grad=lambda x, _g=sq.grad: factor * _g(x),
        kappa=sq.kappa, dim=sq.dim,
        name=f"{factor:g} * {sq.name}", absolute=sq.absolute,
    )


# --- inner t-solver ----------------------------------------------------------

def block_values(state: AggregateState, X: np.ndarray) -> np.ndarray:
    """Child squared-norm values per block; X has rows in R^total."""
    X = np.asarray(X, dtype=float)
    cols = [state.children[i].eval(X[..., sl]) for i, sl in enumerate(state.block_slices())]
    return np.stack(cols, axis=-1)


def _fixed_point(theta, W, p):
    """Damped, renormalized fixed-point solve of the stationarity system for a
    batch of strictly positive weight rows W (m, K).  Rows are frozen as soon
    as they converge.  Returns (t, grad)."""
    W = np.atleast_2d(W)
    m = W.shape[0]
    expo = -1.0 / (p + 1.0)
    out = W / theta._eval(W)[..., None]
    alive = np.arange(m)
    t = out.copy()
    Wa = W
    prev_res = np.full(m, np.inf)
    for _ in range(FIXED_POINT_MAX_ITERS):
        g = np.clip(theta._gradient_unchecked(t), 1e-300, None)
        u = Wa * g ** expo
        cand = u / theta._eval(u)[..., None]
        res = np.abs(cand - t).max(axis=-1)
        worse = res > prev_res
        if np.any(worse):
            v = np.where(worse[..., None], 0.5 * (t + cand), cand)
            cand = v / theta._eval(v)[..., None]
            res = np.abs(cand - t).max(axis=-1)
        t, prev_res = cand, res
        done = res <= FIXED_POINT_TOL
        if np.any(done):
            out[alive[done]] = t[done]
            keep = ~done
            if not np.any(keep):
                alive = alive[:0]
                break
            alive, t, Wa, prev_res = alive[keep], t[keep], Wa[keep], prev_res[keep]
    if alive.size:
        for i, row in zip(alive, range(t.shape[0])):
            out[i] = _constrained_fallback(theta, W[i], p, t[row])
    g = np.clip(theta._gradient_unchecked(out), 1e-300, None)
    feas = np.abs(theta._eval(out) - 1.0)
    if np.any(feas > FEASIBILITY_TOL):
        raise NumericalError(f"t-solver left the unit level set by {feas.max():.3e}")
    return out, g


def _constrained_fallback(theta, w, p, t0):
    # direct constrained minimization of f(x, .) when the fixed point stalls
    from scipy.optimize import minimize

    def objective(t):
        t = np.clip(t, 1e-14, None)
        return float((w ** (p + 1) / t ** p).sum())

    def objective_grad(t):
        t = np.clip(t, 1e-14, None)
        return -p * w ** (p + 1) / t ** (p + 1)

    cons = {"type": "eq", "fun": lambda t: theta._eval(np.clip(t, 0.0, None)) - 1.0}
    res = minimize(objective, t0, jac=objective_grad, method="SLSQP",
                   bounds=[(1e-14, None)] * w.size, constraints=[cons],
                   options={"maxiter": 500, "ftol": 1e-16})
    t = np.clip(res.x, 1e-14, None)
    t = t / theta._eval(t)
    # one verification pass: the stationarity residual must be small
    g = np.clip(theta._gradient_unchecked(t), 1e-300, None)
    ratios = p * w ** (p + 1) / t ** (p + 1) / g
    rel = (ratios.max() - ratios.min()) / max(ratios.max(), 1e-300)
    if not res.success and rel > 1e-6:
        raise ConvergenceError(
            f"t-solver failed to converge (stationarity spread {rel:.3e})", residual=rel
        )
    return t


def _solve_batch(state: AggregateState, W: np.ndarray):
    """Solve the t-system for every row of W (m, K).

    Returns (T, G, S): minimizers, aggregator gradients (zeros off the active
    pattern) and the surrogate values ``S = sum_i w_i g_i^q``.
    """
    W = np.atleast_2d(W)
    m, K = W.shape
    T = np.zeros_like(W)
    G = np.zeros_like(W)
    S = np.zeros(m)
    maxw = W.max(axis=-1)
    live = np.flatnonzero(maxw > 0.0)
    if live.size == 0:
        return T, G, S
    active = W[live] >= ZERO_BLOCK_RTOL * maxw[live, None]
    patterns, inverse = np.unique(active, axis=0, return_inverse=True)
    for pi in range(patterns.shape[0]):
        rows = live[inverse == pi]
        idx = np.flatnonzero(patterns[pi])
        theta = state.theta_bar if idx.size == K else restrict_theta(state.theta_bar, idx)
        Wa = W[np.ix_(rows, idx)]
        t, g = _fixed_point(theta, Wa, state.p)
        T[np.ix_(rows, idx)] = t
        G[np.ix_(rows, idx)] = g
        S[rows] = (Wa * g ** state.q).sum(axis=-1)
    return T, G, S


# --- engine operations -------------------------------------------------------

def t_of_x(state: AggregateState, x: BlockVector) -> MinimizerResult:
    """Minimizer of ``f(x, .)`` over the unit level set, with its multiplier.

    Blocks whose squared norm is below ``1e-14 * max_j w_j`` are treated as
    zero and receive ``t_i = 0``.
    """
    flat = x.concat() if isinstance(x, BlockVector) else np.asarray(x, dtype=float)
    W = block_values(state, flat[None, :])
    if W.max() <= 0.0:
        raise DomainError("t_of_x is undefined at the origin")
    T, G, S = _solve_batch(state, W)
    lam = state.p * S[0] ** (state.p + 1)
    return MinimizerResult(t=T[0], lam=float(lam), theta_grad_at_t=G[0])


def phi_eval(state: AggregateState, x) -> float:
    """``phi(x) = min_t f(x, t) = S^(p+1)``; zero at the origin."""
    flat = x.concat() if isinstance(x, BlockVector) else np.asarray(x, dtype=float)
    _, _, S = _solve_batch(state, block_values(state, flat[None, :]))
    return float(S[0] ** (state.p + 1))


def phi_grad(state: AggregateState, x) -> BlockVector:
    """Gradient of phi; zero on zero blocks and at the origin."""
    flat = x.concat() if isinstance(x, BlockVector) else np.asarray(x, dtype=float)
    X = flat[None, :]
    W = block_values(state, X)
    _, G, S = _solve_batch(state, W)
    p = state.p
    scale = (p + 1.0) * S[0] ** p
    parts = []
    for i, sl in enumerate(state.block_slices()):
        gi = G[0, i]
        if gi <= 0.0:
            parts.append(np.zeros(state.block_dims[i]))
        else:
            parts.append(scale * gi ** state.q * state.children[i].grad(flat[sl]))
    return BlockVector(parts)


def _surrogate_eval(state, X):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    _, _, S = _solve_batch(state, block_values(state, np.atleast_2d(X)))
    return S[0] if single else S


def _surrogate_grad(state, X):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    _, G, _ = _solve_batch(state, block_values(state, X2))
    out = np.zeros_like(X2)
    for i, sl in enumerate(state.block_slices()):
        gi = G[:, i]
        mask = gi > 0.0
        if np.any(mask):
            out[mask, sl] = gi[mask, None] ** state.q * state.children[i].grad(X2[mask, sl])
    return out[0] if single else out


def general_aggregate_constants(p, K, kappa_child, sigma_child):
    """The certified pair for the minimization-based aggregate."""
    params = {"p": float(p), "arity": float(K),
              "kappa_child": float(kappa_child), "sigma_child": float(sigma_child)}
    step = make_step("aggregate_general", params)
    return step.kappa, step.sigma


def surrogate_from_state(state: AggregateState, name=None) -> SmoothSquaredNorm:
    """``Phi = phi^(1/(p+1))`` packaged with its certified smoothness constant."""
    kappa, _ = general_aggregate_constants(state.p, state.arity, state.kappa_child, 1.0)
    return SmoothSquaredNorm(
        eval=lambda X: _surrogate_eval(state, X),
        grad=lambda X: _surrogate_grad(state, X),
        kappa=kappa,
        dim=state.total_dim,
        name=name or f"aggregate surrogate (K={state.arity}, p={state.p})",
        absolute=all(c.absolute for c in state.children),
    )


def _as_pairs(children):
    pairs = []
    for entry in children:
        if isinstance(entry, RegularityCertificate):
            pairs.append((entry.surrogate, entry))
        else:
            sq, cert = entry
            pairs.append((sq, cert))
    return pairs


def aggregate_general(theta: ThetaAggregator, children, p: Optional[int] = None,
                      child_descriptors=None):
    """Surrogate and certificate for the theta-aggregated norm of arbitrary
    regular children.

    ``children`` is a sequence of ``(SmoothSquaredNorm, RegularityCertificate)``
    pairs (bare certificates are accepted; their surrogates are used).  The
    engine aggregates the child surrogates; the child sigma re-enters the
    final sandwich factor.  Returns ``(AggregateDescriptor, certificate)``.
    """
    pairs = _as_pairs(children)
    K = len(pairs)
    if K < 1:
        raise DomainError("aggregation needs at least one child")
    validate_theta(theta)
    state = make_aggregate_state(theta, [sq for sq, _ in pairs], p=p)
    kappa_child = state.kappa_child
    sigma_child = max(cert.sigma for _, cert in pairs)
    surrogate = surrogate_from_state(state)
    note = (
        f"theta={theta.name}; p={state.p}; zero-block threshold {ZERO_BLOCK_RTOL:g} (relative); "
        f"sigma factors: sqrt(2) level-set augmentation x engine factor "
        f"K^(1/(2(p+1))) p^(1/(p+1)) x child sigma {sigma_child:g}"
    )
    if theta.grad_is_fd:
        note += "; aggregator gradient by finite differences"
    step = make_step(
        "aggregate_general",
        {"p": float(state.p), "arity": float(K),
         "kappa_child": float(kappa_child), "sigma_child": float(sigma_child)},
        note=note,
    )
    cert = RegularityCertificate(step.kappa, step.sigma, surrogate, (step,))
    desc = AggregateDescriptor(
        theta=theta,
        children=tuple(child_descriptors) if child_descriptors is not None
        else tuple(_SurrogateLeaf(sq) for sq, _ in pairs),
        mode="general",
    )
    return desc, cert


@dataclass(frozen=True)
class _SurrogateLeaf:
    """Descriptor leaf for a child known only through its smooth square."""

    sq: SmoothSquaredNorm

    @property
    def dim(self):
        return self.sq.dim


def _sign_matrices(K):
    cols = np.arange(2 ** K)[:, None] >> np.arange(K)[None, :]
    return 1.0 - 2.0 * (cols & 1)


def absolutize_squared_norm(F: SmoothSquaredNorm, max_arity: int = 16) -> SmoothSquaredNorm:
    """Average a squared norm over all coordinate sign flips.

    The result is the square of an absolute norm with the same smoothness
    constant, and any norm sandwiched by an absolute norm keeps its sandwich
    against the average.  Cost is 2^K evaluations per point, refused above
    ``max_arity`` coordinates.
    """
    if F.absolute:
        return F
    K = F.dim
    if K > max_arity:
        raise AbsolutizationCostError(
            f"absolutization over 2^{K} sign matrices refused (limit 2^{max_arity})"
        )
    E = _sign_matrices(K)          # (2^K, K)

    def _eval(y):
        y = np.asarray(y, dtype=float)
        z = y[..., None, :] * E    # (..., 2^K, K)
        return F.eval(z).mean(axis=-1)

    def _grad(y):
        y = np.asarray(y, dtype=float)
        z = y[..., None, :] * E
        return (F.grad(z) * E).mean(axis=-2)

    return SmoothSquaredNorm(
        eval=_eval, grad=_grad, kappa=F.kappa, dim=K,
        name=f"sign-averaged {F.name}", absolute=True,
    )


def aggregate_absolute(theta: ThetaAggregator, theta_cert: RegularityCertificate,
                       children, child_descriptors=None):
    """Direct composition for an absolute-norm aggregator.

    The surrogate is ``f(x) = F^(1/2)(w_1(x_1), ..., w_K(x_K))`` where F is
    the (absolutized if necessary) squared surrogate of theta and ``w_i`` the
    child squared surrogates; constants compose as
    ``kappa = 2*kappa_outer + kappa_child`` and
    ``sigma = sigma_child * sqrt(sigma_outer)``.
    """
    if not theta.is_absolute_norm:
        raise InvalidThetaError("aggregate_absolute needs an absolute-norm aggregator")
    pairs = _as_pairs(children)
    K = len(pairs)
    if theta.arity != K:
        raise DomainError(f"aggregator arity {theta.arity} != number of children {K}")
    F = theta_cert.surrogate
    if F.dim != K:
        raise DomainError("theta surrogate dimension must equal the number of blocks")
    absolutized = not F.absolute
    if absolutized:
        F = absolutize_squared_norm(F)
    child_sqs = [sq for sq, _ in pairs]
    dims = [sq.dim for sq in child_sqs]
    slices, k = [], 0
    for n in dims:
        slices.append(slice(k, k + n))
        k += n
    total = sum(dims)

    def _values(X):
        return np.stack([child_sqs[i].eval(X[..., sl]) for i, sl in enumerate(slices)], axis=-1)

    def _eval(X):
        X = np.asarray(X, dtype=float)
        return np.sqrt(F.eval(_values(X)))

    def _grad(X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        Y = _values(X2)
        val = F.eval(Y)
        outer = F.grad(Y)
        out = np.zeros_like(X2)
        mask = val > 0.0
        if np.any(mask):
            coef = outer[mask] / (2.0 * np.sqrt(val[mask])[:, None])
            for i, sl in enumerate(slices):
                out[mask, sl] = coef[:, i, None] * child_sqs[i].grad(X2[mask, sl])
        return out[0] if single else out

    kappa_child = max(sq.kappa for sq in child_sqs)
    sigma_child = max(cert.sigma for _, cert in pairs)
    note = f"direct composition through {F.name}"
    if absolutized:
        note += " (sign-matrix averaged; smoothness and sandwich are preserved)"
    step = make_step(
        "aggregate_absolute",
        {"kappa_outer": float(theta_cert.kappa), "sigma_outer": float(theta_cert.sigma),
         "kappa_child": float(kappa_child), "sigma_child": float(sigma_child)},
        note=note,
    )
    surrogate = SmoothSquaredNorm(
        eval=_eval, grad=_grad, kappa=step.kappa, dim=total,
        name=f"absolute composition of {K} blocks through {theta.name}",
        absolute=all(sq.absolute for sq in child_sqs),
    )
    cert = RegularityCertificate(step.kappa, step.sigma, surrogate, (step,))
    desc = AggregateDescriptor(
        theta=theta,
        children=tuple(child_descriptors) if child_descriptors is not None
        else tuple(_SurrogateLeaf(sq) for sq in child_sqs),
        mode="absolute",
        theta_cert=theta_cert,
    )
    return desc, cert
