"""Foundational types: block vectors, smooth squared norms, descriptors and
regularity certificates.

A norm ``||.||`` is called kappa-smooth when its square ``Phi`` is C^1 and
satisfies ``Phi(x+h) <= Phi(x) + grad Phi(x)^T h + kappa * Phi(h)``, and
(kappa, sigma)-regular when it lies within a factor ``sigma`` of some
kappa-smooth norm.  Certificates carry the pair together with the smooth
surrogate that witnesses it and an auditable derivation trace.

Array convention: every ``eval``/``grad`` callable accepts a single vector of
shape ``(dim,)`` or a stack of rows ``(m, dim)`` and vectorizes over rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, DomainError, RankError

__all__ = [
    "BlockVector",
    "SmoothSquaredNorm",
    "TraceStep",
    "RegularityCertificate",
    "replay_trace",
    "pullback_certificate",
    "approximation_certificate",
    "LpDescriptor",
    "SchattenDescriptor",
    "PullbackDescriptor",
    "AggregateDescriptor",
    "QuotientDescriptor",
    "EllitopeNormDescriptor",
    "SpectratopeNormDescriptor",
]

#: Relative singular-value threshold below which a matrix counts as
#: rank-deficient.
RANK_RTOL = 1e-10


def ensure_finite(a, what="input"):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{what} contains non-finite entries")
    return a


def check_full_column_rank(A, name="A"):
    """Raise RankError unless ``Ker A = {0}`` (relative SVD threshold)."""
    A = ensure_finite(A, name)
    if A.ndim != 2:
        raise DataError(f"{name} must be a matrix, got ndim={A.ndim}")
    s = np.linalg.svd(A, compute_uv=False)
    if A.shape[1] > A.shape[0] or s[-1] <= RANK_RTOL * s[0]:
        raise RankError(
            f"{name} ({A.shape[0]}x{A.shape[1]}) is not a linear embedding: "
            f"smallest singular value {s[-1]:.3e} vs largest {s[0]:.3e}"
        )
    return A


def check_full_row_rank(P, name="P"):
    """Raise RankError unless the map ``x -> Px`` is onto."""
    P = ensure_finite(P, name)
    if P.ndim != 2:
        raise DataError(f"{name} must be a matrix, got ndim={P.ndim}")
    s = np.linalg.svd(P, compute_uv=False)
    if P.shape[0] > P.shape[1] or s[-1] <= RANK_RTOL * s[0]:
        raise RankError(
            f"{name} ({P.shape[0]}x{P.shape[1]}) is not onto: "
            f"smallest singular value {s[-1]:.3e} vs largest {s[0]:.3e}"
        )
    return P


class BlockVector:
    """An element of R^(n_1+...+n_K) stored as K immutable blocks.

    Arithmetic is blockwise and always returns a new vector with the same
    block structure.
    """

    __slots__ = ("blocks",)

    def __init__(self, blocks: Sequence[np.ndarray]):
        if len(blocks) < 1:
            raise DataError("BlockVector needs at least one block")
        frozen = []
        for b in blocks:
            b = np.array(b, dtype=float, copy=True).reshape(-1)
            if b.size < 1:
                raise DataError("every block must have dimension >= 1")
            b.setflags(write=False)
            frozen.append(b)
        object.__setattr__(self, "blocks", tuple(frozen))

    def __setattr__(self, name, value):
        raise AttributeError("BlockVector is immutable")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def dims(self) -> tuple:
        return tuple(b.size for b in self.blocks)

    @property
    def total_dim(self) -> int:
        return sum(b.size for b in self.blocks)

    def concat(self) -> np.ndarray:
        """Flatten to a plain vector of length ``total_dim``."""
        return np.concatenate(self.blocks)

    @classmethod
    def from_flat(cls, flat, dims) -> "BlockVector":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.size != sum(dims):
            raise DataError(f"flat vector of size {flat.size} does not match block dims {dims}")
        out, k = [], 0
        for n in dims:
            out.append(flat[k:k + n])
            k += n
        return cls(out)

    def __add__(self, other):
        if not isinstance(other, BlockVector) or other.dims != self.dims:
            return NotImplemented
        return BlockVector([a + b for a, b in zip(self.blocks, other.blocks)])

    def __sub__(self, other):
        if not isinstance(other, BlockVector) or other.dims != self.dims:
            return NotImplemented
        return BlockVector([a - b for a, b in zip(self.blocks, other.blocks)])

    def __mul__(self, c):
        c = float(c)
        return BlockVector([c * b for b in self.blocks])

    __rmul__ = __mul__

    def __eq__(self, other):
        return (
            isinstance(other, BlockVector)
            and self.dims == other.dims
            and all(np.array_equal(a, b) for a, b in zip(self.blocks, other.blocks))
        )

    def __repr__(self):
        return f"BlockVector(dims={self.dims})"


@dataclass(frozen=True)
class SmoothSquaredNorm:
    """An evaluable, differentiable squared norm with a certified smoothness
    constant.

    ``eval``/``grad`` vectorize over stacked rows.  ``absolute`` marks squares
    of absolute norms (invariant under coordinate sign flips), which direct
    norm composition requires.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    kappa: float
    dim: int
    name: str = "squared norm"
    absolute: bool = False

    def __post_init__(self):
        if self.kappa < 1:
            raise DomainError(f"smoothness constant must be >= 1, got {self.kappa}")
        if self.dim < 1:
            raise DomainError("dimension must be >= 1")

    def norm(self, x) -> np.ndarray:
        """The norm itself, ``sqrt(eval(x))``."""
        return np.sqrt(self.eval(x))

    def __repr__(self):
        return f"SmoothSquaredNorm({self.name}, kappa={self.kappa:g}, dim={self.dim})"


# --- certificate trace -------------------------------------------------------
#
# Every certificate stores the ordered list of composition steps that produced
# its constants.  Replaying the steps (each rule is a pure function of the
# running pair and the recorded parameters) must reproduce (kappa, sigma)
# bit-exactly, which makes the constants auditable.

def _rule_base(_k, _s, p):
    return float(p["kappa"]), float(p["sigma"])


def _rule_identity(k, s, _p):
    return k, s


def _rule_approximate(k, s, p):
    return k, s * float(p["alpha"])


def _rule_aggregate_general(_k, _s, p):
    pp, K = float(p["p"]), float(p["arity"])
    kc, sc = float(p["kappa_child"]), float(p["sigma_child"])
    kappa = (pp * K) ** (2.0 / (pp + 1.0)) * (5.0 * pp + kc)
    sigma = math.sqrt(2.0) * K ** (1.0 / (2.0 * (pp + 1.0))) * pp ** (1.0 / (pp + 1.0)) * sc
    return kappa, sigma


def _rule_aggregate_absolute(_k, _s, p):
    kb, sb = float(p["kappa_outer"]), float(p["sigma_outer"])
    kc, sc = float(p["kappa_child"]), float(p["sigma_child"])
    return 2.0 * kb + kc, sc * math.sqrt(sb)


_TRACE_RULES = {
    "base": _rule_base,
    "pullback": _rule_identity,
    "quotient": _rule_identity,
    "absolutize": _rule_identity,
    "approximate": _rule_approximate,
    "aggregate_general": _rule_aggregate_general,
    "aggregate_absolute": _rule_aggregate_absolute,
}


def make_step(rule, params, prev=(None, None), note="") -> "TraceStep":
    """Build a TraceStep whose constants are computed by the rule itself,
    guaranteeing that replay reproduces them bit-exactly."""
    k, s = _TRACE_RULES[rule](prev[0], prev[1], params)
    return TraceStep(rule=rule, params=dict(params), kappa=k, sigma=s, note=note)


@dataclass(frozen=True)
class TraceStep:
    """One derivation step: the rule applied, its numeric inputs and the
    constants it produced."""

    rule: str
    params: dict
    kappa: float
    sigma: float
    note: str = ""

    def describe(self) -> str:
        extras = ", ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in sorted(self.params.items()))
        tail = f" ({self.note})" if self.note else ""
        return f"{self.rule}[{extras}] -> kappa={self.kappa:g}, sigma={self.sigma:g}{tail}"


def replay_trace(trace: Sequence[TraceStep]):
    """Re-run the recorded composition rules; returns the final (kappa, sigma).

    Raises DataError if a step's recorded constants disagree with the rule's
    output (bit-exact comparison).
    """
    if not trace:
        raise DataError("empty certificate trace")
    kappa = sigma = None
    for i, step in enumerate(trace):
        rule = _TRACE_RULES.get(step.rule)
        if rule is None:
            raise DataError(f"unknown trace rule {step.rule!r}")
        kappa, sigma = rule(kappa, sigma, step.params)
        if kappa != step.kappa or sigma != step.sigma:
            raise DataError(
                f"trace step {i} ({step.rule}) replays to ({kappa!r}, {sigma!r}) "
                f"but recorded ({step.kappa!r}, {step.sigma!r})"
            )
    return kappa, sigma


@dataclass(frozen=True)
class RegularityCertificate:
    """The pair (kappa, sigma) witnessing regularity of a norm, together with
    the smooth surrogate and the derivation trace of how the constants were
    composed."""

    kappa: float
    sigma: float
    surrogate: SmoothSquaredNorm
    trace: tuple = ()

    def __post_init__(self):
        if self.kappa < 1 or self.sigma < 1:
            raise DomainError(
                f"regularity constants must be >= 1, got ({self.kappa}, {self.sigma})"
            )
        object.__setattr__(self, "trace", tuple(self.trace))
        k, s = replay_trace(self.trace)
        if k != self.kappa or s != self.sigma:
            raise DataError(
                f"certificate constants ({self.kappa!r}, {self.sigma!r}) do not match "
                f"trace replay ({k!r}, {s!r})"
            )

    def describe(self) -> str:
        lines = [f"(kappa={self.kappa:g}, sigma={self.sigma:g}) via {self.surrogate.name}"]
        lines += ["  " + s.describe() for s in self.trace]
        return "\n".join(lines)


def base_certificate(surrogate: SmoothSquaredNorm, sigma: float = 1.0,
                     note: str = "") -> RegularityCertificate:
    """Certificate anchored at a known-smooth surrogate (the common leaf case)."""
    step = TraceStep(
        rule="base",
        params={"kappa": float(surrogate.kappa), "sigma": float(sigma)},
        kappa=float(surrogate.kappa),
        sigma=float(sigma),
        note=note or f"smoothness constant of {surrogate.name}",
    )
    return RegularityCertificate(step.kappa, step.sigma, surrogate, (step,))


# --- closure operations ------------------------------------------------------

def pullback_surrogate(phi: SmoothSquaredNorm, A: np.ndarray,
                       name: Optional[str] = None) -> SmoothSquaredNorm:
    """The squared norm ``y -> phi(A y)`` with gradient ``A^T grad phi(A y)``."""
    A = np.asarray(A, dtype=float)
    m = A.shape[1]

    def _eval(y):
        y = np.asarray(y, dtype=float)
        return phi.eval(y @ A.T)

    def _grad(y):
        y = np.asarray(y, dtype=float)
        return phi.grad(y @ A.T) @ A

    return SmoothSquaredNorm(
        eval=_eval, grad=_grad, kappa=phi.kappa, dim=m,
        name=name or f"pullback of {phi.name}", absolute=False,
    )


def pullback_certificate(cert: RegularityCertificate, A) -> RegularityCertificate:
    """Restrict a certificate along a linear embedding ``y -> A y``.

    The constants are unchanged; only the surrogate is composed with the
    embedding.
    """
    A = check_full_column_rank(A, "A")
    if A.shape[0] != cert.surrogate.dim:
        raise DataError(
            f"embedding maps into R^{A.shape[0]} but surrogate lives on R^{cert.surrogate.dim}"
        )
    surrogate = pullback_surrogate(cert.surrogate, A)
    step = TraceStep(
        rule="pullback",
        params={"rows": A.shape[0], "cols": A.shape[1]},
        kappa=cert.kappa, sigma=cert.sigma,
        note="linear embedding preserves both constants",
    )
    return RegularityCertificate(cert.kappa, cert.sigma, surrogate, cert.trace + (step,))


def approximation_certificate(cert: RegularityCertificate, alpha: float) -> RegularityCertificate:
    """Certificate for a norm within factor ``alpha >= 1`` of the certified one:
    kappa is kept, sigma inflates to ``alpha * sigma``."""
    alpha = float(alpha)
    if not (alpha >= 1.0):
        raise DomainError(f"approximation factor must be >= 1, got {alpha}")
    step = TraceStep(
        rule="approximate",
        params={"alpha": alpha},
        kappa=cert.kappa, sigma=cert.sigma * alpha,
        note="norm within factor alpha of the certified norm",
    )
    return RegularityCertificate(step.kappa, step.sigma, cert.surrogate, cert.trace + (step,))


# --- descriptor algebra ------------------------------------------------------
#
# Descriptors are inert definitions of norms, closed under pullback,
# aggregation, quotient and the ellitope/spectratope constructions.  They are
# evaluated and compiled into certificates by regnorm.builder.

@dataclass(frozen=True)
class LpDescriptor:
    p: float
    n: int

    def __post_init__(self):
        if not (2.0 <= self.p):
            raise DomainError(f"lp descriptor needs p in [2, inf], got {self.p}")
        if self.n < 1:
            raise DomainError("dimension must be >= 1")

    @property
    def dim(self):
        return self.n


@dataclass(frozen=True)
class SchattenDescriptor:
    p: float
    m: int
    n: int

    def __post_init__(self):
        if not (2.0 <= self.p):
            raise DomainError(f"schatten descriptor needs p in [2, inf], got {self.p}")
        if self.m < 1 or self.n < 1:
            raise DomainError("matrix dimensions must be >= 1")

    @property
    def dim(self):
        return self.m * self.n


@dataclass(frozen=True, eq=False)
class PullbackDescriptor:
    A: np.ndarray
    child: object

    def __post_init__(self):
        A = check_full_column_rank(self.A, "A")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        if A.shape[0] != self.child.dim:
            raise DataError("embedding codomain does not match child dimension")

    @property
    def dim(self):
        return self.A.shape[1]


@dataclass(frozen=True, eq=False)
class AggregateDescriptor:
    theta: object                      # ThetaAggregator
    children: tuple
    mode: str = "general"              # "general" | "absolute"
    theta_cert: Optional["RegularityCertificate"] = None  # required for "absolute"

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if self.theta.arity != len(self.children):
            raise DataError(
                f"aggregator arity {self.theta.arity} != number of children {len(self.children)}"
            )
        if self.mode not in ("general", "absolute"):
            raise DomainError(f"unknown aggregation mode {self.mode!r}")

    @property
    def dim(self):
        return sum(c.dim for c in self.children)

    @property
    def block_dims(self):
        return tuple(c.dim for c in self.children)


@dataclass(frozen=True, eq=False)
class QuotientDescriptor:
    P: np.ndarray
    child: object

    def __post_init__(self):
        P = check_full_row_rank(self.P, "P")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        if P.shape[1] != self.child.dim:
            raise DataError("quotient map domain does not match child dimension")

    @property
    def dim(self):
        return self.P.shape[0]


@dataclass(frozen=True, eq=False)
class EllitopeNormDescriptor:
    body: object                       # geometry.Ellitope

    @property
    def dim(self):
        return self.body.dim


@dataclass(frozen=True, eq=False)
class SpectratopeNormDescriptor:
    body: object                       # geometry.Spectratope

    @property
    def dim(self):
        return self.body.dim
