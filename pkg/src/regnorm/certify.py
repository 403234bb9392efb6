"""Empirical certification harness.

Sampling cannot prove an inequality, so every check here is a falsifier: it
hunts for violations of the smoothness inequality, the norm sandwich, or the
analytic gradients, over seeded Gaussian samples spread across several
magnitude decades plus a deterministic set of known extremal points (axis
vectors, the all-ones vector, and balanced sign-alternating pairs, which are
the tight directions for lp-type squares).  Reports are byte-reproducible
given (seed, samples, target).
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .core import SmoothSquaredNorm
from .errors import DomainError, ScaleError

__all__ = [
    "CertifyReport",
    "InequalityCheck",
    "check_smoothness",
    "check_sandwich",
    "check_gradient",
    "brute_force_phi",
    "certify_surrogate",
    "worker_count",
]

#: Multiplicative float guard for dominance comparisons: an inequality counts
#: as violated only beyond last-digit rounding of the exact-equality cases.
DOMINANCE_GUARD = 1e-9

_SCALE_DECADES = (1e-2, 1e-1, 1.0, 1e1)


def worker_count():
    """Worker cap for sample batches: REGNORM_THREADS or the hardware count."""
    env = os.environ.get("REGNORM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return os.cpu_count() or 1


#: Sample batches are always split into this many fixed chunks; only the
#: thread-pool size follows REGNORM_THREADS.  Results are therefore identical
#: whatever the worker count.
_N_CHUNKS = 16


def _eval_chunked(fn, X):
    """Apply a row-vectorized evaluator chunk by chunk, fanning out across
    worker threads when allowed."""
    if X.shape[0] < 2 * _N_CHUNKS:
        return np.asarray(fn(X))
    splits = np.array_split(np.arange(X.shape[0]), _N_CHUNKS)
    workers = min(worker_count(), _N_CHUNKS)
    if workers <= 1:
        parts = [np.asarray(fn(X[idx])) for idx in splits]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: np.asarray(fn(X[idx])), splits))
    return np.concatenate(parts)


def _extremal_points(dim):
    pts = [np.eye(dim)[0], np.ones(dim) / np.sqrt(dim)]
    if dim > 1:
        pts.append(np.eye(dim)[1])
        alt = np.array([1.0 if j % 2 == 0 else -1.0 for j in range(dim)])
        pts.append(alt / np.sqrt(dim))
    return np.stack(pts)


def _extremal_pairs(dim):
    """Deterministic (x, h) pairs including the balanced sign-alternating
    directions that drive lp-type smoothness ratios to their constants."""
    xs, hs = [], []
    e0 = np.eye(dim)[0]
    if dim > 1:
        e1 = np.eye(dim)[1]
        for eps in (1e-1, 1e-2, 1e-3):
            xs.append(e0)
            hs.append(eps * e1)
        support = dim if dim % 2 == 0 else dim - 1
        x = np.zeros(dim)
        x[:support] = 1.0
        alt = np.zeros(dim)
        alt[:support] = [1.0 if j % 2 == 0 else -1.0 for j in range(support)]
        for eps in (1e-1, 1e-2, 1e-3):
            xs.append(x)
            hs.append(eps * alt)
    for eps in (1e-1, 1e-2):
        xs.append(e0)
        hs.append(eps * e0)
    return np.stack(xs), np.stack(hs)


def _sample_rows(rng, n, dim):
    base = rng.standard_normal((n, dim))
    scales = np.asarray(_SCALE_DECADES)[rng.integers(0, len(_SCALE_DECADES), size=n)]
    return base * scales[:, None]


def _batched_max(values, witnesses_from, n_top=3):
    order = np.argsort(values)[::-1][:n_top]
    return float(values[order[0]]), [witnesses_from(i) for i in order]


def check_smoothness(Phi: SmoothSquaredNorm, norm_for_h=None, n_samples=10_000,
                     seed=0, extra_pairs=None):
    """Largest sampled smoothness ratio of a squared norm.

    Checks both one-sided forms of the inequality: the descent-lemma ratio
    ``(Phi(x+h) - Phi(x) - grad Phi(x)^T h) / Phi(h)`` and the gradient
    monotonicity ratio ``h^T (grad Phi(x+h) - grad Phi(x)) / (2 Phi(h))``;
    either must stay below the certified constant.  ``norm_for_h`` (squared)
    replaces ``Phi(h)`` in the denominators when given.

    Returns ``(max_ratio, witnesses)`` with the worst few (x, h) pairs.
    """
    if n_samples < 1:
        raise DomainError("need at least one sample")
    rng = np.random.default_rng(seed)
    dim = Phi.dim
    X = _sample_rows(rng, n_samples, dim)
    H = _sample_rows(rng, n_samples, dim)
    ex, eh = _extremal_pairs(dim)
    X = np.vstack([X, ex])
    H = np.vstack([H, eh])
    if extra_pairs is not None:
        X = np.vstack([X, np.atleast_2d(extra_pairs[0])])
        H = np.vstack([H, np.atleast_2d(extra_pairs[1])])
    den_fn = norm_for_h if norm_for_h is not None else Phi.eval
    fx = _eval_chunked(Phi.eval, X)
    fxh = _eval_chunked(Phi.eval, X + H)
    gx = _eval_chunked(Phi.grad, X)
    gxh = _eval_chunked(Phi.grad, X + H)
    den = _eval_chunked(den_fn, H)
    ok = den > 0.0
    descent = np.where(ok, (fxh - fx - (gx * H).sum(axis=1)) / np.where(ok, den, 1.0), -np.inf)
    monotone = np.where(ok, ((gxh - gx) * H).sum(axis=1) / (2.0 * np.where(ok, den, 1.0)), -np.inf)
    ratios = np.maximum(descent, monotone)
    return _batched_max(ratios, lambda i: (X[i].copy(), H[i].copy()))


def check_sandwich(norm_a, norm_b, dim, n_samples=10_000, seed=0):
    """Largest sampled two-sided ratio ``max(a/b, b/a)`` over unit-sphere
    directions plus the deterministic extremal points."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    X = np.vstack([X, _extremal_points(dim)])
    va = _eval_chunked(norm_a, X).astype(float)
    vb = _eval_chunked(norm_b, X).astype(float)
    ratios = np.maximum(va / vb, vb / va)
    return _batched_max(ratios, lambda i: X[i].copy())


def check_gradient(Phi: SmoothSquaredNorm, n_points=100, seed=0, min_block_scale=None,
                   block_dims=None):
    """Worst relative error of the analytic gradient against central finite
    differences (step ``1e-6 * (1 + |x|)``).

    When ``block_dims`` is given, sample points are nudged so every block has
    norm at least ``min_block_scale`` (gradients are not checked inside the
    zero-block seam where the analytic formula switches branches).
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_points, Phi.dim))
    if block_dims is not None:
        floor = min_block_scale if min_block_scale is not None else 1e-2
        k = 0
        for nb in block_dims:
            seg = X[:, k:k + nb]
            nrm = np.linalg.norm(seg, axis=1, keepdims=True)
            small = nrm[:, 0] < floor
            if np.any(small):
                seg[small] = rng.standard_normal((small.sum(), nb))
                seg[small] *= (floor * 2.0) / np.linalg.norm(seg[small], axis=1, keepdims=True)
            k += nb
    G = np.atleast_2d(Phi.grad(X))
    worst = 0.0
    for i in range(X.shape[0]):
        x = X[i]
        h = 1e-6 * (1.0 + np.linalg.norm(x))
        E = np.eye(Phi.dim) * h
        fd = (Phi.eval(x[None, :] + E) - Phi.eval(x[None, :] - E)) / (2.0 * h)
        scale = max(np.linalg.norm(G[i]), 1e-12)
        worst = max(worst, float(np.linalg.norm(fd - G[i]) / scale))
    return worst


def brute_force_phi(state, x, grid_res=1e-3):
    """Independent grid oracle for the aggregation objective.

    Minimizes ``f(x, .)`` by sweeping ray directions on the simplex at the
    requested resolution and rescaling each onto the unit level set (exact by
    homogeneity).  Only meant for K <= 3.
    """
    from .aggregation import block_values
    from .core import BlockVector

    K = state.arity
    if K > 3:
        raise ScaleError(f"brute-force oracle supports K <= 3, got K={K}")
    flat = x.concat() if isinstance(x, BlockVector) else np.asarray(x, dtype=float)
    w = block_values(state, flat[None, :])[0]
    active = np.flatnonzero(w >= 1e-14 * max(w.max(), 1e-300))
    if active.size == 0:
        return 0.0
    w = w[active]
    ka = active.size
    if ka == 1:
        dirs = np.ones((1, 1))
    elif ka == 2:
        a = np.arange(1, int(round(1.0 / grid_res)))
        alphas = a * grid_res
        dirs = np.stack([alphas, 1.0 - alphas], axis=1)
    else:
        steps = int(round(1.0 / grid_res))
        a = np.arange(1, steps)
        A, B = np.meshgrid(a, a, indexing="ij")
        keep = A + B < steps
        alphas = A[keep] * grid_res
        betas = B[keep] * grid_res
        dirs = np.stack([alphas, betas, 1.0 - alphas - betas], axis=1)
    if active.size == state.arity:
        theta = state.theta_bar
    else:
        from .theta import restrict_theta
        theta = restrict_theta(state.theta_bar, active)
    p = state.p
    best = np.inf
    chunk = 250_000
    for start in range(0, dirs.shape[0], chunk):
        D = dirs[start:start + chunk]
        T = D / theta._eval(D)[:, None]
        f = (w[None, :] ** (p + 1) / T ** p).sum(axis=1)
        best = min(best, float(f.min()))
    return best


@dataclass(frozen=True)
class InequalityCheck:
    check_id: str
    samples: int
    max_ratio: float
    bound: float
    witness: str = ""

    @property
    def passed(self):
        return self.max_ratio <= self.bound * (1.0 + DOMINANCE_GUARD) + DOMINANCE_GUARD

    @property
    def slack(self):
        return self.bound - self.max_ratio


@dataclass(frozen=True)
class CertifyReport:
    """Outcome of one certification run: the measured maxima, the certified
    bounds, and any violations (empty iff every inequality held)."""

    target: str
    samples: int
    seed: int
    max_smoothness_ratio: float
    max_sandwich_ratio: float
    grad_fd_max_rel_err: float
    checks: tuple = ()
    violations: tuple = field(default=())

    def to_dict(self):
        return {
            "target": self.target,
            "samples": self.samples,
            "seed": self.seed,
            "max_smoothness_ratio": repr(self.max_smoothness_ratio),
            "max_sandwich_ratio": repr(self.max_sandwich_ratio),
            "grad_fd_max_rel_err": repr(self.grad_fd_max_rel_err),
            "checks": [
                {
                    "id": c.check_id,
                    "samples": c.samples,
                    "max_ratio": repr(c.max_ratio),
                    "bound": repr(c.bound),
                    "slack": repr(c.slack),
                    "pass": c.passed,
                }
                for c in self.checks
            ],
            "violations": [
                {"id": v.check_id, "max_ratio": repr(v.max_ratio),
                 "bound": repr(v.bound), "witness": v.witness}
                for v in self.violations
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "samples", "max_ratio", "bound", "slack", "pass"])
        for c in self.checks:
            writer.writerow([c.check_id, c.samples, repr(c.max_ratio), repr(c.bound),
                             repr(c.slack), c.passed])
        return buf.getvalue()

    @property
    def ok(self):
        return len(self.violations) == 0


def certify_surrogate(name, cert, exact_norm=None, n_samples=10_000, seed=42,
                      grad_points=100, block_dims=None) -> CertifyReport:
    """Run the standard falsifier suite against one certificate.

    Checks smoothness dominance of the surrogate, sandwich dominance against
    ``exact_norm`` (rows -> values) when provided, and the analytic gradient.
    """
    sq = cert.surrogate
    smooth_ratio, smooth_wit = check_smoothness(sq, n_samples=n_samples, seed=seed)
    checks = [InequalityCheck(
        check_id="smoothness_vs_kappa", samples=n_samples,
        max_ratio=smooth_ratio, bound=float(cert.kappa),
        witness=_fmt_witness(smooth_wit[0]),
    )]
    sandwich_ratio = 1.0
    if exact_norm is not None:
        sandwich_ratio, sand_wit = check_sandwich(
            lambda X: np.sqrt(sq.eval(X)), exact_norm, sq.dim,
            n_samples=n_samples, seed=seed + 1,
        )
        checks.append(InequalityCheck(
            check_id="sandwich_vs_sigma", samples=n_samples,
            max_ratio=sandwich_ratio, bound=float(cert.sigma),
            witness=_fmt_witness(sand_wit[0]),
        ))
    grad_err = check_gradient(sq, n_points=grad_points, seed=seed + 2,
                              block_dims=block_dims)
    checks.append(InequalityCheck(
        check_id="gradient_fd_rel_err", samples=grad_points,
        max_ratio=grad_err, bound=1e-5,
    ))
    violations = tuple(c for c in checks if not c.passed)
    return CertifyReport(
        target=name, samples=n_samples, seed=seed,
        max_smoothness_ratio=smooth_ratio,
        max_sandwich_ratio=sandwich_ratio,
        grad_fd_max_rel_err=grad_err,
        checks=tuple(checks), violations=violations,
    )


def _fmt_witness(w):
    if isinstance(w, tuple):
        return "x=" + _short(w[0]) + "; h=" + _short(w[1])
    return _short(w)


def _short(v, k=4):
    v = np.asarray(v).reshape(-1)
    head = ",".join(f"{t:.3g}" for t in v[:k])
    return f"[{head}{',...' if v.size > k else ''}]"
