"""Factor norms ``||u||' = min{||x|| : Px = u}`` for onto maps P.

The fiber ``{x : Px = u}`` is parametrized as ``pinv(P) u + N z`` with an
orthonormal nullspace basis N, and the child's smooth square is minimized
over z by an accelerated descent with backtracking.  Partial minimization
preserves both regularity constants, and the gradient of the minimized
square at u is the lift-adjoint of the child gradient at any minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import RegularityCertificate, SmoothSquaredNorm, make_step
from .errors import ConvergenceError, DataError, DomainError, RankError
from .core import RANK_RTOL

__all__ = [
    "QuotientNorm",
    "quotient_norm",
    "quotient_eval",
    "quotient_grad",
    "quotient_certificate",
]

GRAD_MAP_TOL = 1e-8
MAX_INNER_ITERS = 100_000


@dataclass(frozen=True)
class QuotientNorm:
    """Fiber geometry of one onto map: pseudo-lift, nullspace basis, and the
    child surrogate to minimize.  ``child_norm`` (rows -> values), when given,
    enables minimization of the original child norm."""

    P: np.ndarray
    child_surrogate: SmoothSquaredNorm
    nullspace_basis: np.ndarray
    pseudo_inverse: np.ndarray
    child_norm: Optional[Callable] = None

    @property
    def codim(self):
        return self.P.shape[0]

    def lift(self, u):
        """Pseudo-lift ``x0(u) = pinv(P) u`` (rows vectorized)."""
        return np.asarray(u, dtype=float) @ self.pseudo_inverse.T


def quotient_norm(P, child_surrogate: SmoothSquaredNorm, child_norm=None) -> QuotientNorm:
    """Factor the child through ``x -> Px``; raises RankError unless P is onto.

    The nullspace basis comes from one SVD, so repeated constructions on the
    same data are identical.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2:
        raise DataError("P must be a matrix")
    p, n = P.shape
    if n != child_surrogate.dim:
        raise DataError(f"P has {n} columns but the child lives on R^{child_surrogate.dim}")
    U, s, Vt = np.linalg.svd(P, full_matrices=True)
    if p > n or s[-1] <= RANK_RTOL * s[0]:
        raise RankError(f"P ({p}x{n}) is not onto: singular values {s}")
    N = Vt[p:].T.copy()
    pinv = (Vt[:p].T / s) @ U.T
    if N.size:
        resid = np.abs(P @ N).max()
        if resid > 1e-10 * s[0]:
            raise DataError(f"nullspace basis inconsistent: |P N| = {resid:.3e}")
    N.setflags(write=False)
    pinv.setflags(write=False)
    Pc = P.copy()
    Pc.setflags(write=False)
    return QuotientNorm(P=Pc, child_surrogate=child_surrogate,
                        nullspace_basis=N, pseudo_inverse=pinv, child_norm=child_norm)


def _fiber_minimize(qn: QuotientNorm, U, tol, max_iters):
    """Minimize the child square over every fiber row of U.

    Monotone FISTA with per-row backtracking; the initial step comes from the
    child's certified smoothness constant.  Rows whose fiber gradient reaches
    ``||grad|| <= tol * (1 + value)`` drop out of the working set (row results
    are decoupled, so compaction does not change them).  Returns the
    minimizing points X*.
    """
    phi = qn.child_surrogate
    N = qn.nullspace_basis
    U = np.asarray(U, dtype=float)
    m = U.shape[0]
    if N.shape[1] == 0:
        return qn.lift(U)
    # solve at unit scale: the square is homogeneous, so the minimizer over
    # the fiber of c*u is c times the minimizer over the fiber of u; this
    # keeps iteration counts and tolerances scale-free
    scale = np.linalg.norm(U, axis=1)
    live0 = scale > 0.0
    full_out = np.zeros((m, qn.P.shape[1]))
    if not np.any(live0):
        return full_out
    U = U[live0] / scale[live0, None]
    X0 = qn.lift(U)
    m = X0.shape[0]
    d = N.shape[1]
    out = X0.copy()
    alive = np.arange(m)
    base = X0
    Z = np.zeros((m, d))
    Y = Z.copy()
    fZ = phi.eval(base)
    L = np.full(m, 2.0 * phi.kappa)
    t_k = 1.0

    def value(Zs):
        return phi.eval(base + Zs @ N.T)

    def grad(Zs):
        return phi.grad(base + Zs @ N.T) @ N

    check_every = 4
    fista_budget = min(max_iters, 500)
    for it in range(fista_budget):
        gY = grad(Y)
        if it == 0 or it % check_every == 0:
            probe = gY if it == 0 else grad(Z)
            gn = np.linalg.norm(probe, axis=1)
            done = gn <= tol * (1.0 + fZ)
            if np.any(done):
                out[alive[done]] = base[done] + Z[done] @ N.T
                keep = ~done
                if not np.any(keep):
                    full_out[live0] = out * scale[live0, None]
                    return full_out
                alive, base, Z, Y, fZ, L = (
                    alive[keep], base[keep], Z[keep], Y[keep], fZ[keep], L[keep]
                )
                gY = gY[keep]
        fY = value(Y)
        # backtracking: double L on rows violating the descent lemma
        for _ in range(60):
            Znew = Y - gY / L[:, None]
            fnew = value(Znew)
            diff = Znew - Y
            bound = fY + (gY * diff).sum(axis=1) + 0.5 * L * (diff * diff).sum(axis=1)
            viol = fnew > bound * (1 + 1e-12) + 1e-300
            if not np.any(viol):
                break
            L = np.where(viol, 2.0 * L, L)
        # monotone variant: never accept an increase over the current iterate
        worse = fnew > fZ
        if np.any(worse):
            Znew = np.where(worse[:, None], Z, Znew)
            fnew = np.where(worse, fZ, fnew)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
        Y = Znew + ((t_k - 1.0) / t_next) * (Znew - Z)
        Z, fZ, t_k = Znew, fnew, t_next
        L *= 0.95          # allow the step estimate to recover
    # near degenerate minimizers (p > 2 squares flatten quartically) the
    # gradient decays only polynomially along first-order paths; a Newton
    # finisher on the low-dimensional fiber closes the last stretch
    Z, converged = _newton_polish(value, grad, Z, tol)
    if not np.all(converged):
        gn = np.linalg.norm(grad(Z), axis=1)
        raise ConvergenceError(
            f"fiber minimization exhausted its budget "
            f"(worst gradient norm {gn.max():.3e})",
            residual=float(gn.max()),
        )
    out[alive] = base + Z @ N.T
    full_out[live0] = out * scale[live0, None]
    return full_out


def _newton_polish(value, grad, Z, tol, max_iters=60):
    """Damped Newton with finite-difference fiber Hessians, batched over rows.
    Returns the refined points and a per-row convergence flag."""
    m, d = Z.shape
    conv = np.zeros(m, dtype=bool)
    alive = np.arange(m)
    Za = Z.copy()
    eye = np.eye(d)
    for _ in range(max_iters):
        g = grad(Za)
        f = value(Za)
        gn = np.linalg.norm(g, axis=1)
        done = gn <= tol * (1.0 + f)
        if np.any(done):
            Z[alive[done]] = Za[done]
            conv[alive[done]] = True
            keep = ~done
            if not np.any(keep):
                return Z, conv
            alive, Za, g, f = alive[keep], Za[keep], g[keep], f[keep]
        h = 1e-6 * (1.0 + np.linalg.norm(Za, axis=1))
        H = np.empty((Za.shape[0], d, d))
        for j in range(d):
            E = np.zeros_like(Za)
            E[:, j] = h
            H[:, :, j] = (grad(Za + E) - grad(Za - E)) / (2.0 * h[:, None])
        H = 0.5 * (H + H.transpose(0, 2, 1))
        w = np.linalg.eigvalsh(H)
        ridge = np.clip(1e-12 - w[:, 0], 0.0, None) + 1e-12 * (1.0 + np.abs(w[:, -1]))
        H += ridge[:, None, None] * eye
        step = np.linalg.solve(H, g[..., None])[..., 0]
        decrement = (g * step).sum(axis=1)
        t = np.ones(Za.shape[0])
        accepted = np.zeros(Za.shape[0], dtype=bool)
        Znew = Za.copy()
        for _ in range(30):
            trial = Za - t[:, None] * step
            ft = value(trial)
            ok = ~accepted & (ft <= f - 1e-4 * t * decrement + 1e-15 * (1.0 + np.abs(f)))
            Znew[ok] = trial[ok]
            accepted |= ok
            if np.all(accepted):
                break
            t = np.where(accepted, t, 0.5 * t)
        # rows that reject every damped step fall back to a gradient nudge
        stuck = ~accepted
        if np.any(stuck):
            Znew[stuck] = Za[stuck] - (1e-3 / (1.0 + gn[stuck]))[:, None] * g[stuck]
        Za = Znew
    g = grad(Za)
    f = value(Za)
    done = np.linalg.norm(g, axis=1) <= tol * (1.0 + f)
    Z[alive] = Za
    conv[alive] = done
    return Z, conv


def _golden_polish(qn: QuotientNorm, X, sweeps=2, shrink_iters=40):
    """Coordinate golden-section refinement of the original child norm along
    the nullspace directions, started from the surrogate minimizer."""
    N = qn.nullspace_basis
    if N.shape[1] == 0 or qn.child_norm is None:
        return X
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    X = X.copy()
    for _ in range(sweeps):
        for j in range(N.shape[1]):
            direction = N[:, j]
            radius = 0.5 * (1.0 + np.abs(X @ direction))
            a, b = -radius, radius
            c = b - invphi * (b - a)
            dd = a + invphi * (b - a)
            fc = qn.child_norm(X + c[:, None] * direction)
            fd = qn.child_norm(X + dd[:, None] * direction)
            for _ in range(shrink_iters):
                take_c = fc < fd
                b = np.where(take_c, dd, b)
                a = np.where(take_c, a, c)
                c = b - invphi * (b - a)
                dd = a + invphi * (b - a)
                fc = qn.child_norm(X + c[:, None] * direction)
                fd = qn.child_norm(X + dd[:, None] * direction)
            mid = 0.5 * (a + b)
            X = X + mid[:, None] * direction
    return X


def quotient_eval(qn: QuotientNorm, u, which="surrogate", tol=GRAD_MAP_TOL,
                  max_iters=MAX_INNER_ITERS):
    """Value of the factor norm at u together with the minimizing point.

    ``which="surrogate"`` minimizes the child's smooth square (and reports
    the square root); ``which="original"`` additionally polishes with a
    golden-section sweep of the original child norm along the fiber.
    Vectorizes over rows of u.
    """
    if which not in ("surrogate", "original"):
        raise DomainError(f"unknown evaluation mode {which!r}")
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    U = np.atleast_2d(u)
    if U.shape[1] != qn.codim:
        raise DataError(f"u must live in R^{qn.codim}")
    X = _fiber_minimize(qn, U, tol, max_iters)
    if which == "original":
        if qn.child_norm is None:
            raise DomainError("original-mode evaluation needs a child norm evaluator")
        X = _golden_polish(qn, X)
        vals = qn.child_norm(X)
    else:
        vals = np.sqrt(qn.child_surrogate.eval(X))
    feas = np.abs(X @ qn.P.T - U)
    scale = 1.0 + np.abs(U).max(axis=1)
    if np.any(feas.max(axis=1) > 1e-9 * scale):
        raise DataError("fiber parametrization drifted off the constraint")
    if single:
        return float(vals[0]), X[0]
    return vals, X


def quotient_grad(qn: QuotientNorm, u, tol=GRAD_MAP_TOL, max_iters=MAX_INNER_ITERS):
    """Gradient of the minimized square ``u -> min_fiber child_square``.

    Equals the lift-adjoint of the child gradient at the minimizer and does
    not depend on which minimizer the solver found.
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    U = np.atleast_2d(u)
    X = _fiber_minimize(qn, U, tol, max_iters)
    G = qn.child_surrogate.grad(X) @ qn.pseudo_inverse
    return G[0] if single else G


def quotient_surrogate(qn: QuotientNorm, name=None) -> SmoothSquaredNorm:
    """The minimized child square as a SmoothSquaredNorm on the quotient space."""
    phi = qn.child_surrogate

    def _eval(u):
        u = np.asarray(u, dtype=float)
        X = _fiber_minimize(qn, np.atleast_2d(u), GRAD_MAP_TOL, MAX_INNER_ITERS)
        vals = phi.eval(X)
        return vals[0] if u.ndim == 1 else vals

    return SmoothSquaredNorm(
        eval=_eval,
        grad=lambda u: quotient_grad(qn, u),
        kappa=phi.kappa,
        dim=qn.codim,
        name=name or f"quotient of {phi.name}",
        absolute=False,
    )


def quotient_certificate(cert: RegularityCertificate, P, child_norm=None) -> RegularityCertificate:
    """Certificate of the factor norm: both constants pass through unchanged;
    the surrogate becomes the quotient of the child surrogate."""
    qn = quotient_norm(P, cert.surrogate, child_norm=child_norm)
    surrogate = quotient_surrogate(qn)
    step = make_step(
        "quotient",
        {"rows": qn.P.shape[0], "cols": qn.P.shape[1]},
        prev=(cert.kappa, cert.sigma),
        note="partial minimization preserves both constants",
    )
    return RegularityCertificate(cert.kappa, cert.sigma, surrogate, cert.trace + (step,))
