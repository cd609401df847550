"""Flow solvers for the balance system and their quality diagnostics.

Four ways to pick one flow vector out of the underdetermined system:

* :func:`nnls` minimizes the residual subject to nonnegative flows with an
  active-set iteration, adding one column at a time and maintaining a
  Cholesky factorization of the support's Gram matrix.
* :func:`least_norm` returns the minimum-norm least-squares solution through
  a sparse iterative method.
* :func:`bayes_mean` returns the posterior mean of a Gaussian prior with
  mean ``mu`` and covariance ``sigma * I`` conditioned on the balance
  equations, via a conjugate-gradient solve on ``sigma * A @ A.T``.
* :func:`dcgm_weights` spreads each layer's total mass over its edges from
  degree-corrected strength products, using a reference solution only
  through its node totals.

All solvers accept dense or sparse matrices and report wall time, iteration
counts and the final residual.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from time import perf_counter
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import LinearOperator, cg, lsqr

from .ensembles import LAYER_ORDER, LayerKind, LayerModel
from .errors import SolverError
from .system import LinearSystem

# Relative cutoff separating structural zeros from actual flows when
# counting signs.
ZERO_EPS = 1e-9


@dataclass
class FlowSolution:
    """One flow vector plus how it was obtained."""

    xi: np.ndarray
    method: str
    iterations: int
    residual_l2: float
    wall_time: float
    converged: bool = True


@dataclass(frozen=True)
class SolverDiagnostics:
    """Residual and sign profile of one solution."""

    relative_error_pct: float
    negative_pct: float
    nonzero_count: int


def _as_csc(A) -> sparse.csc_matrix:
    if sparse.issparse(A):
        return A.tocsc()
    return sparse.csc_matrix(np.asarray(A, dtype=float))


def _drop_support_column(R: np.ndarray, n_s: int, pos: int) -> None:
    """Delete column ``pos`` from the leading upper-triangular block.

    The columns right of ``pos`` shift left, leaving one subdiagonal entry
    per shifted column; Givens rotations restore triangularity in place.
    """
    R[:, pos:n_s - 1] = R[:, pos + 1:n_s]
    for i in range(pos, n_s - 1):
        f, g = R[i, i], R[i + 1, i]
        if g == 0.0:
            continue
        radius = np.hypot(f, g)
        c, s = f / radius, g / radius
        upper = R[i, i:n_s - 1].copy()
        lower = R[i + 1, i:n_s - 1].copy()
        R[i, i:n_s - 1] = c * upper + s * lower
        R[i + 1, i:n_s - 1] = -s * upper + c * lower
        R[i, i] = radius
        R[i + 1, i] = 0.0


def nnls(A, b, tol: float | None = None, max_iter: int | None = None,
         callback: Callable[[int, float], None] | None = None) -> FlowSolution:
    """Minimize ``||A x - b||`` subject to ``x >= 0`` by active-set iteration.

    Starting from zero, each outer iteration moves the zero coordinate with
    the largest dual value ``A.T @ (b - A x)`` into the support (lowest index
    on ties) and re-solves the unconstrained least-squares problem on the
    support; coordinates driven nonpositive are stepped back to zero and
    dropped.  Iteration stops when every zero coordinate has dual value at
    most ``tol``, which is the nonnegative-optimality condition.

    ``tol`` defaults to ``1e-8 * max|A.T b|`` and ``max_iter`` to ten times
    the column count; hitting the cap returns the current iterate flagged as
    not converged.  Inner solves use a Cholesky factorization of the support
    Gram matrix, updated on entry and downdated on exit, so each iteration
    costs O(support^2) plus one sparse matrix-vector product.

    ``callback``, when given, receives ``(iteration, residual_norm)`` after
    every outer iteration.
    """
    A = _as_csc(A)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    t0 = perf_counter()

    G = (A.T @ A).tocsc()
    gdiag = G.diagonal()
    Atb = A.T @ b
    if tol is None:
        scale = float(np.abs(Atb).max()) if n else 0.0
        tol = 1e-8 * scale
    if max_iter is None:
        max_iter = 10 * n

    x = np.zeros(n)
    in_support = np.zeros(n, dtype=bool)
    blocked = np.zeros(n, dtype=bool)
    support = np.zeros(n, dtype=np.int64)
    n_s = 0
    cap = min(max(n, 1), 128)
    R = np.zeros((cap, cap))
    q = np.zeros(cap)
    scratch = np.zeros(n)

    iterations = 0
    removals = 0
    converged = False
    while True:
        r = b - A @ x
        w = A.T @ r
        w_cand = np.where(~in_support & ~blocked, w, -np.inf)
        j = int(np.argmax(w_cand)) if n else 0
        if n == 0 or w_cand[j] <= tol:
            # blocked candidates with a large dual would mean the
            # factorization refused a genuinely useful column
            converged = not (blocked & ~in_support & (w > tol)).any()
            break
        if iterations >= max_iter:
            break

        gcol = G[:, j]
        scratch[gcol.indices] = gcol.data
        c = scratch[support[:n_s]].copy()
        scratch[gcol.indices] = 0.0
        if n_s:
            u = solve_triangular(R[:n_s, :n_s], c, trans="T", lower=False,
                                 check_finite=False)
            d2 = gdiag[j] - u @ u
        else:
            u = np.empty(0)
            d2 = gdiag[j]
        if d2 <= 1e-12 * max(gdiag[j], np.finfo(float).tiny):
            # numerically dependent on the current support; set aside until
            # the support changes
            blocked[j] = True
            continue

        iterations += 1
        if n_s == cap:
            cap = min(2 * cap, n)
            R_new = np.zeros((cap, cap))
            R_new[:n_s, :n_s] = R[:n_s, :n_s]
            q_new = np.zeros(cap)
            q_new[:n_s] = q[:n_s]
            R, q = R_new, q_new
        R[:n_s, n_s] = u
        R[n_s, n_s] = np.sqrt(d2)
        q[n_s] = (Atb[j] - u @ q[:n_s]) / R[n_s, n_s]
        support[n_s] = j
        in_support[j] = True
        entered = j
        n_s += 1

        while n_s:
            z = solve_triangular(R[:n_s, :n_s], q[:n_s], lower=False,
                                 check_finite=False)
            if (z > 0.0).all():
                x = np.zeros(n)
                x[support[:n_s]] = z
                blocked[:] = False
                break
            xs = x[support[:n_s]].copy()
            neg = z <= 0.0
            denom = xs[neg] - z[neg]
            ratios = np.divide(xs[neg], denom, out=np.zeros_like(denom),
                               where=denom > 0)
            alpha = float(ratios.min())
            xs += alpha * (z - xs)
            neg_pos = np.flatnonzero(neg)
            leave_pos = neg_pos[ratios <= alpha * (1.0 + 1e-12) + 1e-300]
            xs[leave_pos] = 0.0
            np.maximum(xs, 0.0, out=xs)
            leaving_ids = support[:n_s][leave_pos]
            if alpha == 0.0 and entered in leaving_ids:
                # the entering column brought no descent; keep it out until
                # the support changes for real
                blocked[entered] = True
            x = np.zeros(n)
            x[support[:n_s]] = xs
            in_support[leaving_ids] = False
            removals += len(leave_pos)
            for pos in leave_pos[::-1]:
                _drop_support_column(R, n_s, int(pos))
                support[pos:n_s - 1] = support[pos + 1:n_s]
                n_s -= 1
            if n_s:
                q[:n_s] = solve_triangular(R[:n_s, :n_s], Atb[support[:n_s]],
                                           trans="T", lower=False,
                                           check_finite=False)
        if callback is not None:
            callback(iterations, float(np.linalg.norm(b - A @ x)))
        if removals > 5 * n:
            # cycling safeguard; with exact arithmetic this cannot happen
            break

    residual = float(np.linalg.norm(b - A @ x))
    return FlowSolution(xi=x, method="nnls", iterations=iterations,
                        residual_l2=residual, wall_time=perf_counter() - t0,
                        converged=converged)


def least_norm(A, b, tol: float = 1e-10,
               max_iter: int | None = None) -> FlowSolution:
    """Minimum-norm least-squares solution via sparse iterative bidiagonalization.

    Starting from zero keeps every iterate in the row space of ``A``, so for
    consistent systems the limit is exactly ``A.T @ inv(A @ A.T) @ b`` (with
    the pseudoinverse when ``A @ A.T`` is singular).  For inconsistent
    systems the iteration settles on a least-squares solution instead and is
    still reported as converged.
    """
    A = _as_csc(A)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    t0 = perf_counter()
    it_lim = max_iter if max_iter is not None else 4 * (m + n)
    result = lsqr(A, b, atol=tol, btol=tol, iter_lim=it_lim)
    x, istop, itn, r1norm = result[0], result[1], result[2], result[3]
    # istop 0 means b was zero and x = 0 is exact
    return FlowSolution(xi=x, method="lsq", iterations=int(itn),
                        residual_l2=float(r1norm),
                        wall_time=perf_counter() - t0,
                        converged=istop in (0, 1, 2, 4, 5))


def bayes_mean(A, b, mu: np.ndarray | None = None, sigma: float = 1.0,
               tol: float = 1e-10, max_iter: int | None = None) -> FlowSolution:
    """Posterior mean of a Gaussian flow prior conditioned on the balances.

    With prior mean ``mu`` and isotropic prior covariance ``sigma * I`` the
    posterior mean is ``mu + sigma * A.T @ y`` where ``sigma * (A @ A.T) y =
    b - A @ mu``; the isotropic ``sigma`` therefore cancels exactly.  The
    inner system is symmetric positive semidefinite and is solved with
    conjugate gradients; failure to converge means it has no solution, which
    happens when the balance system itself is infeasible.
    """
    A = _as_csc(A)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    t0 = perf_counter()
    if mu is None:
        mu = np.zeros(n)
    else:
        mu = np.asarray(mu, dtype=float)
    rhs = b - A @ mu
    if not np.abs(rhs).any():
        return FlowSolution(xi=mu.copy(), method="bayes", iterations=0,
                            residual_l2=0.0, wall_time=perf_counter() - t0)

    op = LinearOperator((m, m), matvec=lambda v: sigma * (A @ (A.T @ v)),
                        dtype=float)
    steps = [0]

    def count(_):
        steps[0] += 1

    # a singular operator can divide by zero inside the iteration before
    # the failure surfaces through ``info``
    with np.errstate(divide="ignore", invalid="ignore"):
        y, info = cg(op, rhs, rtol=tol, atol=0.0,
                     maxiter=max_iter if max_iter is not None else 10 * m,
                     callback=count)
    if info != 0:
        raise SolverError(
            "conjugate-gradient solve on A A^T did not converge "
            f"(info={info}); the operator is singular beyond the right-hand "
            "side's reach, so the system has no consistent solution")
    xi = mu + sigma * (A.T @ y)
    residual = float(np.linalg.norm(b - A @ xi))
    return FlowSolution(xi=xi, method="bayes", iterations=steps[0],
                        residual_l2=residual, wall_time=perf_counter() - t0)


def solve_nnls(system: LinearSystem, **kwargs) -> FlowSolution:
    """Nonnegative flows for an assembled balance system."""
    return nnls(system.A, system.b, **kwargs)


def solve_least_norm(system: LinearSystem, **kwargs) -> FlowSolution:
    """Minimum-norm flows for an assembled balance system."""
    return least_norm(system.A, system.b, **kwargs)


def solve_bayes(system: LinearSystem, **kwargs) -> FlowSolution:
    """Posterior-mean flows for an assembled balance system."""
    return bayes_mean(system.A, system.b, **kwargs)


def dcgm_layer_weights(origins: np.ndarray, dests: np.ndarray,
                       s_out: np.ndarray, s_in: np.ndarray, z: float,
                       ref_total: float) -> np.ndarray:
    """Degree-corrected weights for one layer's edges.

    The raw weight of an edge is ``1/z + s_out[origin] * s_in[dest]``; the
    vector is then rescaled so the layer total equals ``ref_total`` exactly.
    """
    raw = 1.0 / z + s_out[origins] * s_in[dests]
    return raw * (ref_total / raw.sum())


def dcgm_weights(system: LinearSystem, reference: FlowSolution,
                 models: dict[LayerKind, LayerModel]) -> FlowSolution:
    """Spread layer totals over edges by degree-corrected strength products.

    Node strengths are the per-layer marginals of the reference flows.  The
    density parameter is the fitted one for fitness-driven layers; uniform
    layers use the equivalent ``L / (admissible - L)``.  Layer totals match
    the reference exactly by construction, and the weights are nonnegative
    whenever the reference flows are.  A layer whose reference mass is zero
    gets zero weights and a warning.
    """
    t0 = perf_counter()
    index = system.index
    xi = np.zeros(index.n_cols)
    for kind in LAYER_ORDER:
        sl = index.layer_slice(kind)
        if sl.start == sl.stop:
            continue
        ref = reference.xi[sl]
        ref_total = float(ref.sum())
        if not ref_total > 0:
            warnings.warn(f"{kind.value}: reference flows carry no mass; "
                          "layer weights set to zero", stacklevel=2)
            continue
        model = models[kind]
        origins = index.origins[sl]
        dests = index.dests[sl]
        n_origin, n_dest = model.shape
        s_out = np.bincount(origins, weights=ref, minlength=n_origin)
        s_in = np.bincount(dests, weights=ref, minlength=n_dest)
        z = model.z
        if z is None:
            z = model.target_links / (model.admissible - model.target_links)
        xi[sl] = dcgm_layer_weights(origins, dests, s_out, s_in, z, ref_total)
    residual = float(np.linalg.norm(system.A @ xi - system.b))
    return FlowSolution(xi=xi, method="dcgm", iterations=0,
                        residual_l2=residual, wall_time=perf_counter() - t0)


def evaluate(A, b, xi: np.ndarray, zero_eps: float = ZERO_EPS) -> SolverDiagnostics:
    """Residual and sign profile of a flow vector against ``A xi = b``.

    The relative error is the L1 residual as a percentage of the solution's
    L1 mass (NaN when the solution is identically zero).  Sign counting
    ignores entries below ``zero_eps`` times the largest magnitude, so
    numerically-zero leftovers are not misread as flows.
    """
    xi = np.asarray(xi, dtype=float)
    resid = A @ xi - np.asarray(b, dtype=float)
    l1 = float(np.abs(xi).sum())
    rel = 100.0 * float(np.abs(resid).sum()) / l1 if l1 > 0 else float("nan")
    scale = float(np.abs(xi).max()) if xi.size else 0.0
    if scale > 0:
        nz = np.abs(xi) > zero_eps * scale
        count = int(np.count_nonzero(nz))
        neg = 100.0 * float(np.count_nonzero(xi[nz] < 0)) / count
    else:
        count = 0
        neg = float("nan")
    return SolverDiagnostics(relative_error_pct=rel, negative_pct=neg,
                             nonzero_count=count)


def diagnostics(system: LinearSystem, solution: FlowSolution,
                zero_eps: float = ZERO_EPS) -> SolverDiagnostics:
    """Diagnostics of a solution against its assembled system."""
    return evaluate(system.A, system.b, solution.xi, zero_eps)
