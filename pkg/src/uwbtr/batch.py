"""Shared Gauss-Newton / Levenberg-Marquardt machinery for the batch solvers.

Problems supply a function producing whitened residuals and a (possibly
sparse) whitened Jacobian, plus a retraction applying tangent increments to
the iterate.  Column scaling keeps the normal equations well conditioned when
states mix metres, radians and seconds.
"""

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve


class NonConvergence(Exception):
    """Batch solve failed to converge within the iteration budget."""


class SparseBuilder:
    """Accumulates dense blocks of a large sparse matrix in COO form."""

    def __init__(self, shape):
        self.shape = shape
        self._rows = []
        self._cols = []
        self._vals = []

    def add_block(self, r0, c0, block):
        block = np.atleast_2d(block)
        m, n = block.shape
        rr, cc = np.meshgrid(np.arange(m) + r0, np.arange(n) + c0, indexing="ij")
        self._rows.append(rr.ravel())
        self._cols.append(cc.ravel())
        self._vals.append(np.asarray(block, dtype=float).ravel())

    def tocsr(self):
        return sp.coo_matrix(
            (
                np.concatenate(self._vals),
                (np.concatenate(self._rows), np.concatenate(self._cols)),
            ),
            shape=self.shape,
        ).tocsr()


def whitener(cov, floor=1e-24):
    """Inverse Cholesky factor of a covariance, with a diagonal floor."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    cov = cov + floor * np.eye(n)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(cov + 1e-9 * np.trace(cov) / n * np.eye(n))
    return np.linalg.inv(L)


def _solve_normal(J, r, col_scale, lam):
    """Solve the (damped, column-scaled) normal equations for the GN step.

    A Jacobi preconditioner is applied on top of the caller's column scaling:
    the residual weights span many decades (ToF rows are whitened by 1e10 or
    more) and the raw normal matrix is otherwise too ill-conditioned for an
    accurate step.
    """
    if sp.issparse(J):
        Js = J @ sp.diags(col_scale)
        H = (Js.T @ Js).tocsc()
        g = np.asarray(Js.T @ r).ravel()
        d = 1.0 / np.sqrt(H.diagonal() + 1e-300)
        Hp = (sp.diags(d) @ H @ sp.diags(d)).tocsc()
        if lam > 0.0:
            Hp = Hp + sp.diags(np.full(H.shape[0], lam))
        dz = d * spsolve(Hp, -(d * g))
    else:
        Js = J * col_scale[None, :]
        H = Js.T @ Js
        g = Js.T @ r
        d = 1.0 / np.sqrt(np.diag(H) + 1e-300)
        Hp = H * d[None, :] * d[:, None]
        if lam > 0.0:
            Hp = Hp + lam * np.eye(H.shape[0])
        dz = d * np.linalg.solve(Hp, -(d * g))
    return dz * col_scale


def solve_least_squares(
    residual_fn,
    x0,
    retract_fn,
    col_scale,
    max_iter=50,
    cost_tol=1e-9,
    step_tol=1e-10,
):
    """Minimize 0.5 ||r(x)||^2 by Gauss-Newton with LM damping on cost increase.

    residual_fn(x) -> (r, J) with whitened residual and Jacobian (J may be
    scipy.sparse).  Accepted iterations are monotone non-increasing in cost.
    Raises NonConvergence when the iteration or damping budget is exhausted.
    Returns (x, info) with the final whitened Jacobian/residual in info.
    """
    col_scale = np.asarray(col_scale, dtype=float)
    x = x0
    r, J = residual_fn(x)
    cost = 0.5 * float(r @ r)
    lam = 0.0
    history = [cost]
    turns = 0
    def finish():
        # first-order optimality as the Newton-decrement bound on the
        # remaining relative cost improvement (dimension-free)
        if sp.issparse(J):
            Js = J @ sp.diags(col_scale)
            g = np.asarray(Js.T @ r).ravel()
            dh = np.asarray(Js.multiply(Js).sum(axis=0)).ravel()
        else:
            Js = J * col_scale[None, :]
            g = Js.T @ r
            dh = np.sum(Js * Js, axis=0)
        gp = g / np.sqrt(dh + 1e-300)
        return x, {
            "iterations": len(history) - 1,
            "cost": cost,
            "history": history,
            "grad_norm": float(0.5 * (gp @ gp) / max(cost, 1e-300)),
            "residual": r,
            "jacobian": J,
        }

    polished = False
    nu = 2.0
    while len(history) - 1 < max_iter and turns < 4 * max_iter:
        turns += 1
        if cost < 1e-12 * max(len(r), 1):
            return finish()  # zero-residual fixpoint, already at float noise
        dx = _solve_normal(J, r, col_scale, lam)
        if lam == 0.0 and float(np.linalg.norm(dx)) < step_tol:
            return finish()  # the full Gauss-Newton step is already negligible
        x_new = retract_fn(x, dx)
        r_new, J_new = residual_fn(x_new)
        cost_new = 0.5 * float(r_new @ r_new)
        # gain ratio: actual cost drop over the drop the quadratic model
        # predicted for this step (Nielsen's damping adaptation)
        Jdx = J @ dx
        predicted = -float(r @ Jdx) - 0.5 * float(Jdx @ Jdx)
        rho = (cost - cost_new) / max(predicted, 1e-300)
        if not np.isfinite(cost_new) or cost_new > cost or predicted <= 0.0:
            if polished and lam == 0.0:
                return finish()  # post-polish GN step cannot improve; done
            lam = max(lam * nu, 1e-8)
            nu *= 2.0
            if lam > 1e12:
                raise NonConvergence(f"LM damping exhausted at cost {cost:.3e}")
            continue
        step = float(np.linalg.norm(dx))
        rel_drop = (cost - cost_new) / max(cost, 1e-300)
        was_damped = lam > 0.0
        x, r, J, cost = x_new, r_new, J_new, cost_new
        history.append(cost)
        lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
        nu = 2.0
        if lam < 1e-12:
            lam = 0.0
        if rel_drop < cost_tol or step < step_tol:
            if was_damped and not polished:
                # polish: a plateau reached under damping only counts once an
                # undamped Gauss-Newton step confirms it
                polished = True
                lam = 0.0
                continue
            return finish()
    raise NonConvergence(f"no convergence in {max_iter} iterations (cost {cost:.3e})")


def marginal_covariance(J, col_scale, index_slice):
    """Marginal covariance block of selected variables from a whitened Jacobian.

    Inverts the (scaled) Gauss-Newton information matrix on the requested
    columns only; all other variables are marginalized out.
    """
    col_scale = np.asarray(col_scale, dtype=float)
    n = len(col_scale)
    idx = np.arange(n)[index_slice]
    rhs = np.zeros((n, len(idx)))
    rhs[idx, np.arange(len(idx))] = 1.0
    if sp.issparse(J):
        Js = J @ sp.diags(col_scale)
        H = (Js.T @ Js).tocsc()
        d = 1.0 / np.sqrt(H.diagonal() + 1e-300)
        Hp = (sp.diags(d) @ H @ sp.diags(d)).tocsc()
        X = spsolve(Hp, sp.csc_matrix(rhs * d[:, None]))
        X = np.asarray(X.todense()) if sp.issparse(X) else np.atleast_2d(X.T).T
        X = X * d[:, None]
    else:
        Js = J * col_scale[None, :]
        H = Js.T @ Js
        d = 1.0 / np.sqrt(np.diag(H) + 1e-300)
        Hp = H * d[None, :] * d[:, None]
        X = d[:, None] * np.linalg.solve(Hp, rhs * d[:, None])
    cov_scaled = X[idx, :]
    scale = col_scale[idx]
    cov = cov_scaled * scale[None, :] * scale[:, None]
    return 0.5 * (cov + cov.T)
