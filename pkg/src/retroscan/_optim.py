"""Small damped-Newton helpers shared by the likelihood fits.

Stopping rule used everywhere: relative log-likelihood change < 1e-10 and
gradient sup-norm < 1e-8, at most ``max_iter`` iterations, with step-halving
whenever a full step would decrease the objective.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError

GRAD_TOL = 1e-8
REL_LL_TOL = 1e-10
MAX_ITER = 100


def fd_jacobian(func, x, h=1e-6):
    """Central finite-difference Jacobian of a vector-valued function."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(func(x), dtype=float)
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        step = h * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        jac[:, j] = (np.asarray(func(xp)) - np.asarray(func(xm))) / (2.0 * step)
    return jac


def newton_maximize(fun_grad, x0, max_iter=MAX_ITER, grad_tol=GRAD_TOL,
                    rel_tol=REL_LL_TOL, ridge=1e-10, bound=None):
    """Maximize a smooth objective by damped Newton with FD Hessian.

    ``fun_grad(x)`` returns (value, gradient).  ``bound`` optionally caps the
    sup-norm of the iterate (used to detect runaway parameters).  Returns
    (x, value, n_iter, converged).
    """
    x = np.asarray(x0, dtype=float).copy()
    val, grad = fun_grad(x)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < grad_tol:
            return x, val, it - 1, True
        hess = fd_jacobian(lambda z: fun_grad(z)[1], x)
        hess = 0.5 * (hess + hess.T)
        # Newton direction on the concave problem; regularize if indefinite
        w = np.linalg.eigvalsh(hess)
        shift = max(0.0, w.max() + ridge) if w.max() > -ridge else 0.0
        try:
            direction = np.linalg.solve(hess - (shift + ridge) * np.eye(x.size), grad)
        except np.linalg.LinAlgError:
            direction = grad / max(np.abs(grad).max(), 1.0)
        step = -direction
        # tolerate objective roundoff when accepting a step (a full Newton
        # step near the optimum improves by less than the summation noise)
        noise = 1e-11 * (abs(val) + 1.0)
        t = 1.0
        accepted = False
        for _ in range(50):
            cand = x + t * step
            if bound is not None and np.max(np.abs(cand)) > bound:
                t *= 0.5
                continue
            cand_val, cand_grad = fun_grad(cand)
            if np.isfinite(cand_val) and cand_val >= val - noise:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return x, val, it, bool(np.max(np.abs(grad)) < 1e-6)
        improved = cand_val - val
        x, val, grad = cand, cand_val, cand_grad
        if np.max(np.abs(grad)) < grad_tol:
            return x, val, it, True
        if abs(improved) < rel_tol * (abs(val) + 1.0) and np.max(np.abs(grad)) < 1e-6:
            return x, val, it, True
    converged = np.max(np.abs(grad)) < 1e-6
    return x, val, max_iter, converged


def require_converged(converged, what):
    if not converged:
        raise ConvergenceError(f"{what} did not converge")
