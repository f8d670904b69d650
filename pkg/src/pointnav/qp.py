"""Box-constrained convex QP with squared-hinge penalty rows.

Problem::

    minimize   0.5 x'Hx + g'x + (rho / 2) * sum_j min((Cx)_j - xi_j, 0)^2
    subject to lo <= x <= hi

This is the slack QP ``min ... + (rho/2)||w||^2`` with ``w >= 0`` and
``w >= xi - Cx`` after minimizing out ``w``. The solver runs a fixed-step
ADMM (relaxed, OSQP-style splitting on ``z = [x; Cx]``) and finishes with
projected Newton steps on the active pieces, which is exact once the active
sets settle.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import SolveError


@dataclass(frozen=True, eq=False)
class HingeQP:
    H: np.ndarray
    g: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    C: np.ndarray
    xi: np.ndarray
    rho: float
    const: float = 0.0

    @property
    def n(self):
        return self.g.shape[0]

    @property
    def m(self):
        return self.xi.shape[0]

    def hinge_residual(self, x):
        return np.minimum(self.C @ x - self.xi, 0.0)

    def objective(self, x):
        r = self.hinge_residual(x)
        return float(
            0.5 * x @ self.H @ x + self.g @ x + 0.5 * self.rho * (r @ r) + self.const
        )

    def gradient(self, x):
        return self.H @ x + self.g + self.rho * (self.C.T @ self.hinge_residual(x))

    def projected_gradient(self, x):
        return x - np.clip(x - self.gradient(x), self.lo, self.hi)


@dataclass(frozen=True, eq=False)
class QPResult:
    x: np.ndarray
    objective: float
    status: str
    admm_iterations: int
    newton_iterations: int
    pg_norm: float


def _admm(qp, x, max_iter, tol, step):
    n = qp.n
    sigma = 1e-6
    K = qp.H + (sigma + step) * np.eye(n) + step * (qp.C.T @ qp.C)
    # n is small (controls plus distances), so an explicit inverse is cheapest per iteration.
    K_inv = cho_solve(cho_factor(K), np.eye(n))
    C, Ct = qp.C, qp.C.T
    alpha = 1.6
    zb = np.clip(x, qp.lo, qp.hi)
    zh = C @ x
    yb = np.zeros(n)
    yh = np.zeros(qp.m)
    shrink = qp.rho / (qp.rho + step)
    it = 0
    for it in range(1, max_iter + 1):
        xt = K_inv @ (sigma * x - qp.g + step * zb - yb + Ct @ (step * zh - yh))
        zht = C @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zb_hat = alpha * xt + (1.0 - alpha) * zb
        zh_hat = alpha * zht + (1.0 - alpha) * zh
        zb = np.clip(zb_hat + yb / step, qp.lo, qp.hi)
        yb += step * (zb_hat - zb)
        a = zh_hat + yh / step
        zh = np.where(a >= qp.xi, a, a + shrink * (qp.xi - a))
        yh += step * (zh_hat - zh)
        if it % 10 == 0:
            prim = max(np.abs(x - zb).max(initial=0.0), np.abs(C @ x - zh).max(initial=0.0))
            dual = np.abs(qp.H @ x + qp.g + yb + Ct @ yh).max(initial=0.0)
            if prim <= tol and dual <= tol:
                break
    return np.clip(x, qp.lo, qp.hi), it


def _newton_direction(qp, x, grad, free, active, rows, reg):
    Cj = qp.C[rows]
    hess = qp.H + qp.rho * (Cj.T @ Cj)
    d = np.zeros(qp.n)
    if free.any():
        Hff = hess[np.ix_(free, free)] + reg * np.eye(int(free.sum()))
        try:
            d[free] = -cho_solve(cho_factor(Hff), grad[free])
        except np.linalg.LinAlgError:
            d[free] = -np.linalg.lstsq(Hff, grad[free], rcond=None)[0]
    d[active] = -grad[active]
    return d


def _projected_newton(qp, x, tol, max_iter):
    """Bertsekas-style projected Newton with an Armijo search along the projection arc.

    Near the solution the objective decrease drops below rounding level, so a
    full step is also accepted whenever it shrinks the projected gradient.
    """
    reg = 1e-11 * (1.0 + np.abs(np.diag(qp.H)).max(initial=0.0))
    # Frobenius norms bound the gradient Lipschitz constant from above.
    lipschitz = np.linalg.norm(qp.H) + qp.rho * float((qp.C * qp.C).sum()) + 1e-12
    f = qp.objective(x)
    grad = qp.gradient(x)
    pg_norm = np.abs(x - np.clip(x - grad, qp.lo, qp.hi)).max(initial=0.0)
    for it in range(1, max_iter + 1):
        if pg_norm <= tol:
            return x, it - 1, pg_norm
        eps = min(1e-3, pg_norm)
        active = ((x <= qp.lo + eps) & (grad > 0)) | ((x >= qp.hi - eps) & (grad < 0))
        free = ~active
        r = qp.C @ x - qp.xi
        near = max(1e-9, min(1e-2, 10.0 * pg_norm))
        moved = False
        # Rows close to their kink may switch on along the step, so the second
        # attempt includes them; the last resort is a plain projected gradient step.
        for attempt in range(3):
            if attempt < 2:
                rows = r < 0.0 if attempt == 0 else r <= near
                d = _newton_direction(qp, x, grad, free, active, rows, reg)
            else:
                d = -grad / lipschitz
            t = 1.0
            while t >= 1e-12:
                x_new = np.clip(x + t * d, qp.lo, qp.hi)
                f_new = qp.objective(x_new)
                if f_new <= f + 1e-4 * (grad @ (x_new - x)) and f_new < f:
                    moved = True
                    break
                if t == 1.0 and f_new <= f + 1e-13 * (1.0 + abs(f)):
                    g_new = qp.gradient(x_new)
                    pg_new = np.abs(x_new - np.clip(x_new - g_new, qp.lo, qp.hi)).max(initial=0.0)
                    if pg_new < pg_norm:
                        moved = True
                        break
                t *= 0.5
            if moved:
                break
        if not moved:
            return x, it, pg_norm
        x, f = x_new, f_new
        grad = qp.gradient(x)
        pg_norm = np.abs(x - np.clip(x - grad, qp.lo, qp.hi)).max(initial=0.0)
    return x, max_iter, pg_norm


def solve_hinge_qp(qp, x0=None, tol=1e-6, admm_iter=50, admm_step=None, newton_iter=50):
    """Solve a :class:`HingeQP`; raises :class:`SolveError` if ``tol`` is not reached.

    ``x0`` warm-starts the splitting iterations. The result is deterministic
    for identical inputs.
    """
    if np.any(qp.lo > qp.hi):
        bad = np.flatnonzero(qp.lo > qp.hi)
        raise SolveError("empty box constraint", residuals={"box_rows": bad.tolist()})
    x = np.zeros(qp.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    x = np.clip(x, qp.lo, qp.hi)
    if admm_step is None:
        admm_step = max(1e-2, float(np.mean(np.abs(np.diag(qp.H)))))
    x, n_admm = _admm(qp, x, admm_iter, max(tol, 1e-4), admm_step)
    x, n_newton, pg_norm = _projected_newton(qp, x, tol, newton_iter)
    if pg_norm > tol:
        # Retry from a longer splitting run before giving up.
        x2, more = _admm(qp, x, 20 * admm_iter, tol, admm_step)
        n_admm += more
        x2, extra, pg_norm = _projected_newton(qp, x2, tol, newton_iter)
        n_newton += extra
        x = x2
        if pg_norm > tol:
            raise SolveError(
                f"projected gradient {pg_norm:.3e} above tolerance {tol:.1e}",
                residuals={"projected_gradient": pg_norm},
            )
    return QPResult(
        x=x,
        objective=qp.objective(x),
        status="optimal",
        admm_iterations=n_admm,
        newton_iterations=n_newton,
        pg_norm=pg_norm,
    )
