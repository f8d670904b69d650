"""Convex receding-horizon planner with the latent-distance regularizer.

Over a horizon of ``H`` steps the planner picks states ``S`` (``H + 1``),
controls ``U`` (``H``) and per-step safety distances ``d`` (``H + 1``) to
minimize

    sum_h ||q * (s_h - s_ref_h)||^2 + ||p * (u_h - u_ref_h)||^2        tracking
    + rho1/2 sum_{h,i} min(I_hi, 0)^2 + rho2/2 sum_{h,i} ||E_hi||^2   regularizer
    - eta * sum_h d_h                                                 distance reward
    + b/2 sum_h ||s_h - s_prev_h||^2                                  proximal

subject to dynamics linearized about the previous plan and box bounds on
``U`` and ``d``. With the multipliers held fixed, ``I`` is affine in the
position and ``d``::

    I_hi = lam_hi . t_h - (lam_hi . p_hi + mu_hi . h) - d_h

The states are eliminated through the dynamics, which leaves a box-bounded
QP with squared-hinge rows (see :mod:`pointnav.qp`).
"""

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import BuildError, ConfigError
from .geometry import rotation, unwrap_near
from .kinematics import linearize_plan
from .qp import HingeQP, solve_hinge_qp

LEARNABLE = ("q", "p", "d_min", "d_max", "eta")


@dataclass(frozen=True)
class NrmpParams:
    """Planner weights. ``q``, ``p``, ``d_min``, ``d_max`` and ``eta`` are learnable."""

    q: tuple = (1.0, 1.0, 1.0)
    p: tuple = (1.0, 1.0)
    d_min: float = 0.1
    d_max: float = 1.0
    eta: float = 1.0
    rho1: float = 100.0
    rho2: float = 0.0
    b_k: float = 1.0
    m_prime: int = 100
    horizon: int = 10

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(float(v) for v in self.q))
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))
        if len(self.q) != 3 or len(self.p) != 2:
            raise ConfigError("q needs 3 entries and p needs 2")
        if not 0.0 < self.d_min <= self.d_max:
            raise ConfigError(f"need 0 < d_min <= d_max, got {self.d_min}, {self.d_max}")
        for name in ("eta", "rho1", "rho2", "b_k"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if min(self.q) < 0 or min(self.p) < 0:
            raise ConfigError("q and p must be nonnegative")
        if self.m_prime < 1 or self.horizon < 1:
            raise ConfigError("m_prime and horizon must be positive")

    def learnable(self):
        return {
            "q": np.array(self.q),
            "p": np.array(self.p),
            "d_min": np.array([self.d_min]),
            "d_max": np.array([self.d_max]),
            "eta": np.array([self.eta]),
        }

    def with_learnable(self, values):
        update = {}
        for key, val in values.items():
            if key not in LEARNABLE:
                raise KeyError(key)
            val = np.asarray(val, dtype=float).ravel()
            update[key] = tuple(val) if key in ("q", "p") else float(val[0])
        return replace(self, **update)

    def to_dict(self):
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown planner key {sorted(unknown)[0]!r}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class NominalPlan:
    """Reference states ``(H + 1, 3)`` and controls ``(H, 2)``."""

    states: np.ndarray
    controls: np.ndarray

    @property
    def horizon(self):
        return self.controls.shape[0]


# Penalty functions on a single (state, multiplier) pair.


def penalty_I(state, mu, lam, point, d, shape):
    """Safety margin ``lam . (t - p) - mu . h - d``; nonnegative means safe."""
    t = np.asarray(state[:2], dtype=float)
    return float(np.dot(lam, t - np.asarray(point, dtype=float)) - np.dot(mu, shape.h) - d)


def penalty_E(state, mu, lam, shape):
    """Stationarity residual ``mu^T G + lam^T R(theta)``."""
    return np.asarray(mu) @ shape.G + np.asarray(lam) @ rotation(state[2])


def _valid(features):
    return np.isfinite(features.d_hat)


def margins(S, d, features, shape):
    """``I`` for every selected feature; entries for masked features are ``nan``."""
    S = np.asarray(S, dtype=float)
    t = S[:, None, :2]
    I = (features.lam * (t - features.points)).sum(-1) - features.mu @ shape.h - np.asarray(d)[:, None]
    return np.where(_valid(features), I, np.nan)


def stationarity(S, features, shape):
    """``E`` for every selected feature, shape ``(H + 1, M', 2)``."""
    S = np.asarray(S, dtype=float)
    c, s = np.cos(S[:, 2])[:, None], np.sin(S[:, 2])[:, None]
    lam = features.lam
    rot = np.stack([c * lam[..., 0] + s * lam[..., 1], -s * lam[..., 0] + c * lam[..., 1]], -1)
    E = features.mu @ shape.G + rot
    return np.where(_valid(features)[..., None], E, 0.0)


def cost_terms(S, U, d, features, params, nominal, shape, prev_states=None):
    """Per-term costs ``C0``, ``Cr``, ``C1`` and ``proximal`` at a plan."""
    S = np.asarray(S, dtype=float)
    U = np.asarray(U, dtype=float)
    d = np.asarray(d, dtype=float)
    q, p = np.array(params.q), np.array(params.p)
    ds = S - nominal.states
    ds[:, 2] = S[:, 2] - unwrap_near(nominal.states[:, 2], S[:, 2])
    du = U - nominal.controls
    c0 = float(((q * ds) ** 2).sum() + ((p * du) ** 2).sum())
    cr = 0.0
    if features is not None and features.num_points:
        I = margins(S, d, features, shape)
        hinge = np.minimum(np.nan_to_num(I, nan=0.0), 0.0)
        cr = 0.5 * params.rho1 * float((hinge**2).sum())
        if params.rho2:
            E = stationarity(S, features, shape)
            cr += 0.5 * params.rho2 * float((E**2).sum())
    c1 = -params.eta * float(d.sum())
    prox = 0.0
    if prev_states is not None:
        prox = 0.5 * params.b_k * float(((S - prev_states) ** 2).sum())
    return {"C0": c0, "Cr": cr, "C1": c1, "proximal": prox}


def cost_e2e(S, U, features, params, nominal, shape, d=None):
    """End-to-end cost ``C0 + Cr``.

    Without ``d`` the margins use ``d = d_min`` everywhere. With ``d`` the
    distance reward ``C1`` is included too, which is the quantity the
    alternating loop decreases.
    """
    if d is None:
        d = np.full(np.asarray(S).shape[0], params.d_min)
        terms = cost_terms(S, U, d, features, params, nominal, shape)
        return terms["C0"] + terms["Cr"]
    terms = cost_terms(S, U, d, features, params, nominal, shape)
    return terms["C0"] + terms["Cr"] + terms["C1"]


@dataclass(frozen=True, eq=False)
class DppRecords:
    """Parameter records entering the problem affinely.

    ``gamma_a = q * s_ref``, ``gamma_b = p * u_ref``, ``gamma_c = lam``,
    ``gamma_d = mu G`` and ``xi_a = lam . p + mu . h``.
    """

    gamma_a: np.ndarray
    gamma_b: np.ndarray
    gamma_c: np.ndarray
    gamma_d: np.ndarray
    xi_a: np.ndarray


@dataclass(frozen=True, eq=False)
class PlanProblem:
    """Condensed planning QP over ``x = [U.ravel(), d]``.

    ``S.ravel() = state_offset + state_map @ x`` recovers the states.
    """

    qp: HingeQP
    state_offset: np.ndarray
    state_map: np.ndarray
    s0: np.ndarray
    nominal: NominalPlan
    prev_states: np.ndarray
    prev_controls: np.ndarray
    dynamics: tuple  # (A, B, c) stacked per step
    features: object
    params: NrmpParams
    shape: object
    model: object
    records: DppRecords
    hinge_rows: np.ndarray  # (n_rows, 2) -> (h, i)

    @property
    def horizon(self):
        return self.nominal.horizon

    def unpack(self, x):
        H = self.horizon
        U = x[: 2 * H].reshape(H, 2)
        d = x[2 * H :].copy()
        S = (self.state_offset + self.state_map @ x).reshape(H + 1, 3)
        return S, U, d

    def pack(self, U, d):
        return np.concatenate([np.asarray(U, dtype=float).ravel(), np.asarray(d, dtype=float)])

    def dynamics_residual(self, S, U):
        A, B, c = self.dynamics
        pred = np.einsum("hij,hj->hi", A, S[:-1]) + np.einsum("hij,hj->hi", B, U) + c
        return float(max(np.abs(S[1:] - pred).max(), np.abs(S[0] - self.s0).max()))

    def slack_form(self):
        """Explicit slack formulation over ``z = [S.ravel(), U.ravel(), d, w]``.

        Returns a dict with ``P, q, const`` (objective ``0.5 z'Pz + q'z +
        const``), ``A_eq, b_eq`` (dynamics and initial state), ``lo, hi``
        (bounds, ``+-inf`` where free) and ``A_ge, b_ge`` for rows
        ``A_ge z >= b_ge`` (the slack lower bounds ``w >= -I``).
        """
        H = self.horizon
        nS, nU, nd = 3 * (H + 1), 2 * H, H + 1
        nw = self.hinge_rows.shape[0]
        n = nS + nU + nd + nw
        P = np.zeros((n, n))
        qv = np.zeros(n)
        const = 0.0
        prm = self.params
        qw = np.tile(2.0 * np.array(prm.q) ** 2 + prm.b_k, H + 1)
        P[:nS, :nS] = np.diag(qw)
        ref = self.nominal.states.ravel()
        prev = self.prev_states.ravel()
        q2 = np.tile(np.array(prm.q) ** 2, H + 1)
        qv[:nS] = -2.0 * q2 * ref - prm.b_k * prev
        const += float((q2 * ref**2).sum() + 0.5 * prm.b_k * (prev**2).sum())
        p2 = np.tile(np.array(prm.p) ** 2, H)
        P[nS : nS + nU, nS : nS + nU] = np.diag(2.0 * p2)
        uref = self.nominal.controls.ravel()
        qv[nS : nS + nU] = -2.0 * p2 * uref
        const += float((p2 * uref**2).sum())
        qv[nS + nU : nS + nU + nd] = -prm.eta
        P[n - nw :, n - nw :] = prm.rho1 * np.eye(nw)
        if prm.rho2:
            Pe, qe, ce = self._stationarity_quadratic()
            P[:nS, :nS] += Pe
            qv[:nS] += qe
            const += ce

        A, B, c = self.dynamics
        A_eq = np.zeros((nS, n))
        b_eq = np.zeros(nS)
        A_eq[:3, :3] = np.eye(3)
        b_eq[:3] = self.s0
        for h in range(H):
            r = 3 * (h + 1)
            A_eq[r : r + 3, 3 * h : 3 * h + 3] = -A[h]
            A_eq[r : r + 3, r : r + 3] = np.eye(3)
            A_eq[r : r + 3, nS + 2 * h : nS + 2 * h + 2] = -B[h]
            b_eq[r : r + 3] = c[h]

        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        lo[nS : nS + nU] = np.tile(self.model.lower, H)
        hi[nS : nS + nU] = np.tile(self.model.upper, H)
        lo[nS + nU : nS + nU + nd] = prm.d_min
        hi[nS + nU : nS + nU + nd] = prm.d_max
        lo[n - nw :] = 0.0

        # w_k >= -I_k  <=>  w_k + lam . t_h - d_h >= xi_a
        A_ge = np.zeros((nw, n))
        b_ge = np.zeros(nw)
        for k, (h, i) in enumerate(self.hinge_rows):
            A_ge[k, 3 * h : 3 * h + 2] = self.records.gamma_c[h, i]
            A_ge[k, nS + nU + h] = -1.0
            A_ge[k, n - nw + k] = 1.0
            b_ge[k] = self.records.xi_a[h, i]
        return {
            "P": P, "q": qv, "const": const,
            "A_eq": A_eq, "b_eq": b_eq,
            "lo": lo, "hi": hi,
            "A_ge": A_ge, "b_ge": b_ge,
            "sizes": (nS, nU, nd, nw),
        }

    def slack_objective(self, S, U, d, w):
        form = self.slack_form()
        z = np.concatenate([np.ravel(S), np.ravel(U), np.ravel(d), np.ravel(w)])
        return float(0.5 * z @ form["P"] @ z + form["q"] @ z + form["const"])

    def _stationarity_quadratic(self):
        """``rho2/2 sum ||E||^2`` as a quadratic in ``S.ravel()``, with ``R`` linearized at ``s_prev``."""
        H = self.horizon
        nS = 3 * (H + 1)
        P = np.zeros((nS, nS))
        qv = np.zeros(nS)
        const = 0.0
        rho2 = self.params.rho2
        for h, i in self.hinge_rows:
            th = self.prev_states[h, 2]
            lam = self.records.gamma_c[h, i]
            R = rotation(th)
            dR = np.array([[-np.sin(th), -np.cos(th)], [np.cos(th), -np.sin(th)]])
            e0 = self.records.gamma_d[h, i] + lam @ R - (lam @ dR) * th
            e1 = lam @ dR
            k = 3 * h + 2
            P[k, k] += rho2 * (e1 @ e1)
            qv[k] += rho2 * (e0 @ e1)
            const += 0.5 * rho2 * (e0 @ e0)
        return P, qv, const


def _condense(s0, A, B, c):
    """Affine map ``S.ravel() = offset + J @ U.ravel()`` of the linear dynamics."""
    H = A.shape[0]
    offset = np.zeros((H + 1, 3))
    J = np.zeros((H + 1, 3, 2 * H))
    offset[0] = s0
    for h in range(H):
        offset[h + 1] = A[h] @ offset[h] + c[h]
        J[h + 1] = A[h] @ J[h]
        J[h + 1][:, 2 * h : 2 * h + 2] += B[h]
    return offset.ravel(), J.reshape(3 * (H + 1), 2 * H)


def build_problem(nominal, features, params, model, shape, prev_states, prev_controls, b_k=None):
    """Assemble the planning QP around the previous plan ``(prev_states, prev_controls)``.

    ``features`` must already be reduced to the ``m_prime`` nearest points
    per step (or be ``None``); features with non-finite ``d_hat`` are ignored.
    """
    H = nominal.controls.shape[0]
    prev_states = np.asarray(prev_states, dtype=float)
    prev_controls = np.asarray(prev_controls, dtype=float)
    if nominal.states.shape != (H + 1, 3):
        raise BuildError(f"nominal states must be ({H + 1}, 3), got {nominal.states.shape}")
    if prev_states.shape != (H + 1, 3) or prev_controls.shape != (H, 2):
        raise BuildError("previous plan does not match the nominal horizon")
    if features is not None and features.mu.shape[0] != H + 1:
        raise BuildError("features cover a different horizon than the plan")
    if features is not None and features.mu.shape[-1] != shape.l:
        raise BuildError("feature multipliers do not match the robot shape")
    if b_k is not None:
        params = replace(params, b_k=b_k)

    ref_states = nominal.states.copy()
    ref_states[:, 2] = unwrap_near(ref_states[:, 2], prev_states[:, 2])
    nominal = NominalPlan(states=ref_states, controls=nominal.controls)
    s0 = prev_states[0]
    A, B, c = linearize_plan(prev_states, prev_controls, model)
    offset, J = _condense(s0, A, B, c)

    nU, nd = 2 * H, H + 1
    n = nU + nd
    nS = 3 * (H + 1)
    state_map = np.zeros((nS, n))
    state_map[:, :nU] = J

    q2 = np.array(params.q) ** 2
    p2 = np.array(params.p) ** 2
    ps = np.tile(2.0 * q2 + params.b_k, H + 1)
    rs = -(np.tile(2.0 * q2, H + 1) * ref_states.ravel() + params.b_k * prev_states.ravel())
    const = float((np.tile(q2, H + 1) * ref_states.ravel() ** 2).sum())
    const += 0.5 * params.b_k * float((prev_states.ravel() ** 2).sum())

    Hmat = np.zeros((n, n))
    g = np.zeros(n)
    Hmat[:nU, :nU] = J.T @ (ps[:, None] * J) + np.diag(np.tile(2.0 * p2, H))
    g[:nU] = J.T @ (ps * offset + rs) - np.tile(2.0 * p2, H) * nominal.controls.ravel()
    g[nU:] = -params.eta
    const += float(0.5 * offset @ (ps * offset) + rs @ offset)
    const += float((np.tile(p2, H) * nominal.controls.ravel() ** 2).sum())

    l = shape.l
    if features is None or features.num_points == 0:
        m = 0
        gamma_c = np.zeros((H + 1, 0, 2))
        gamma_d = np.zeros((H + 1, 0, 2))
        xi_a = np.zeros((H + 1, 0))
        rows = np.zeros((0, 2), dtype=int)
        mu = np.zeros((H + 1, 0, l))
    else:
        m = features.num_points
        mu = features.mu
        gamma_c = features.lam.copy()
        gamma_d = mu @ shape.G
        xi_a = (gamma_c * features.points).sum(-1) + mu @ shape.h
        rows = np.argwhere(_valid(features))

    C = np.zeros((rows.shape[0], n))
    xi = np.zeros(rows.shape[0])
    if rows.shape[0]:
        hs, cols = rows[:, 0], rows[:, 1]
        lam = gamma_c[hs, cols]
        pos_map = J.reshape(H + 1, 3, nU)[:, :2]
        pos_offset = offset.reshape(H + 1, 3)[:, :2]
        C[:, :nU] = np.einsum("kj,kjn->kn", lam, pos_map[hs])
        C[np.arange(rows.shape[0]), nU + hs] = -1.0
        xi = xi_a[hs, cols] - (lam * pos_offset[hs]).sum(-1)

    records = DppRecords(
        gamma_a=np.array(params.q) * ref_states,
        gamma_b=np.array(params.p) * nominal.controls,
        gamma_c=gamma_c,
        gamma_d=gamma_d,
        xi_a=xi_a,
    )
    lo = np.concatenate([np.tile(model.lower, H), np.full(nd, params.d_min)])
    hi = np.concatenate([np.tile(model.upper, H), np.full(nd, params.d_max)])

    problem = PlanProblem(
        qp=None,
        state_offset=offset,
        state_map=state_map,
        s0=s0.copy(),
        nominal=nominal,
        prev_states=prev_states.copy(),
        prev_controls=prev_controls.copy(),
        dynamics=(A, B, c),
        features=features,
        params=params,
        shape=shape,
        model=model,
        records=records,
        hinge_rows=rows,
    )
    if params.rho2 and rows.shape[0]:
        Pe, qe, ce = problem._stationarity_quadratic()
        Hmat += state_map.T @ Pe @ state_map
        g += state_map.T @ (Pe @ offset + qe)
        const += float(0.5 * offset @ Pe @ offset + qe @ offset + ce)
    qp = HingeQP(H=0.5 * (Hmat + Hmat.T), g=g, lo=lo, hi=hi, C=C, xi=xi, rho=params.rho1, const=const)
    object.__setattr__(problem, "qp", qp)
    return problem


@dataclass(frozen=True, eq=False)
class PlanSolution:
    S: np.ndarray
    U: np.ndarray
    d: np.ndarray
    objective: float
    costs: dict
    status: str
    iterations: int
    pg_norm: float
    x: np.ndarray = field(repr=False, default=None)


def solve(problem, tol=1e-6, x0=None):
    """Solve a :class:`PlanProblem`; warm-start with a previous ``x`` if given.

    Raises :class:`~pointnav.errors.SolveError` when the optimality
    certificate cannot be reached.
    """
    if x0 is None:
        x0 = problem.pack(problem.prev_controls, np.full(problem.horizon + 1, problem.params.d_min))
    res = solve_hinge_qp(problem.qp, x0=x0, tol=tol)
    S, U, d = problem.unpack(res.x)
    # Bounds hold exactly after the final clip inside the solver.
    costs = cost_terms(
        S, U, d, problem.features, problem.params, problem.nominal, problem.shape, problem.prev_states
    )
    return PlanSolution(
        S=S,
        U=U,
        d=d,
        objective=res.objective,
        costs=costs,
        status=res.status,
        iterations=res.admm_iterations + res.newton_iterations,
        pg_norm=res.pg_norm,
        x=res.x,
    )
