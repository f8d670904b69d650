"""Exact point-to-polygon distance with dual certificates.

For a body-frame point ``p`` and footprint ``{z : G z <= h}`` the signed
distance equals the optimum of

    max_{mu, lam}  mu @ (G p - h)
    s.t.           mu >= 0,  ||lam|| <= 1,  mu @ G + lam = 0

(body frame, so the rotation is the identity). For a polygon the optimal
multipliers follow from the nearest boundary feature, so no iterative solver
is needed.
"""

from dataclasses import dataclass

import numpy as np

EDGE = 0
VERTEX = 1
INTERIOR_EDGE = 2
_KIND_NAMES = {EDGE: "edge", VERTEX: "vertex", INTERIOR_EDGE: "interior_edge"}


@dataclass(frozen=True, eq=False)
class DualPair:
    mu: np.ndarray
    lam: np.ndarray


@dataclass(frozen=True, eq=False)
class DistanceResult:
    d: float
    dual: DualPair
    nearest_feature: tuple  # ("edge", j) | ("vertex", v) | ("interior_edge", j)

    @property
    def mu(self):
        return self.dual.mu

    @property
    def lam(self):
        return self.dual.lam


@dataclass(frozen=True, eq=False)
class DistanceTable:
    """Vectorized distance results; leading axes index (step, point) or (point,)."""

    d: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    kind: np.ndarray
    index: np.ndarray

    def __getitem__(self, key):
        return DistanceResult(
            d=float(self.d[key]),
            dual=DualPair(mu=self.mu[key].copy(), lam=self.lam[key].copy()),
            nearest_feature=(_KIND_NAMES[int(self.kind[key])], int(self.index[key])),
        )

    @property
    def shape(self):
        return self.d.shape


def exact_distance_batch(points, shape):
    """Signed distances and optimal duals for an ``(..., 2)`` array of body-frame points."""
    pts = np.asarray(points, dtype=float)
    lead = pts.shape[:-1]
    P = pts.reshape(-1, 2)
    n = P.shape[0]
    G, h, V = shape.G, shape.h, shape.vertices
    nl = G.shape[0]

    slack = P @ G.T - h  # (n, l)
    inside = slack.max(axis=1) <= 0.0

    d = np.empty(n)
    mu = np.zeros((n, nl))
    lam = np.zeros((n, 2))
    kind = np.empty(n, dtype=np.int8)
    index = np.empty(n, dtype=np.int64)

    if np.any(inside):
        j = np.argmax(slack[inside], axis=1)
        rows = np.flatnonzero(inside)
        d[rows] = slack[rows, j]
        mu[rows, j] = 1.0
        lam[rows] = -G[j]
        kind[rows] = INTERIOR_EDGE
        index[rows] = j

    out = np.flatnonzero(~inside)
    if out.size:
        Q = P[out]
        E = np.roll(V, -1, axis=0) - V  # edge vectors
        rel = Q[:, None, :] - V[None, :, :]  # (k, l, 2)
        t = np.clip((rel * E).sum(axis=2) / (E * E).sum(axis=1), 0.0, 1.0)
        diff = rel - t[..., None] * E[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        j = np.argmin(dist, axis=1)
        tj = t[np.arange(out.size), j]
        dj = dist[np.arange(out.size), j]
        d[out] = dj

        on_edge = (tj > 0.0) & (tj < 1.0)
        rows = out[on_edge]
        je = j[on_edge]
        mu[rows, je] = 1.0
        lam[rows] = -G[je]
        kind[rows] = EDGE
        index[rows] = je

        at_vertex = ~on_edge
        if np.any(at_vertex):
            rows = out[at_vertex]
            jv = j[at_vertex]
            vidx = np.where(tj[at_vertex] >= 1.0, (jv + 1) % nl, jv)
            normal = Q[at_vertex] - V[vidx]
            normal /= np.linalg.norm(normal, axis=1, keepdims=True)
            prev_edge = (vidx - 1) % nl
            # Solve [g_prev g_next] @ [a, b] = normal for the two adjacent edges.
            ga, gb = G[prev_edge], G[vidx]
            det = ga[:, 0] * gb[:, 1] - ga[:, 1] * gb[:, 0]
            a = (normal[:, 0] * gb[:, 1] - normal[:, 1] * gb[:, 0]) / det
            b = (ga[:, 0] * normal[:, 1] - ga[:, 1] * normal[:, 0]) / det
            mu[rows, prev_edge] = np.maximum(a, 0.0)
            mu[rows, vidx] = np.maximum(b, 0.0)
            lam[rows] = -normal
            kind[rows] = VERTEX
            index[rows] = vidx

    return DistanceTable(
        d=d.reshape(lead),
        mu=mu.reshape(lead + (nl,)),
        lam=lam.reshape(lead + (2,)),
        kind=kind.reshape(lead),
        index=index.reshape(lead),
    )


def exact_distance(point, shape):
    """Signed distance from one body-frame point to the footprint, with duals.

    Outside points get the Euclidean distance to the boundary; inside points
    get ``max_j (g_j p - h_j)``, which is negative. Ties go to the lowest
    edge index.
    """
    table = exact_distance_batch(np.asarray(point, dtype=float).reshape(1, 2), shape)
    return table[0]


def batch_exact(point_flow, shape):
    """Apply :func:`exact_distance` to every body-frame point of a point flow."""
    return exact_distance_batch(point_flow.body, shape)


def project_onto_polygon(point, shape):
    """Nearest footprint point by enumerating every edge and vertex.

    Returns ``(z, feature)``; interior points map to themselves with feature
    ``("interior", -1)``.
    """
    p = np.asarray(point, dtype=float)
    G, h, V = shape.G, shape.h, shape.vertices
    if np.all(G @ p - h <= 0.0):
        return p.copy(), ("interior", -1)
    best = None
    nl = len(V)
    for k in range(nl):
        dist = np.hypot(*(p - V[k]))
        if best is None or dist < best[0]:
            best = (dist, V[k].copy(), ("vertex", k))
    for j in range(nl):
        a, b = V[j], V[(j + 1) % nl]
        e = b - a
        t = np.dot(p - a, e) / np.dot(e, e)
        if 0.0 < t < 1.0:
            z = a + t * e
            dist = np.hypot(*(p - z))
            if dist < best[0]:
                best = (dist, z, ("edge", j))
    return best[1], best[2]


def geometric_signed_distance(point, shape):
    """Signed distance from brute-force boundary enumeration (independent of the dual path)."""
    p = np.asarray(point, dtype=float)
    z, feature = project_onto_polygon(p, shape)
    if feature[0] != "interior":
        return float(np.hypot(*(p - z)))
    V = shape.vertices
    nl = len(V)
    best = np.inf
    for j in range(nl):
        a, b = V[j], V[(j + 1) % nl]
        e = b - a
        t = np.clip(np.dot(p - a, e) / np.dot(e, e), 0.0, 1.0)
        best = min(best, float(np.hypot(*(p - a - t * e))))
    return -best


def dual_residuals(mu, lam, point, shape, d_geom=None):
    """Constraint violations of a candidate dual pair, as a dict of nonnegative numbers."""
    mu = np.asarray(mu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    p = np.asarray(point, dtype=float)
    res = {
        "mu_negative": float(max(0.0, -mu.min())),
        "lam_norm_excess": float(max(0.0, np.linalg.norm(lam) - 1.0)),
        "stationarity": float(np.abs(mu @ shape.G + lam).max()),
    }
    if d_geom is None:
        d_geom = geometric_signed_distance(p, shape)
    res["objective_gap"] = float(abs(mu @ (shape.G @ p - shape.h) - d_geom))
    return res


def verify_dual(result, point, shape, tol=1e-8):
    """Check a :class:`DistanceResult` against the dual constraints and a brute-force distance."""
    d_geom = geometric_signed_distance(point, shape)
    res = dual_residuals(result.mu, result.lam, point, shape, d_geom=d_geom)
    return (
        res["mu_negative"] == 0.0
        and res["lam_norm_excess"] <= 1e-9
        and res["stationarity"] <= 1e-9
        and res["objective_gap"] <= tol
        and abs(result.d - d_geom) <= tol
    )
