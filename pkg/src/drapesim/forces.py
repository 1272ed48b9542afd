"""Cloth force formulation: StVK membrane strain, discrete-shell bending,
gravity, and the matching energies used by the self-supervised loss.

Every function accepts positions as a plain (N,3) ndarray or a tracked
tensor; with tracked input the full computation lands on the tape, so the
returned forces stay differentiable (needed when backpropagating through
the relaxation steps). Forces are exact negative gradients of their
energies:

    strain   E = sum_T V_T (mu tr(G^T G) + lambda/2 tr(G)^2),  G = (F^T F - I)/2
    bending  E = sum_e  k s_e theta_e^2 / 2
    gravity  E = -sum_i m_i g . x_i

Per-vertex accumulation uses order-preserving bincount sums, so force
fields are bitwise reproducible regardless of thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .bodymodel import batch_query
from .errors import NumericError
from .meshcore import GarmentMesh, MaterialParams, RestState, signed_dihedral

DEFAULT_K_COLL = 1e3
_EYE2 = np.eye(2)
_MIN_AREA = 1e-12


def _check_finite(X, label):
    Xv = tp.value_of(X)
    if not np.isfinite(Xv).all():
        bad = int(np.where(~np.isfinite(Xv).all(axis=-1))[0][0])
        raise NumericError(f"{label}: non-finite position at vertex {bad}")


def deformation_gradients(X, rest: RestState):
    """Per-face deformation gradient F = Ds Dm^-1, shape (M,3,2).

    Fused primitive: linear in X, adjoint scatters g @ Dm^-T back to the
    face corners.
    """
    Xv = tp.value_of(X)
    F = rest.faces
    ds = np.stack([Xv[F[:, 1]] - Xv[F[:, 0]], Xv[F[:, 2]] - Xv[F[:, 0]]], axis=2)
    vals = ds @ rest.dm_inv
    n = Xv.shape[0]
    dm_inv = rest.dm_inv

    def backward(g):
        gds = np.einsum("mij,mkj->mik", g, dm_inv)  # g @ Dm^-T
        contrib = np.empty((F.shape[0], 3, 3))
        contrib[:, 1, :] = gds[:, :, 0]
        contrib[:, 2, :] = gds[:, :, 1]
        contrib[:, 0, :] = -(gds[:, :, 0] + gds[:, :, 1])
        return (tp._segment_add(contrib.reshape(-1, 3), F.reshape(-1), n),)

    return tp.custom_op((X,), vals, backward)


def green_strains(F):
    """Green-Lagrange strain G = (F^T F - I)/2 per face, shape (M,2,2)."""
    ftf = tp.einsum2("mki,mkj->mij", F, F)
    return tp.mul(tp.sub(ftf, _EYE2), 0.5)


def _stress(G, mat: MaterialParams):
    """Second Piola-Kirchhoff stress S = 2 mu G + lambda tr(G) I."""
    tr = tp.trace22(G)
    iso = tp.mul(tp.reshape(tr, tp.value_of(tr).shape + (1, 1)), mat.lam * _EYE2)
    return tp.add(tp.mul(G, 2.0 * mat.mu), iso)


def strain_forces(X, rest: RestState, mat: MaterialParams):
    """In-plane StVK nodal forces, (N,3): f_i = -sum_T V_T (F_T S_T) b_iT."""
    _check_finite(X, "strain_forces")
    F = deformation_gradients(X, rest)
    G = green_strains(F)
    S = _stress(G, mat)
    P = tp.matmul(F, S)  # first Piola-Kirchhoff, (M,3,2)
    fc = tp.einsum2("mij,mcj->mci", P, rest.b)  # per-corner force, (M,3,3)
    fc = tp.mul(fc, -rest.volume[:, None, None])
    n = tp.value_of(X).shape[0]
    return tp.scatter_add(tp.reshape(fc, (-1, 3)), rest.faces.reshape(-1), n)


def strain_energy(X, rest: RestState, mat: MaterialParams):
    """Total membrane energy, J (scalar)."""
    _check_finite(X, "strain_energy")
    F = deformation_gradients(X, rest)
    G = green_strains(F)
    gg = tp.einsum2("mij,mij->m", G, G)
    tr = tp.trace22(G)
    psi = tp.add(tp.mul(gg, mat.mu), tp.mul(tp.mul(tr, tr), 0.5 * mat.lam))
    return tp.reduce_sum(tp.mul(psi, rest.volume))


def hinge_angles(X, rest: RestState):
    """Signed dihedral angle per hinge, (H,). Fused primitive.

    Forward uses the atan2 form (stable near 0 and +-pi); the adjoint
    distributes g over the 4-vertex stencil with the analytic angle
    gradient.
    """
    Xv = tp.value_of(X)
    hv = rest.hinge_verts
    if hv.shape[0] == 0:
        return np.zeros(0)
    theta = signed_dihedral(Xv[hv[:, 0]], Xv[hv[:, 1]], Xv[hv[:, 2]], Xv[hv[:, 3]])
    n = Xv.shape[0]

    def backward(g):
        grads = hinge_angle_gradients(Xv, rest)  # raw path: (H,4,3)
        contrib = g[:, None, None] * grads
        return (tp._segment_add(contrib.reshape(-1, 3), hv.reshape(-1), n),)

    return tp.custom_op((X,), theta, backward)


def hinge_angle_gradients(X, rest: RestState):
    """Dihedral-angle gradient over each hinge stencil, (H,4,3).

    Composed from first-order primitives, so with tracked input the result
    itself stays differentiable (this is what makes bending forces usable
    inside the relaxation loop under end-to-end training).
    """
    hv = rest.hinge_verts
    h = hv.shape[0]
    if h == 0:
        return np.zeros((0, 4, 3))
    x0 = tp.gather(X, hv[:, 0])
    x1 = tp.gather(X, hv[:, 1])
    x2 = tp.gather(X, hv[:, 2])
    x3 = tp.gather(X, hv[:, 3])
    e0 = tp.sub(x1, x0)
    na = tp.cross(e0, tp.sub(x2, x0))
    nb = tp.cross(tp.sub(x0, x1), tp.sub(x3, x1))
    l = tp.vector_norm(e0, axis=1, keepdims=True)  # (H,1)
    ba = tp.div(na, tp.reduce_sum(tp.mul(na, na), axis=1, keepdims=True))
    bb = tp.div(nb, tp.reduce_sum(tp.mul(nb, nb), axis=1, keepdims=True))

    def edge_dot(p, q):
        return tp.div(
            tp.reduce_sum(tp.mul(tp.sub(p, q), e0), axis=1, keepdims=True), l
        )

    g2 = tp.mul(ba, tp.neg(l))
    g3 = tp.mul(bb, tp.neg(l))
    g0 = tp.add(
        tp.mul(ba, tp.neg(edge_dot(x2, x1))), tp.mul(bb, tp.neg(edge_dot(x3, x1)))
    )
    g1 = tp.add(tp.mul(ba, edge_dot(x2, x0)), tp.mul(bb, edge_dot(x3, x0)))
    parts = [tp.reshape(g, (h, 1, 3)) for g in (g0, g1, g2, g3)]
    return tp.concat(parts, axis=1)


def _valid_hinge_mask(Xv, rest: RestState):
    """Hinges whose two current triangles are non-degenerate."""
    F = rest.faces
    e1 = Xv[F[:, 1]] - Xv[F[:, 0]]
    e2 = Xv[F[:, 2]] - Xv[F[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    ok = areas >= _MIN_AREA
    return ok[rest.hinge_faces[:, 0]] & ok[rest.hinge_faces[:, 1]]


def count_degenerate_hinges(X, rest: RestState) -> int:
    """Hinges skipped by the bending term at these positions."""
    if rest.num_hinges == 0:
        return 0
    return int((~_valid_hinge_mask(tp.value_of(X), rest)).sum())


def _effective_angles(X, rest: RestState, mat: MaterialParams):
    theta = hinge_angles(X, rest)
    if mat.use_rest_angle:
        theta = tp.sub(theta, rest.hinge_rest_angle)
    return theta


def bend_forces(X, rest: RestState, mat: MaterialParams):
    """Discrete-shell bending forces, (N,3): per hinge -k s theta grad(theta).

    Hinges with a currently degenerate triangle are skipped (their count is
    available via count_degenerate_hinges).
    """
    _check_finite(X, "bend_forces")
    n = tp.value_of(X).shape[0]
    if rest.num_hinges == 0 or mat.k_bend == 0.0:
        return np.zeros((n, 3))
    theta = _effective_angles(X, rest, mat)
    mask = _valid_hinge_mask(tp.value_of(X), rest)
    coef = tp.mul(theta, (-mat.k_bend) * rest.hinge_scale * mask)
    grads = hinge_angle_gradients(X, rest)
    h = rest.num_hinges
    contrib = tp.mul(grads, tp.reshape(coef, (h, 1, 1)))
    return tp.scatter_add(
        tp.reshape(contrib, (-1, 3)), rest.hinge_verts.reshape(-1), n
    )


def bend_energy(X, rest: RestState, mat: MaterialParams):
    """Total bending energy, J (scalar)."""
    _check_finite(X, "bend_energy")
    if rest.num_hinges == 0 or mat.k_bend == 0.0:
        return np.float64(0.0)
    theta = _effective_angles(X, rest, mat)
    mask = _valid_hinge_mask(tp.value_of(X), rest)
    w = 0.5 * mat.k_bend * rest.hinge_scale * mask
    return tp.reduce_sum(tp.mul(tp.mul(theta, theta), w))


def gravity_forces(rest: RestState, mat: MaterialParams) -> np.ndarray:
    """Constant per-vertex weight m_i g, (N,3)."""
    return rest.mass[:, None] * mat.gravity[None, :]


def gravity_energy(X, rest: RestState, mat: MaterialParams, origin=None):
    """Potential energy -sum m_i g.(x_i - origin), J (scalar)."""
    _check_finite(X, "gravity_energy")
    gx = tp.einsum2("ij,j->i", X, mat.gravity)
    e = tp.neg(tp.reduce_sum(tp.mul(gx, rest.mass)))
    if origin is not None:
        e = tp.add(e, float(rest.mass.sum() * (mat.gravity @ np.asarray(origin))))
    return e


def internal_force(X, rest: RestState, mat: MaterialParams):
    """Aggregate driving force: strain + bending + gravity, (N,3)."""
    f = tp.add(strain_forces(X, rest, mat), bend_forces(X, rest, mat))
    return tp.add(f, gravity_forces(rest, mat))


def collision_energy(X, body, margin: float, k_coll: float = DEFAULT_K_COLL):
    """Cubic-hinge contact penalty k sum relu(margin - d)^3, J (scalar).

    The body geometry (nearest point, normal) is re-queried at the current
    values and held constant under differentiation, so gradients flow only
    through the vertex positions.
    """
    _check_finite(X, "collision_energy")
    Xv = tp.value_of(X)
    q = batch_query(body, Xv)
    d = tp.reduce_sum(tp.mul(tp.sub(X, q.p), q.n), axis=1)
    gap = tp.relu(tp.sub(float(margin), d))
    return tp.mul(tp.reduce_sum(tp.mul(tp.mul(gap, gap), gap)), float(k_coll))


def metric_b2g(X, mesh: GarmentMesh, body) -> float:
    """Body-to-garment interpenetration: % of rest area on penetrating faces.

    A face counts as penetrating when any of its vertices has true signed
    distance < 0.
    """
    Xv = tp.value_of(X)
    d = batch_query(body, Xv).d
    inside = d < 0.0
    face_hit = inside[mesh.faces].any(axis=1)
    V = mesh.vertices
    F = mesh.faces
    areas = 0.5 * np.linalg.norm(
        np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]), axis=1
    )
    total = areas.sum()
    if total == 0.0:
        return 0.0
    return float(100.0 * areas[face_hit].sum() / total)


def metric_energies(X, rest: RestState, mat: MaterialParams) -> dict:
    """Strain/bend energies in J plus per-rest-area (J/m^2) variants."""
    es = float(tp.value_of(strain_energy(X, rest, mat)))
    eb = float(tp.value_of(bend_energy(X, rest, mat)))
    return {
        "e_strain_J": es,
        "e_bend_J": eb,
        "e_strain_per_area": es / rest.total_area,
        "e_bend_per_area": eb / rest.total_area,
    }


@dataclass(frozen=True)
class EnergyBreakdown:
    """The four loss energies; total is their literal sum."""

    e_strain: float
    e_bend: float
    e_grav: float
    e_coll: float

    @property
    def total(self) -> float:
        return self.e_strain + self.e_bend + self.e_grav + self.e_coll


def energy_breakdown(
    X,
    rest: RestState,
    mat: MaterialParams,
    body=None,
    margin: float = 0.0,
    k_coll: float = DEFAULT_K_COLL,
    grav_origin=None,
) -> EnergyBreakdown:
    """Evaluate all four energies at raw values (reporting path)."""
    Xv = tp.value_of(X)
    e_coll = 0.0
    if body is not None:
        e_coll = float(tp.value_of(collision_energy(Xv, body, margin, k_coll)))
    return EnergyBreakdown(
        e_strain=float(tp.value_of(strain_energy(Xv, rest, mat))),
        e_bend=float(tp.value_of(bend_energy(Xv, rest, mat))),
        e_grav=float(tp.value_of(gravity_energy(Xv, rest, mat, grav_origin))),
        e_coll=e_coll,
    )
