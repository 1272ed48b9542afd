"""Garment mesh representation, rest-state precomputation, OBJ I/O, and
procedural garment generators.

Lengths are meters, masses kg, the garment is a triangle mesh with
counter-clockwise face orientation. All types are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateGeometryError,
    MeshFormatError,
    OutputError,
    TopologyError,
    ValidationError,
)

_MIN_AREA = 1e-12


def _frozen_array(a, dtype=None):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GarmentMesh:
    """Triangle mesh: (N,3) float positions, (M,3) int faces, CCW orientation."""

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = _frozen_array(self.vertices, dtype=np.float64)
        f = _frozen_array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (N,3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be (M,3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError(
                f"face index out of range (N={len(v)}, max index {int(f.max())})"
            )
        if f.size:
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise TopologyError(
                    f"degenerate face with repeated indices: face {int(np.argmax(degen))}"
                )
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        _edge_face_map(f)  # raises TopologyError if not edge-manifold

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]


@dataclass(frozen=True)
class MaterialParams:
    """Cloth material constants.

    Defaults are typical woven-fabric values; ``use_rest_angle`` switches the
    bending term from penalizing the raw dihedral angle to penalizing the
    deviation from the rest dihedral (needed for garments that are curved at
    rest, e.g. tubes).
    """

    mu: float = 2.36e4  # Pa, Lame shear
    lam: float = 4.44e4  # Pa, Lame stretch
    k_bend: float = 3.96e-5  # N*m
    density: float = 0.426  # kg/m^2, areal
    thickness: float = 4.7e-4  # m
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.81, 0.0]))
    use_rest_angle: bool = False

    def __post_init__(self):
        g = _frozen_array(self.gravity, dtype=np.float64)
        if g.shape != (3,):
            raise ValidationError(f"gravity must be a 3-vector, got shape {g.shape}")
        object.__setattr__(self, "gravity", g)
        if not (self.mu > 0):
            raise ValidationError(f"mu must be > 0, got {self.mu}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.k_bend < 0:
            raise ValidationError(f"k_bend must be >= 0, got {self.k_bend}")
        if not (self.density > 0):
            raise ValidationError(f"density must be > 0, got {self.density}")
        if not (self.thickness > 0):
            raise ValidationError(f"thickness must be > 0, got {self.thickness}")


@dataclass(frozen=True)
class RestState:
    """Precomputed rest-pose quantities consumed by the force formulation.

    ``b`` holds the per-face shape-gradient vectors (three 2-vectors per
    face, summing to zero); hinge arrays describe interior edges shared by
    two faces: vertices (v0, v1) on the shared edge, opposite vertices
    (v2 in face A containing the directed edge v0->v1, v3 in face B).
    """

    faces: np.ndarray  # (M,3) int, copied from the mesh
    dm_inv: np.ndarray  # (M,2,2) inverse rest material matrix
    area: np.ndarray  # (M,) rest areas, m^2
    volume: np.ndarray  # (M,) area * thickness, m^3
    b: np.ndarray  # (M,3,2) shape-gradient vectors, 1/m
    mass: np.ndarray  # (N,) lumped vertex masses, kg
    hinge_verts: np.ndarray  # (H,4) int: v0, v1, v2, v3
    hinge_faces: np.ndarray  # (H,2) int: face A, face B
    hinge_rest_len: np.ndarray  # (H,) shared-edge rest length, m
    hinge_area: np.ndarray  # (H,) sum of incident rest triangle areas, m^2
    hinge_scale: np.ndarray  # (H,) l^2 / (4 A)
    hinge_rest_angle: np.ndarray  # (H,) rest dihedral, rad
    edges: np.ndarray  # (E,2) int, both directions of every mesh edge
    edge_rest_vec: np.ndarray  # (E,3) x_i0 - x_j0, m
    edge_rest_len: np.ndarray  # (E,) m
    total_area: float

    def __post_init__(self):
        for name in (
            "faces",
            "dm_inv",
            "area",
            "volume",
            "b",
            "mass",
            "hinge_verts",
            "hinge_faces",
            "hinge_rest_len",
            "hinge_area",
            "hinge_scale",
            "hinge_rest_angle",
            "edges",
            "edge_rest_vec",
            "edge_rest_len",
        ):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))

    @property
    def num_hinges(self):
        return self.hinge_verts.shape[0]


def _edge_face_map(faces):
    """Map undirected edge -> [(face, reversed?)]; validates manifoldness."""
    emap: dict[tuple[int, int], list[tuple[int, bool]]] = {}
    for fi in range(faces.shape[0]):
        a, b, c = (int(x) for x in faces[fi])
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            rec = emap.setdefault(key, [])
            rec.append((fi, u > v))
            if len(rec) > 2:
                raise TopologyError(
                    f"edge ({key[0]},{key[1]}) shared by more than 2 faces"
                )
    for key, rec in emap.items():
        if len(rec) == 2 and rec[0][1] == rec[1][1]:
            raise TopologyError(
                f"inconsistent winding across edge ({key[0]},{key[1]})"
            )
    return emap


def load_obj(path) -> GarmentMesh:
    """Read a Wavefront OBJ (v/f records; vn/vt ignored, polygons fanned)."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MeshFormatError(f"cannot read OBJ: {exc}", path=str(path)) from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshFormatError("vertex record needs 3 coordinates", str(path), lineno)
            try:
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError as exc:
                raise MeshFormatError(f"bad vertex coordinate: {exc}", str(path), lineno)
        elif parts[0] == "f":
            if len(parts) < 4:
                raise MeshFormatError("face record needs >= 3 indices", str(path), lineno)
            idx = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise MeshFormatError(f"bad face index {tok!r}", str(path), lineno)
                if i <= 0:
                    raise MeshFormatError(
                        f"only positive 1-based indices supported, got {i}", str(path), lineno
                    )
                idx.append(i - 1)
            for k in range(1, len(idx) - 1):  # fan triangulation
                faces.append([idx[0], idx[k], idx[k + 1]])
        # vn/vt/other records ignored
    n = len(vertices)
    for tri in faces:
        if max(tri) >= n:
            raise MeshFormatError(
                f"face index {max(tri) + 1} out of range (file has {n} vertices)",
                str(path),
            )
    try:
        return GarmentMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except (TopologyError, ValidationError) as exc:
        raise type(exc)(f"{exc} (while loading {path})") from exc


def save_obj(mesh: GarmentMesh, X, path) -> None:
    """Write positions ``X`` with the mesh topology; vertex normals included."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape != mesh.vertices.shape:
        raise ValidationError(
            f"positions shape {X.shape} does not match mesh {mesh.vertices.shape}"
        )
    normals = vertex_normals(mesh, X)
    out = []
    if mesh.name:
        out.append(f"o {mesh.name}")
    for p in X:
        out.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    for nrm in normals:
        out.append(f"vn {nrm[0]:.9g} {nrm[1]:.9g} {nrm[2]:.9g}")
    for f in mesh.faces:
        out.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(out) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write OBJ to {path}: {exc}") from exc


def make_square_cloth(n: int, size: float) -> GarmentMesh:
    """Axis-aligned square cloth in the xz-plane, normals facing +y.

    ``n`` vertices per side (n >= 2), ``size`` edge length in meters.
    """
    if n < 2:
        raise ValidationError(f"square cloth needs n >= 2, got {n}")
    if not (size > 0):
        raise ValidationError(f"size must be > 0, got {size}")
    coords = np.linspace(-size / 2.0, size / 2.0, n)
    xs, zs = np.meshgrid(coords, coords, indexing="ij")
    vertices = np.stack([xs.ravel(), np.zeros(n * n), zs.ravel()], axis=1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            v00 = i * n + j
            v01 = i * n + (j + 1)
            v10 = (i + 1) * n + j
            v11 = (i + 1) * n + (j + 1)
            # wound so cross(e1, e2) points +y
            faces.append([v00, v01, v11])
            faces.append([v00, v11, v10])
    return GarmentMesh(vertices, np.array(faces, dtype=np.int64), name=f"square{n}")


def make_tube_garment(radius: float, height: float, nu: int, nv: int) -> GarmentMesh:
    """Open cylinder about the y-axis, seam-welded, normals facing outward.

    ``nu`` vertices around the circumference (>= 3), ``nv`` rings (>= 2).
    """
    if nu < 3:
        raise ValidationError(f"tube needs nu >= 3, got {nu}")
    if nv < 2:
        raise ValidationError(f"tube needs nv >= 2, got {nv}")
    if not (radius > 0 and height > 0):
        raise ValidationError("tube radius and height must be > 0")
    phis = 2.0 * np.pi * np.arange(nu) / nu
    ys = np.linspace(-height / 2.0, height / 2.0, nv)
    vertices = np.empty((nu * nv, 3))
    for j, y in enumerate(ys):
        vertices[j * nu : (j + 1) * nu, 0] = radius * np.cos(phis)
        vertices[j * nu : (j + 1) * nu, 1] = y
        vertices[j * nu : (j + 1) * nu, 2] = radius * np.sin(phis)
    faces = []
    for j in range(nv - 1):
        for i in range(nu):
            i2 = (i + 1) % nu
            a = j * nu + i
            b = j * nu + i2
            c = (j + 1) * nu + i2
            d = (j + 1) * nu + i
            # outward orientation (verified by the radial-normal property)
            faces.append([a, b, c])
            faces.append([a, c, d])
    return GarmentMesh(vertices, np.array(faces, dtype=np.int64), name=f"tube{nu}x{nv}")


def corner_indices(n: int) -> list[int]:
    """Corner vertex indices of a ``make_square_cloth(n, ...)`` grid."""
    return [0, n - 1, n * (n - 1), n * n - 1]


def vertex_normals(mesh: GarmentMesh, X) -> np.ndarray:
    """Area-weighted vertex normals; zero-star fallback is (0,1,0)."""
    X = np.asarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        raise ValidationError("vertex_normals: non-finite positions")
    f = mesh.faces
    e1 = X[f[:, 1]] - X[f[:, 0]]
    e2 = X[f[:, 2]] - X[f[:, 0]]
    fn = np.cross(e1, e2)  # magnitude = 2 * area: area weighting for free
    n = np.zeros_like(X)
    idx = f.reshape(-1)
    rep = np.repeat(fn, 3, axis=0)
    for c in range(3):
        n[:, c] = np.bincount(idx, weights=rep[:, c], minlength=X.shape[0])
    norms = np.linalg.norm(n, axis=1)
    ok = norms > 1e-20
    n[ok] /= norms[ok, None]
    n[~ok] = (0.0, 1.0, 0.0)
    return n


def signed_dihedral(x0, x1, x2, x3):
    """Signed dihedral angle at the shared edge x0->x1 (0 when coplanar)."""
    e0 = x1 - x0
    na = np.cross(x1 - x0, x2 - x0)
    nb = np.cross(x0 - x1, x3 - x1)
    na_h = na / np.linalg.norm(na, axis=-1, keepdims=True)
    nb_h = nb / np.linalg.norm(nb, axis=-1, keepdims=True)
    e0_h = e0 / np.linalg.norm(e0, axis=-1, keepdims=True)
    s = np.sum(np.cross(na_h, nb_h) * e0_h, axis=-1)
    c = np.sum(na_h * nb_h, axis=-1)
    return np.arctan2(s, c)


def build_rest_state(mesh: GarmentMesh, mat: MaterialParams) -> RestState:
    """Precompute every rest-pose quantity the force formulation needs.

    The 2-D rest frame of each face is the isometric flattening with u along
    edge (v0->v1) and w the normalized rejection of (v0->v2); the resulting
    material matrix Dm is upper-triangular and its columns preserve the 3-D
    rest edge lengths exactly.
    """
    V = mesh.vertices
    F = mesh.faces
    M = F.shape[0]

    e1 = V[F[:, 1]] - V[F[:, 0]]
    e2 = V[F[:, 2]] - V[F[:, 0]]
    cross = np.cross(e1, e2)
    area = 0.5 * np.linalg.norm(cross, axis=1)
    small = area < _MIN_AREA
    if small.any():
        raise DegenerateGeometryError(
            f"rest face {int(np.argmax(small))} has area < {_MIN_AREA} m^2"
        )

    l1 = np.linalg.norm(e1, axis=1)
    u = e1 / l1[:, None]
    proj = np.einsum("ij,ij->i", e2, u)
    w_vec = e2 - proj[:, None] * u
    w_len = np.linalg.norm(w_vec, axis=1)
    # w_len = 2*area/l1 > 0 given the area check above
    w = w_vec / w_len[:, None]

    dm = np.zeros((M, 2, 2))
    dm[:, 0, 0] = l1
    dm[:, 0, 1] = proj
    dm[:, 1, 1] = w_len
    det = dm[:, 0, 0] * dm[:, 1, 1]
    dm_inv = np.zeros_like(dm)
    dm_inv[:, 0, 0] = dm[:, 1, 1] / det
    dm_inv[:, 0, 1] = -dm[:, 0, 1] / det
    dm_inv[:, 1, 1] = dm[:, 0, 0] / det

    # shape gradients: corners 1,2 take the rows of Dm^-1; corner 0 closes the sum
    b = np.zeros((M, 3, 2))
    b[:, 1, :] = dm_inv[:, 0, :]
    b[:, 2, :] = dm_inv[:, 1, :]
    b[:, 0, :] = -(b[:, 1, :] + b[:, 2, :])

    volume = area * mat.thickness

    third = np.repeat(area / 3.0, 3)
    mass = mat.density * np.bincount(F.reshape(-1), weights=third, minlength=V.shape[0])

    emap = _edge_face_map(F)
    hv, hf = [], []
    for (a, bb), recs in sorted(emap.items()):
        if len(recs) != 2:
            continue  # boundary edge: no hinge
        (fa, rev_a), (fb, _) = recs
        # face A traverses the edge forward (u->v with u<v) unless reversed
        if rev_a:
            fa, fb = recs[1][0], recs[0][0]
        v0, v1 = a, bb
        v2 = int([x for x in F[fa] if x != v0 and x != v1][0])
        v3 = int([x for x in F[fb] if x != v0 and x != v1][0])
        hv.append((v0, v1, v2, v3))
        hf.append((fa, fb))
    hinge_verts = np.array(hv, dtype=np.int64).reshape(-1, 4)
    hinge_faces = np.array(hf, dtype=np.int64).reshape(-1, 2)

    if hinge_verts.shape[0]:
        hx0 = V[hinge_verts[:, 0]]
        hx1 = V[hinge_verts[:, 1]]
        rest_len = np.linalg.norm(hx1 - hx0, axis=1)
        hinge_area = area[hinge_faces[:, 0]] + area[hinge_faces[:, 1]]
        hinge_scale = rest_len**2 / (4.0 * hinge_area)
        rest_angle = signed_dihedral(
            hx0, hx1, V[hinge_verts[:, 2]], V[hinge_verts[:, 3]]
        )
    else:
        rest_len = np.zeros(0)
        hinge_area = np.zeros(0)
        hinge_scale = np.zeros(0)
        rest_angle = np.zeros(0)

    und = sorted(emap.keys())
    edges = np.empty((2 * len(und), 2), dtype=np.int64)
    for k, (a, bb) in enumerate(und):
        edges[2 * k] = (a, bb)
        edges[2 * k + 1] = (bb, a)
    edge_rest_vec = V[edges[:, 0]] - V[edges[:, 1]]
    edge_rest_len = np.linalg.norm(edge_rest_vec, axis=1)

    return RestState(
        faces=F,
        dm_inv=dm_inv,
        area=area,
        volume=volume,
        b=b,
        mass=mass,
        hinge_verts=hinge_verts,
        hinge_faces=hinge_faces,
        hinge_rest_len=rest_len,
        hinge_area=hinge_area,
        hinge_scale=hinge_scale,
        hinge_rest_angle=rest_angle,
        edges=edges,
        edge_rest_vec=edge_rest_vec,
        edge_rest_len=edge_rest_len,
        total_area=float(area.sum()),
    )
