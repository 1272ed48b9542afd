"""Scene assembly: procedural garment + body pairs with collision-free
initial placements, used by the CLI and by self-supervised training.

Two placement families are produced:

* squares are uniformly prestretched (an ill-fitting analogue of a
  kinematic initialization) and dropped above the body with a clearance;
* tubes are centered on the body and scaled up until every vertex clears
  the margin, which also leaves them prestretched.

Both start collision-free by construction; the relaxation then pulls the
garment onto the body.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .bodymodel import BodyModel, Capsule, CompositeBody, Sphere, batch_query
from .errors import PlacementError, ValidationError
from .meshcore import (
    GarmentMesh,
    MaterialParams,
    RestState,
    build_rest_state,
    corner_indices,
    make_square_cloth,
    make_tube_garment,
)
from .solver import SolverConfig, place_center_scale, place_drop


def desk_material(stiffness: float = 1.0, **overrides) -> MaterialParams:
    """Desk-scale cloth: one decade softer than the real-fabric defaults so
    gravity produces visible draping within a few hundred explicit steps.

    ``stiffness`` multiplies mu, lambda, and k_bend together (the
    material-controllability axis).
    """
    params = {
        "mu": 2.36e3 * stiffness,
        "lam": 4.44e3 * stiffness,
        "k_bend": 3.96e-5 * stiffness,
    }
    params.update(overrides)
    return MaterialParams(**params)


@dataclass
class Scene:
    """Everything one draping run needs, immutable in practice."""

    name: str
    mesh: GarmentMesh
    rest: RestState
    mat: MaterialParams
    body: BodyModel
    X_init: np.ndarray
    cfg: SolverConfig
    pins: np.ndarray | None = None
    grav_origin: np.ndarray | None = None

    def fingerprint(self) -> str:
        """Deterministic digest over the scene's numeric content."""
        h = hashlib.sha256()
        for arr in (self.mesh.vertices, self.mesh.faces, self.X_init):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.pins is not None:
            h.update(np.ascontiguousarray(self.pins).tobytes())
        h.update(repr(sorted(self.mat.__dict__.items(), key=lambda kv: kv[0])).encode())
        return h.hexdigest()


def _grav_origin(X_init) -> np.ndarray:
    """Reference point keeping gravity potential positive over reachable
    states (half a diagonal below the initial bottom)."""
    diag = float(np.linalg.norm(X_init.max(axis=0) - X_init.min(axis=0)))
    return np.array([0.0, X_init[:, 1].min() - 0.5 * diag, 0.0])


def prestretch(X, factor: float) -> np.ndarray:
    """Uniform scale about the centroid."""
    X = np.asarray(X, dtype=np.float64)
    c = X.mean(axis=0)
    return c + factor * (X - c)


def make_scene(
    mesh: GarmentMesh,
    body: BodyModel,
    mat: MaterialParams,
    cfg: SolverConfig,
    *,
    placement: str = "center_scale",
    prestretch_factor: float = 1.0,
    clearance: float | None = None,
    xz_offset=(0.0, 0.0),
    pins=None,
    name: str = "scene",
) -> Scene:
    """Build rest state and initial placement for a garment/body pair."""
    rest = build_rest_state(mesh, mat)
    X0 = mesh.vertices
    if prestretch_factor != 1.0:
        X0 = prestretch(X0, prestretch_factor)
    margin = cfg.epsilon if clearance is None else clearance
    if placement == "center_scale":
        X_init = place_center_scale(X0, body, margin)
    elif placement == "drop":
        X_init = place_drop(X0, body, margin, xz_offset=xz_offset)
    elif placement == "none":
        X_init = np.asarray(X0, dtype=np.float64)
    else:
        raise ValidationError(f"unknown placement mode {placement!r}")
    pins_arr = None
    if pins is not None and len(pins) > 0:
        pins_arr = np.asarray(pins, dtype=np.int64)
        if pins_arr.min() < 0 or pins_arr.max() >= mesh.num_vertices:
            raise ValidationError("pin index out of range")
    return Scene(
        name=name,
        mesh=mesh,
        rest=rest,
        mat=mat,
        body=body,
        X_init=X_init,
        cfg=cfg,
        pins=pins_arr,
        grav_origin=_grav_origin(X_init),
    )


def sample_scene(
    rng: np.random.Generator,
    *,
    cfg: SolverConfig | None = None,
    mat: MaterialParams | None = None,
    family: str | None = None,
    sphere_radius_range=(0.08, 0.16),
    capsule_radius_range=(0.1, 0.4),
    max_attempts: int = 100,
) -> Scene:
    """Draw a random garment/body scene with a collision-free placement.

    Deterministic in the generator state; scenes whose placement fails are
    rejected and redrawn (the attempt budget is shared).
    """
    cfg = cfg or SolverConfig()
    base_mat = mat or desk_material()
    for _ in range(max_attempts):
        kind = family or ("square" if rng.random() < 0.5 else "tube")
        try:
            if kind == "square":
                return _sample_square(rng, cfg, base_mat, sphere_radius_range, capsule_radius_range)
            if kind == "tube":
                return _sample_tube(rng, cfg, base_mat, capsule_radius_range)
            raise ValidationError(f"unknown scene family {kind!r}")
        except PlacementError:
            continue
    raise PlacementError(f"no feasible scene after {max_attempts} draws")


def _sample_square(rng, cfg, mat, sphere_r, capsule_r):
    n = int(rng.integers(8, 13))
    if rng.random() < 0.5:
        r = float(rng.uniform(*sphere_r))
        body = Sphere(center=(0.0, 0.0, 0.0), radius=r)
        extent = 2.0 * r
    else:
        r = float(rng.uniform(*capsule_r))
        half = float(rng.uniform(0.8, 1.6)) * r
        body = Capsule(a=(-half, 0.0, 0.0), b=(half, 0.0, 0.0), radius=r)
        extent = 2.0 * (half + r)
    size = extent * float(rng.uniform(1.1, 1.7))
    stretch = float(rng.uniform(1.15, 1.3))
    jitter = 0.05 * size
    offs = (float(rng.uniform(-jitter, jitter)), float(rng.uniform(-jitter, jitter)))
    mesh = make_square_cloth(n, size)
    return make_scene(
        mesh,
        body,
        mat,
        cfg,
        placement="drop",
        prestretch_factor=stretch,
        clearance=cfg.epsilon + 0.004,
        xz_offset=offs,
        name=f"square{n}_{'sph' if isinstance(body, Sphere) else 'cap'}",
    )


def _sample_tube(rng, cfg, mat, capsule_r):
    r_body = float(rng.uniform(capsule_r[0], min(capsule_r[1], 0.2)))
    height = float(rng.uniform(1.6, 2.4)) * r_body
    half = 0.5 * height * float(rng.uniform(1.2, 1.6))
    body = Capsule(a=(0.0, -half, 0.0), b=(0.0, half, 0.0), radius=r_body)
    nu = int(rng.integers(12, 17))
    nv = int(rng.integers(6, 11))
    r_tube = r_body * float(rng.uniform(0.72, 0.85))
    mesh = make_tube_garment(r_tube, height, nu, nv)
    tube_mat = replace(mat, use_rest_angle=True)
    return make_scene(
        mesh,
        body,
        tube_mat,
        cfg,
        placement="center_scale",
        name=f"tube{nu}x{nv}",
    )


def scene_pool(seed: int, count: int, **kwargs) -> list[Scene]:
    """Deterministic list of sampled scenes."""
    rng = np.random.default_rng(seed)
    return [sample_scene(rng, **kwargs) for _ in range(count)]


def audit_scene(scene: Scene) -> dict:
    """Initial-placement facts used by sampler tests."""
    d = batch_query(scene.body, scene.X_init).d
    return {
        "min_distance": float(d.min()),
        "vertices": scene.mesh.num_vertices,
        "faces": scene.mesh.num_faces,
    }


def default_square_scene(
    cfg: SolverConfig | None = None, pinned: bool = True, stiffness: float = 1.0
) -> Scene:
    """The committed sphere-drape scene: a prestretched square cloth with
    pinned corners dropped over a sphere (matches scenes/sphere_drape.cfg)."""
    cfg = cfg or SolverConfig()
    mat = desk_material(stiffness)
    n = 13
    mesh = make_square_cloth(n, 0.36)
    body = Sphere(center=(0.0, 0.0, 0.0), radius=0.12)
    return make_scene(
        mesh,
        body,
        mat,
        cfg,
        placement="drop",
        prestretch_factor=1.2,
        clearance=cfg.epsilon + 0.004,
        pins=corner_indices(n) if pinned else None,
        name="sphere_drape",
    )
