"""Quasi-static relaxation solver, guaranteed-separation collision
projection, initial placement, and the composed draping pipeline.

The solver performs explicit force-propagation steps

    X_{t+1} = X_t + eta_hat f_int(X_t),   eta_hat = eta * gamma^t

and the collision handler pushes penetrating vertices outward along the
body normal

    x* = x + delta * relu(epsilon - d) * n

with bounded re-projection passes until every vertex clears the margin.
Both stages run on the tape when given tracked inputs, so gradients flow
to eta, delta, material parameters, and upstream network weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .bodymodel import batch_query
from .errors import DivergenceError, PlacementError, ValidationError
from .forces import (
    DEFAULT_K_COLL,
    bend_energy,
    count_degenerate_hinges,
    energy_breakdown,
    gravity_energy,
    internal_force,
    metric_b2g,
    strain_energy,
)

TRACE_COLUMNS = ("iteration", "total_energy_J", "total_force_N")
_SEPARATION_SLACK = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    """Relaxation and collision-handler settings.

    ``eta`` is a compliance multiplier when ``eta_auto`` is set (the
    default): the effective compliance is eta * step_cap * bbox_diag /
    max|f(X_init)|, computed once per scene so the first step moves no
    vertex farther than step_cap of the bounding-box diagonal. With
    ``eta_auto`` off, ``eta`` is the raw compliance in m/N.
    """

    T: int = 15
    eta: float = 1.0
    eta_auto: bool = True
    step_cap: float = 0.01
    gamma: float = 0.95
    epsilon: float = 0.002
    delta: float = 1.0
    max_projection_passes: int = 5
    force_abort: float = 1e6

    def __post_init__(self):
        if self.T < 0:
            raise ValidationError(f"solver T must be >= 0, got {self.T}")
        if not (0.0 < self.gamma <= 1.0):
            raise ValidationError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.epsilon < 0:
            raise ValidationError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (self.eta > 0):
            raise ValidationError(f"eta must be > 0, got {self.eta}")
        if self.delta < 1.0:
            raise ValidationError(f"delta must be >= 1, got {self.delta}")
        if self.max_projection_passes < 1:
            raise ValidationError("max_projection_passes must be >= 1")
        if not (self.step_cap > 0):
            raise ValidationError("step_cap must be > 0")


def _free_mask(n, pins):
    mask = np.ones(n, dtype=bool)
    if pins is not None and len(pins) > 0:
        mask[np.asarray(pins, dtype=np.int64)] = False
    return mask


def total_force_magnitude(f, pins=None) -> float:
    """Sum of per-vertex force norms over free vertices, N."""
    fv = tp.value_of(f)
    norms = np.linalg.norm(fv, axis=1)
    if pins is not None and len(pins) > 0:
        norms = norms[_free_mask(fv.shape[0], pins)]
    return float(norms.sum())


def _stiffness_estimate(Xv, rest, mat, mask, iters=3) -> float:
    """Dominant force-Jacobian eigenvalue via finite-difference power
    iteration (deterministic probe direction), N/m."""
    diag = float(np.linalg.norm(Xv.max(axis=0) - Xv.min(axis=0)))
    eps = 1e-6 * max(diag, 1e-9)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(Xv.shape)
    u[~mask] = 0.0
    norm_u = np.linalg.norm(u)
    if norm_u == 0.0:
        return 0.0
    u /= norm_u
    lam = 0.0
    for _ in range(iters):
        fp = tp.value_of(internal_force(Xv + eps * u, rest, mat))
        fm = tp.value_of(internal_force(Xv - eps * u, rest, mat))
        v = (fp - fm) / (2.0 * eps)
        v[~mask] = 0.0
        lam = float(np.linalg.norm(v))
        if lam == 0.0 or not np.isfinite(lam):
            return 0.0
        u = v / lam
    return lam


def compliance_scale(X0, rest, mat, cfg: SolverConfig, pins=None) -> float:
    """Per-scene step normalizer, computed once per scene.

    Takes the smaller of two bounds: the displacement cap (first step moves
    no vertex beyond step_cap of the bbox diagonal) and a spectral
    stability bound 0.5 / L with L the estimated dominant stiffness, which
    keeps the explicit iteration from blowing up when the initial state is
    nearly force-free.
    """
    Xv = tp.value_of(X0)
    mask = _free_mask(Xv.shape[0], pins)
    f = tp.value_of(internal_force(Xv, rest, mat))
    norms = np.linalg.norm(f, axis=1)
    fmax = norms[mask].max() if mask.any() else 0.0
    diag = float(np.linalg.norm(Xv.max(axis=0) - Xv.min(axis=0)))
    cap = cfg.step_cap * diag / fmax if (fmax > 0.0 and diag > 0.0) else np.inf
    lam = _stiffness_estimate(Xv, rest, mat, mask)
    stab = 0.5 / lam if lam > 0.0 else np.inf
    scale = min(cap, stab)
    return 1.0 if not np.isfinite(scale) else float(scale)


def stretch_step(X, rest, mat, eta_hat, pins=None, iteration=0, force_abort=None):
    """One explicit relaxation step X + eta_hat * f_int(X).

    ``eta_hat`` may be a python float or a tracked scalar; pinned vertices
    receive no update. Raises DivergenceError when the force field explodes.
    """
    f = internal_force(X, rest, mat)
    fv = tp.value_of(f)
    fmax = float(np.abs(fv).max()) if fv.size else 0.0
    if not np.isfinite(fv).all() or (force_abort is not None and fmax > force_abort):
        raise DivergenceError(iteration, fmax if np.isfinite(fmax) else np.inf)
    upd = tp.mul(f, eta_hat)
    if pins is not None and len(pins) > 0:
        upd = tp.mul(upd, _free_mask(fv.shape[0], pins)[:, None].astype(np.float64))
    return tp.add(X, upd)


def stretch_solve(
    X0, rest, mat, cfg: SolverConfig, eta=None, pins=None, with_trace=True, eta_scale=None
):
    """Run T decayed relaxation steps; returns (X_T, trace).

    The trace holds one (iteration, total_energy_J, total_force_N) row for
    the state before each step and one for the final state; the energy is
    the solver's own objective (strain + bending + gravity).

    ``eta_scale`` is the per-scene compliance normalizer; it defaults to
    the step-cap rule evaluated at X0 and is always treated as a constant
    under differentiation (the pipeline passes the scale of the scene's
    initial placement so it has no parameter dependence at all).
    """
    eta_base = cfg.eta if eta is None else eta
    if eta_scale is not None:
        scale = eta_scale
    else:
        scale = compliance_scale(X0, rest, mat, cfg, pins) if cfg.eta_auto else 1.0
    X = X0
    trace: list[tuple[int, float, float]] = []

    def record(t, f_raw):
        Xv = tp.value_of(X)
        e = float(
            tp.value_of(strain_energy(Xv, rest, mat))
            + tp.value_of(bend_energy(Xv, rest, mat))
            + tp.value_of(gravity_energy(Xv, rest, mat))
        )
        trace.append((t, e, total_force_magnitude(f_raw, pins)))

    for t in range(cfg.T):
        f = internal_force(X, rest, mat)
        fv = tp.value_of(f)
        fmax = float(np.abs(fv).max()) if fv.size else 0.0
        if not np.isfinite(fv).all() or fmax > cfg.force_abort:
            raise DivergenceError(t, fmax if np.isfinite(fmax) else np.inf)
        if with_trace:
            record(t, fv)
        eta_hat = tp.mul(eta_base, scale * cfg.gamma**t)
        upd = tp.mul(f, eta_hat)
        if pins is not None and len(pins) > 0:
            upd = tp.mul(upd, _free_mask(fv.shape[0], pins)[:, None].astype(np.float64))
        X = tp.add(X, upd)
    if with_trace:
        f_final = tp.value_of(internal_force(tp.value_of(X), rest, mat))
        if not np.isfinite(f_final).all():
            raise DivergenceError(cfg.T, np.inf)
        record(cfg.T, f_final)
    return X, trace


@dataclass(frozen=True)
class ProjectionReport:
    passes: int
    converged: bool
    min_distance: float


def collide_project(X, body, cfg: SolverConfig, delta=None):
    """Push penetrating vertices out along frozen body normals.

    Re-queries the body each pass until every vertex satisfies
    d >= epsilon - 1e-6 or the pass budget is exhausted (reported, not
    fatal). Differentiable through the ReLU; returns (X*, report).
    """
    delta_eff = cfg.delta if delta is None else delta
    eps = cfg.epsilon
    passes = 0
    while True:
        Xv = tp.value_of(X)
        q = batch_query(body, Xv)
        dmin = float(q.d.min()) if q.d.size else np.inf
        if dmin >= eps - _SEPARATION_SLACK:
            return X, ProjectionReport(passes, True, dmin)
        if passes >= cfg.max_projection_passes:
            return X, ProjectionReport(passes, False, dmin)
        d_lin = tp.reduce_sum(tp.mul(tp.sub(X, q.p), q.n), axis=1)
        push = tp.relu(tp.sub(eps, d_lin))
        step = tp.mul(tp.mul(tp.reshape(push, (-1, 1)), q.n), delta_eff)
        X = tp.add(X, step)
        passes += 1


@dataclass
class PipelineResult:
    X_final: object  # tracked tensor or ndarray
    breakdown: object
    trace: list
    metrics: dict
    timings_ms: dict
    warnings: list = field(default_factory=list)
    X_init: np.ndarray = None
    X_gnn: np.ndarray = None
    f_hat: object = None  # tracked when the GNN weights are tracked

    @property
    def final_values(self) -> np.ndarray:
        return tp.value_of(self.X_final)


def drape_pipeline(
    mesh,
    rest,
    mat,
    body,
    cfg: SolverConfig,
    gnn=None,
    *,
    X_init=None,
    pins=None,
    use_gnn=True,
    use_solver=True,
    use_collision=True,
    eta=None,
    delta=None,
    grav_origin=None,
    k_coll=DEFAULT_K_COLL,
    with_trace=True,
    with_metrics=True,
) -> PipelineResult:
    """Full draping pass: (GNN ->) stretch solve (->) collision projection.

    Any stage can be toggled off to reproduce ablation configurations.
    ``gnn`` is a GNNParams (weights may be tracked for training); ``eta``
    and ``delta`` override the config scalars, typically with tracked
    reparameterized values.
    """
    if X_init is None:
        X_init = place_center_scale(mesh.vertices, body, cfg.epsilon)
    X_init = np.asarray(tp.value_of(X_init), dtype=np.float64)
    timings = {}
    warnings = []
    X = X_init
    X_gnn = None
    f_hat = None

    if use_gnn and gnn is not None:
        from .gnn import build_features, gnn_forward  # deferred: avoids cycle

        t0 = time.perf_counter()
        feats = build_features(X_init, mesh, rest, mat, body)
        X, f_hat = gnn_forward(feats, gnn)
        X_gnn = tp.value_of(X).copy()
        timings["gnn"] = (time.perf_counter() - t0) * 1e3

    trace = []
    if use_solver:
        t0 = time.perf_counter()
        scale = compliance_scale(X_init, rest, mat, cfg, pins) if cfg.eta_auto else 1.0
        X, trace = stretch_solve(
            X, rest, mat, cfg, eta=eta, pins=pins, with_trace=with_trace, eta_scale=scale
        )
        timings["solver"] = (time.perf_counter() - t0) * 1e3

    if use_collision:
        t0 = time.perf_counter()
        X, report = collide_project(X, body, cfg, delta=delta)
        timings["collision"] = (time.perf_counter() - t0) * 1e3
        if not report.converged:
            warnings.append(
                f"collision projection hit pass budget "
                f"({report.passes} passes, min d = {report.min_distance:.3e} m)"
            )

    breakdown = None
    metrics = {}
    if with_metrics:
        t0 = time.perf_counter()
        Xv = tp.value_of(X)
        breakdown = energy_breakdown(
            Xv, rest, mat, body=body, margin=cfg.epsilon, k_coll=k_coll, grav_origin=grav_origin
        )
        residual = total_force_magnitude(internal_force(Xv, rest, mat), pins)
        degenerate = count_degenerate_hinges(Xv, rest)
        if degenerate:
            warnings.append(f"{degenerate} degenerate hinge(s) skipped by bending")
        d_final = batch_query(body, Xv).d
        metrics = {
            "e_strain_J": breakdown.e_strain,
            "e_bend_J": breakdown.e_bend,
            "e_grav_J": breakdown.e_grav,
            "e_coll_J": breakdown.e_coll,
            "e_strain_per_area": breakdown.e_strain / rest.total_area,
            "e_bend_per_area": breakdown.e_bend / rest.total_area,
            "b2g_percent": metric_b2g(Xv, mesh, body),
            "residual_force_N": residual,
            "min_body_distance_m": float(d_final.min()) if d_final.size else np.inf,
        }
        timings["metrics"] = (time.perf_counter() - t0) * 1e3

    return PipelineResult(
        X_final=X,
        breakdown=breakdown,
        trace=trace,
        metrics=metrics,
        timings_ms=timings,
        warnings=warnings,
        X_init=X_init,
        X_gnn=X_gnn,
        f_hat=f_hat,
    )


def place_center_scale(X0, body, margin, max_attempts=100, refine_tol=1e-3):
    """Translate to the body's bbox center, then find the smallest uniform
    scale >= 1 giving every vertex d >= margin.

    Raises PlacementError for garments that cannot clear the body by
    scaling (e.g. a flat sheet through the body center).
    """
    X0 = np.asarray(X0, dtype=np.float64)
    lo, hi = body.bounds()
    target = 0.5 * (lo + hi)
    centroid = X0.mean(axis=0)
    base = X0 - centroid

    def clear(s):
        return float(batch_query(body, base * s + target).d.min()) >= margin

    if clear(1.0):
        return base + target
    s_hi = 1.0
    for _ in range(max_attempts):
        s_hi *= 1.1
        if clear(s_hi):
            break
    else:
        raise PlacementError(
            f"no collision-free scale found within {max_attempts} attempts"
        )
    s_lo = s_hi / 1.1
    while (s_hi - s_lo) > refine_tol * s_hi:
        mid = 0.5 * (s_lo + s_hi)
        if clear(mid):
            s_hi = mid
        else:
            s_lo = mid
    return base * s_hi + target


def place_drop(X0, body, margin, xz_offset=(0.0, 0.0), max_attempts=100):
    """Center the garment above the body with the given vertical clearance.

    Exact for unions of convex bodies; for mesh bodies the garment is
    lifted further until the clearance check passes.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    lo, hi = body.bounds()
    center = 0.5 * (lo + hi)
    shift = np.array(
        [
            center[0] - X0[:, 0].mean() + xz_offset[0],
            hi[1] + margin - X0[:, 1].min(),
            center[2] - X0[:, 2].mean() + xz_offset[1],
        ]
    )
    X = X0 + shift
    for _ in range(max_attempts):
        dmin = float(batch_query(body, X).d.min())
        if dmin >= margin * (1.0 - 1e-9):
            return X
        X = X + np.array([0.0, margin - dmin, 0.0])
    raise PlacementError("drop placement failed to reach the clearance margin")
