"""Self-supervised training: energy loss, Adam, checkpointing, and the
sample -> drape -> loss -> step loop.

No ground-truth draped geometry enters anywhere: the loss is evaluated on
the pipeline output only. The learnable compliance eta and projection
scalar delta are stored pre-reparameterization (eta = softplus(eta_raw),
delta = 1 + softplus(delta_raw)) and updated jointly with the network
weights.

Checkpoints restore training bitwise: weights are float32 (matching the
on-disk format), optimizer moments float64, and the sampler RNG state is
saved alongside.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape as tp
from .errors import CheckpointError, NumericError, ValidationError
from .forces import (
    DEFAULT_K_COLL,
    bend_energy,
    collision_energy,
    gravity_energy,
    internal_force,
    strain_energy,
)
from .gnn import GNNParams, init_gnn_params, load_gnn_checkpoint, save_gnn_checkpoint
from .scenes import Scene, sample_scene
from .solver import SolverConfig, drape_pipeline

LOSS_CSV_COLUMNS = (
    "iteration",
    "loss",
    "e_strain",
    "e_bend",
    "e_coll",
    "e_grav",
    "eta",
    "delta",
)

_ETA_RAW_INIT = math.log(math.e - 1.0)  # softplus -> 1.0
_DELTA_RAW_INIT = math.log(math.expm1(0.05))  # 1 + softplus -> 1.05


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    t_train: int = 3
    batch_scenes: int = 4
    scene_pool: int = 5
    seed: int = 0
    latent: int = 32
    blocks: int = 4
    w_strain: float = 1.0
    w_bend: float = 1.0
    w_coll: float = 1.0
    w_grav: float = 1.0
    w_fhat: float = 0.0
    k_coll: float = DEFAULT_K_COLL
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if not (self.lr > 0):
            raise ValidationError(f"learning rate must be > 0, got {self.lr}")
        if self.t_train < 0:
            raise ValidationError("t_train must be >= 0")
        for w in (self.w_strain, self.w_bend, self.w_coll, self.w_grav, self.w_fhat):
            if w < 0:
                raise ValidationError("loss weights must be >= 0")

    def fingerprint(self) -> str:
        keys = sorted(self.__dataclass_fields__)
        return json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)


@dataclass
class Checkpoint:
    """Full resumable training state."""

    params: GNNParams
    eta_raw: float
    delta_raw: float
    m: dict
    v: dict
    iteration: int
    config_fingerprint: str
    rng_state: dict | None = None

    @property
    def eta(self) -> float:
        return float(np.logaddexp(0.0, self.eta_raw))

    @property
    def delta(self) -> float:
        return 1.0 + float(np.logaddexp(0.0, self.delta_raw))


def init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    rng = np.random.default_rng(cfg.seed)
    params = init_gnn_params(rng, latent=cfg.latent, blocks=cfg.blocks)
    keys = list(params.weights.keys()) + ["eta_raw", "delta_raw"]
    zeros = {
        k: np.zeros_like(params.weights[k], dtype=np.float64)
        if k in params.weights
        else np.float64(0.0)
        for k in keys
    }
    return Checkpoint(
        params=params,
        eta_raw=_ETA_RAW_INIT,
        delta_raw=_DELTA_RAW_INIT,
        m={k: np.copy(z) for k, z in zeros.items()},
        v={k: np.copy(z) for k, z in zeros.items()},
        iteration=0,
        config_fingerprint=cfg.fingerprint(),
        rng_state=np.random.default_rng(cfg.seed + 1).bit_generator.state,
    )


def drape_loss(
    X_final,
    rest,
    mat,
    body,
    *,
    margin: float,
    weights=(1.0, 1.0, 1.0, 1.0),
    k_coll: float = DEFAULT_K_COLL,
    grav_origin=None,
):
    """Weighted energy loss on the pipeline output; returns (scalar, parts).

    ``parts`` holds the raw (unweighted) term values in J. The API takes no
    target geometry: training is self-supervised by construction.
    """
    ws, wb, wc, wg = weights
    e_strain = strain_energy(X_final, rest, mat)
    e_bend = bend_energy(X_final, rest, mat)
    e_coll = collision_energy(X_final, body, margin, k_coll)
    e_grav = gravity_energy(X_final, rest, mat, origin=grav_origin)
    total = tp.add(
        tp.add(tp.mul(e_strain, ws), tp.mul(e_bend, wb)),
        tp.add(tp.mul(e_coll, wc), tp.mul(e_grav, wg)),
    )
    parts = {
        "e_strain": float(tp.value_of(e_strain)),
        "e_bend": float(tp.value_of(e_bend)),
        "e_coll": float(tp.value_of(e_coll)),
        "e_grav": float(tp.value_of(e_grav)),
    }
    return total, parts


def _scene_loss_grads(scene: Scene, state: Checkpoint, cfg: TrainConfig):
    """One scene's loss and gradients w.r.t. every trainable key."""
    t = tp.Tape()
    params = state.params.tracked(t)
    eta_raw = t.leaf(np.float64(state.eta_raw))
    delta_raw = t.leaf(np.float64(state.delta_raw))
    eta = tp.softplus(eta_raw)
    delta = tp.add(tp.softplus(delta_raw), 1.0)
    run_cfg = replace(scene.cfg, T=cfg.t_train)
    result = drape_pipeline(
        scene.mesh,
        scene.rest,
        scene.mat,
        scene.body,
        run_cfg,
        gnn=params,
        X_init=scene.X_init,
        pins=scene.pins,
        eta=eta,
        delta=delta,
        k_coll=cfg.k_coll,
        with_trace=False,
        with_metrics=False,
    )
    loss, parts = drape_loss(
        result.X_final,
        scene.rest,
        scene.mat,
        scene.body,
        margin=run_cfg.epsilon,
        weights=(cfg.w_strain, cfg.w_bend, cfg.w_coll, cfg.w_grav),
        k_coll=cfg.k_coll,
        grav_origin=scene.grav_origin,
    )
    if cfg.w_fhat > 0.0 and result.f_hat is not None:
        f_res = tp.sub(result.f_hat, internal_force(result.X_final, scene.rest, scene.mat))
        loss = tp.add(loss, tp.mul(tp.reduce_mean(tp.mul(f_res, f_res)), cfg.w_fhat))
    loss_val = float(tp.value_of(loss))
    if not np.isfinite(loss_val):
        raise NumericError(f"non-finite loss on scene {scene.name}")
    grads = t.backward(loss)
    out = {k: grads.of(params.weights[k]) for k in params.weights}
    out["eta_raw"] = grads.of(eta_raw)
    out["delta_raw"] = grads.of(delta_raw)
    return loss_val, parts, out


def train_step(batch: list[Scene], state: Checkpoint, cfg: TrainConfig):
    """One Adam update from the mean loss over ``batch`` scenes.

    Returns (new_state, mean_loss, mean_parts). Scene order is fixed, so
    gradient averaging is deterministic.
    """
    acc: dict = {}
    losses = []
    parts_acc: dict = {}
    for scene in batch:
        loss_val, parts, grads = _scene_loss_grads(scene, state, cfg)
        losses.append(loss_val)
        for k, g in grads.items():
            acc[k] = acc.get(k, 0.0) + np.asarray(g, dtype=np.float64)
        for k, p in parts.items():
            parts_acc[k] = parts_acc.get(k, 0.0) + p
    nb = len(batch)
    mean_loss = float(np.sum(losses) / nb)
    mean_parts = {k: v / nb for k, v in parts_acc.items()}

    t = state.iteration + 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_weights = {}
    new_m = dict(state.m)
    new_v = dict(state.v)

    def adam(key, w):
        g = acc[key] / nb
        m = b1 * state.m[key] + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * g * g
        new_m[key] = m
        new_v[key] = v
        step = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        return np.asarray(w, dtype=np.float64) - step

    for k, w in state.params.weights.items():
        new_weights[k] = adam(k, w).astype(np.float32)
    eta_raw = float(adam("eta_raw", state.eta_raw))
    delta_raw = float(adam("delta_raw", state.delta_raw))

    new_state = Checkpoint(
        params=GNNParams(state.params.latent, state.params.blocks, new_weights),
        eta_raw=eta_raw,
        delta_raw=delta_raw,
        m=new_m,
        v=new_v,
        iteration=t,
        config_fingerprint=state.config_fingerprint,
        rng_state=state.rng_state,
    )
    return new_state, mean_loss, mean_parts


def save_checkpoint(state: Checkpoint, prefix) -> None:
    save_gnn_checkpoint(state.params, prefix)
    opt_keys = list(state.params.weights.keys()) + ["eta_raw", "delta_raw"]
    chunks = []
    for store in (state.m, state.v):
        for k in opt_keys:
            chunks.append(np.asarray(store[k], dtype="<f8").ravel())
    np.concatenate(chunks).tofile(f"{prefix}.optim.bin")
    meta = {
        "iteration": state.iteration,
        "eta_raw": float(state.eta_raw).hex(),
        "delta_raw": float(state.delta_raw).hex(),
        "config_fingerprint": state.config_fingerprint,
        "rng_state": state.rng_state,
    }
    with open(f"{prefix}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def load_checkpoint(prefix) -> Checkpoint:
    params = load_gnn_checkpoint(prefix)
    try:
        with open(f"{prefix}.meta.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        flat = np.fromfile(f"{prefix}.optim.bin", dtype="<f8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    opt_keys = list(params.weights.keys()) + ["eta_raw", "delta_raw"]
    sizes = [int(np.prod(params.weights[k].shape)) if k in params.weights else 1 for k in opt_keys]
    if flat.size != 2 * sum(sizes):
        raise CheckpointError("optimizer state size mismatch")
    stores = []
    off = 0
    for _ in range(2):
        store = {}
        for k, size in zip(opt_keys, sizes):
            block = flat[off : off + size]
            store[k] = (
                block.reshape(params.weights[k].shape).copy()
                if k in params.weights
                else np.float64(block[0])
            )
            off += size
        stores.append(store)
    return Checkpoint(
        params=params,
        eta_raw=float.fromhex(meta["eta_raw"]),
        delta_raw=float.fromhex(meta["delta_raw"]),
        m=stores[0],
        v=stores[1],
        iteration=int(meta["iteration"]),
        config_fingerprint=meta["config_fingerprint"],
        rng_state=meta.get("rng_state"),
    )


@dataclass
class TrainResult:
    state: Checkpoint
    history: list = field(default_factory=list)  # LOSS_CSV_COLUMNS rows
    scenes: list = field(default_factory=list)


def build_scene_pool(cfg: TrainConfig, base_scene_cfg=None) -> list[Scene]:
    rng = np.random.default_rng(cfg.seed)
    scene_cfg = base_scene_cfg or SolverConfig(T=cfg.t_train)
    return [sample_scene(rng, cfg=scene_cfg) for _ in range(cfg.scene_pool)]


def train_loop(
    cfg: TrainConfig,
    scenes: list[Scene] | None = None,
    state: Checkpoint | None = None,
    on_log=None,
) -> TrainResult:
    """Run sample -> drape -> loss -> step for cfg.iterations updates.

    ``scenes`` defaults to a pool sampled from cfg.seed; pass a checkpoint
    to resume (bitwise identical to the uninterrupted run). ``on_log``
    receives each history row as it is produced.
    """
    scenes = scenes if scenes is not None else build_scene_pool(cfg)
    if state is None:
        state = init_checkpoint(cfg)
    else:
        if state.config_fingerprint != cfg.fingerprint():
            raise CheckpointError("checkpoint was produced by a different config")
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    history = []
    while state.iteration < cfg.iterations:
        picks = rng.integers(0, len(scenes), size=cfg.batch_scenes)
        batch = [scenes[int(i)] for i in picks]
        state.rng_state = rng.bit_generator.state
        state, mean_loss, parts = train_step(batch, state, cfg)
        it = state.iteration
        if it % cfg.log_every == 0 or it == cfg.iterations or it == 1:
            row = (
                it,
                mean_loss,
                parts["e_strain"],
                parts["e_bend"],
                parts["e_coll"],
                parts["e_grav"],
                state.eta,
                state.delta,
            )
            history.append(row)
            if on_log is not None:
                on_log(row)
    return TrainResult(state=state, history=history, scenes=scenes)
