"""Force-driven graph network: feature construction over the garment graph
and encode-process-decode inference with residual message passing.

Node features (11): vertex normal (3), signed body distance (1), internal
force at the initial state (3), material block [mu, lambda, k_bend, mass]
(4). Edge features (8) over both directions of every mesh edge: current
offset and length, rest offset and length.

The decoder emits 6 values per node: a residual position update (so a
zero-initialized final layer reproduces the input placement exactly) and a
predicted per-vertex force.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .bodymodel import batch_query
from .errors import CheckpointError, ValidationError
from .forces import internal_force
from .meshcore import MaterialParams, vertex_normals

NODE_WIDTH = 11
EDGE_WIDTH = 8
OUT_WIDTH = 6  # residual position (3) + predicted force (3)

# fixed references used to bring material features to O(1); the per-scene
# geometric scales live in GraphFeatures
_MU_REF = 2.36e4
_LAM_REF = 4.44e4
_KBEND_REF = 3.96e-5


@dataclass(frozen=True)
class GraphFeatures:
    """Raw node/edge features plus the normalization constants and the
    initial positions the residual decoder adds onto."""

    node_features: np.ndarray  # (N, 11)
    edge_features: np.ndarray  # (E, 8)
    edges: np.ndarray  # (E, 2) directed, both orientations present
    X_init: np.ndarray  # (N, 3)
    node_scale: np.ndarray  # (11,)
    edge_scale: np.ndarray  # (8,)


@dataclass
class GNNParams:
    """Named weight arrays plus the architecture hyperparameters."""

    latent: int
    blocks: int
    weights: dict = field(default_factory=dict)

    def tracked(self, tape_obj):
        """Copy with every weight registered as a leaf on ``tape_obj``."""
        w = {k: tape_obj.leaf(v) for k, v in self.weights.items()}
        return GNNParams(latent=self.latent, blocks=self.blocks, weights=w)

    def values(self) -> dict:
        return {k: tp.value_of(v) for k, v in self.weights.items()}


def _mlp_shapes(name, in_dim, hidden, out_dim, ln):
    shapes = {
        f"{name}.w0": (in_dim, hidden),
        f"{name}.b0": (hidden,),
        f"{name}.w1": (hidden, hidden),
        f"{name}.b1": (hidden,),
        f"{name}.w2": (hidden, out_dim),
        f"{name}.b2": (out_dim,),
    }
    if ln:
        shapes[f"{name}.ln_g"] = (out_dim,)
        shapes[f"{name}.ln_b"] = (out_dim,)
    return shapes


def expected_shapes(latent: int, blocks: int) -> dict:
    """Weight-name -> shape map in canonical (manifest) order."""
    shapes = {}
    shapes.update(_mlp_shapes("enc_node", NODE_WIDTH, latent, latent, ln=True))
    shapes.update(_mlp_shapes("enc_edge", EDGE_WIDTH, latent, latent, ln=True))
    for i in range(blocks):
        shapes.update(_mlp_shapes(f"blk{i}.edge", 3 * latent, latent, latent, ln=True))
        shapes.update(_mlp_shapes(f"blk{i}.node", 2 * latent, latent, latent, ln=True))
    shapes.update(_mlp_shapes("dec", latent, latent, OUT_WIDTH, ln=False))
    return shapes


def init_gnn_params(rng, latent: int = 32, blocks: int = 4) -> GNNParams:
    """Uniform fan-in init; the decoder's final layer starts at zero so the
    network is the identity map at initialization."""
    weights = {}
    for name, shape in expected_shapes(latent, blocks).items():
        leaf = name.rsplit(".", 1)[1]
        if name.startswith("dec.") and leaf in ("w2", "b2"):
            w = np.zeros(shape, dtype=np.float32)
        elif leaf.startswith("w"):
            bound = 1.0 / np.sqrt(shape[0])
            w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif leaf == "ln_g":
            w = np.ones(shape, dtype=np.float32)
        else:  # biases, ln_b
            w = np.zeros(shape, dtype=np.float32)
        weights[name] = w
    return GNNParams(latent=latent, blocks=blocks, weights=weights)


def build_features(X_init, mesh, rest, mat: MaterialParams, body) -> GraphFeatures:
    """Assemble raw graph features at the (constant) initial placement."""
    X_init = np.asarray(tp.value_of(X_init), dtype=np.float64)
    n = X_init.shape[0]
    normals = vertex_normals(mesh, X_init)
    d = batch_query(body, X_init).d
    f_int = tp.value_of(internal_force(X_init, rest, mat))
    node = np.empty((n, NODE_WIDTH))
    node[:, 0:3] = normals
    node[:, 3] = d
    node[:, 4:7] = f_int
    node[:, 7] = mat.mu
    node[:, 8] = mat.lam
    node[:, 9] = mat.k_bend
    node[:, 10] = rest.mass

    edges = rest.edges
    xij = X_init[edges[:, 0]] - X_init[edges[:, 1]]
    edge = np.empty((edges.shape[0], EDGE_WIDTH))
    edge[:, 0:3] = xij
    edge[:, 3] = np.linalg.norm(xij, axis=1)
    edge[:, 4:7] = rest.edge_rest_vec
    edge[:, 7] = rest.edge_rest_len

    len_s = float(rest.edge_rest_len.mean()) if edges.shape[0] else 1.0
    mass_s = float(rest.mass.mean()) if n else 1.0
    force_s = mass_s * float(np.linalg.norm(mat.gravity))
    if force_s <= 0.0:
        force_s = 1.0
    node_scale = np.array(
        [1.0, 1.0, 1.0, len_s, force_s, force_s, force_s, _MU_REF, _LAM_REF, _KBEND_REF, mass_s]
    )
    edge_scale = np.array([len_s] * 4 + [len_s] * 4)
    return GraphFeatures(
        node_features=node,
        edge_features=edge,
        edges=edges,
        X_init=X_init,
        node_scale=node_scale,
        edge_scale=edge_scale,
    )


def _mlp(x, weights, name, ln=True):
    h = tp.relu(tp.add(tp.matmul(x, weights[f"{name}.w0"]), weights[f"{name}.b0"]))
    h = tp.relu(tp.add(tp.matmul(h, weights[f"{name}.w1"]), weights[f"{name}.b1"]))
    y = tp.add(tp.matmul(h, weights[f"{name}.w2"]), weights[f"{name}.b2"])
    if ln:
        y = tp.layer_norm(y, weights[f"{name}.ln_g"], weights[f"{name}.ln_b"])
    return y


def gnn_forward(features: GraphFeatures, params: GNNParams):
    """Encode-process-decode pass; returns (X_pred, f_hat), each (N,3).

    All array math goes through the tape ops, so passing tracked weights
    yields a differentiable output.
    """
    nf = features.node_features
    ef = features.edge_features
    if nf.shape[1] != NODE_WIDTH:
        raise ValidationError(f"node features must be (N,{NODE_WIDTH}), got {nf.shape}")
    if ef.shape[1] != EDGE_WIDTH:
        raise ValidationError(f"edge features must be (E,{EDGE_WIDTH}), got {ef.shape}")
    w = params.weights
    want = expected_shapes(params.latent, params.blocks)
    for name, shape in want.items():
        if name not in w:
            raise ValidationError(f"missing GNN weight {name}")
        if tuple(tp.value_of(w[name]).shape) != shape:
            raise ValidationError(
                f"GNN weight {name} has shape {tp.value_of(w[name]).shape}, want {shape}"
            )

    n = nf.shape[0]
    src = features.edges[:, 0]
    dst = features.edges[:, 1]

    h = _mlp(nf / features.node_scale, w, "enc_node")
    e = _mlp(ef / features.edge_scale, w, "enc_edge")
    for i in range(params.blocks):
        e_in = tp.concat([e, tp.gather(h, src), tp.gather(h, dst)], axis=1)
        e = tp.add(e, _mlp(e_in, w, f"blk{i}.edge"))
        agg = tp.scatter_add(e, src, n)
        h = tp.add(h, _mlp(tp.concat([h, agg], axis=1), w, f"blk{i}.node"))
    out = _mlp(h, w, "dec", ln=False)
    dx = tp.narrow(out, 1, 0, 3)
    f_hat = tp.narrow(out, 1, 3, 3)
    X_pred = tp.add(features.X_init, dx)
    return X_pred, f_hat


def save_gnn_checkpoint(params: GNNParams, prefix) -> None:
    """Write ``<prefix>.manifest.txt`` (name -> shape, canon order) and
    ``<prefix>.weights.bin`` (flat little-endian float32)."""
    shapes = expected_shapes(params.latent, params.blocks)
    lines = [f"# latent={params.latent} blocks={params.blocks}"]
    chunks = []
    for name, shape in shapes.items():
        arr = tp.value_of(params.weights[name]).astype("<f4")
        if tuple(arr.shape) != shape:
            raise CheckpointError(f"weight {name} has shape {arr.shape}, want {shape}")
        lines.append(f"{name} {','.join(str(s) for s in shape)}")
        chunks.append(arr.ravel())
    with open(f"{prefix}.manifest.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    np.concatenate(chunks).astype("<f4").tofile(f"{prefix}.weights.bin")


def load_gnn_checkpoint(prefix) -> GNNParams:
    """Read a checkpoint pair and validate shapes against the architecture."""
    try:
        with open(f"{prefix}.manifest.txt", "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise CheckpointError(f"cannot read manifest: {exc}") from exc
    entries = []
    latent = blocks = None
    for ln in lines:
        if ln.startswith("#"):
            for tok in ln[1:].split():
                if tok.startswith("latent="):
                    latent = int(tok.split("=")[1])
                elif tok.startswith("blocks="):
                    blocks = int(tok.split("=")[1])
            continue
        name, shape_s = ln.split()
        entries.append((name, tuple(int(x) for x in shape_s.split(","))))
    if latent is None or blocks is None:
        raise CheckpointError("manifest missing latent/blocks header")
    want = expected_shapes(latent, blocks)
    if [e[0] for e in entries] != list(want.keys()):
        raise CheckpointError("manifest keys do not match the architecture")
    for name, shape in entries:
        if want[name] != shape:
            raise CheckpointError(f"manifest shape for {name} is {shape}, want {want[name]}")
    total = sum(int(np.prod(s)) for _, s in entries)
    flat = np.fromfile(f"{prefix}.weights.bin", dtype="<f4")
    if flat.size != total:
        raise CheckpointError(
            f"weight file holds {flat.size} floats, manifest expects {total}"
        )
    weights = {}
    off = 0
    for name, shape in entries:
        size = int(np.prod(shape))
        weights[name] = flat[off : off + size].reshape(shape).copy()
        off += size
    return GNNParams(latent=latent, blocks=blocks, weights=weights)
