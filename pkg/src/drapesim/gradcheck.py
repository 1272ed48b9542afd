"""Finite-difference gradient verification suites.

Used by the test suite and by the CLI ``gradcheck`` subcommand. All checks
run in double precision with central differences.
"""

from __future__ import annotations

import numpy as np

from . import tape as tp
from .bodymodel import Sphere, batch_query
from .meshcore import MaterialParams, build_rest_state, make_square_cloth


def rel_err(a, b, floor=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(floor, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / denom


def fd_gradient(fn, x, h=1e-6):
    """Central-difference gradient of scalar fn at x (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        step = h * max(1.0, abs(xf[i]))
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += step
        xm[i] -= step
        flat[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2 * step)
    return g


def check_scalar_fn(build, inputs, h=1e-6):
    """Compare tape gradients of ``build(tracked inputs) -> scalar`` to FD.

    ``inputs`` is a list of ndarrays; returns the max relative error over
    all of them.
    """
    t = tp.Tape()
    leaves = [t.leaf(np.asarray(x, dtype=np.float64)) for x in inputs]
    loss = build(*leaves)
    grads = t.backward(loss)
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            args = [np.asarray(v, dtype=np.float64) for v in inputs]
            args[k] = xk
            return float(tp.value_of(build(*args)))

        num = fd_gradient(f, x, h=h)
        worst = max(worst, rel_err(grads.of(leaves[k]), num))
    return worst


def primitive_suite(seed=0):
    """Per-primitive FD checks; returns list of (name, rel_err) pairs."""
    rng = np.random.default_rng(seed)
    E = 7
    idx = rng.integers(0, 5, size=E)
    results = []

    def case(name, build, inputs, h=1e-6):
        results.append((name, check_scalar_fn(build, inputs, h=h)))

    a34 = rng.standard_normal((3, 4))
    b34 = rng.standard_normal((3, 4))
    case("add", lambda a, b: tp.reduce_sum(tp.mul(tp.add(a, b), b34)), [a34, b34])
    case("sub", lambda a, b: tp.reduce_sum(tp.mul(tp.sub(a, b), a34)), [a34, b34])
    case("mul", lambda a, b: tp.reduce_sum(tp.mul(a, b)), [a34, b34])
    case(
        "mul_broadcast",
        lambda a, b: tp.reduce_sum(tp.mul(a, b)),
        [rng.standard_normal((3, 1)), b34],
    )
    case(
        "div",
        lambda a, b: tp.reduce_sum(tp.div(a, b)),
        [a34, 2.0 + np.abs(rng.standard_normal((3, 4)))],
    )
    case(
        "matmul",
        lambda a, b: tp.reduce_sum(tp.matmul(a, b)),
        [rng.standard_normal((2, 3)), rng.standard_normal((3, 4))],
    )
    wmb = rng.standard_normal((5, 3, 2))
    case(
        "matmul_batched",
        lambda a, b: tp.reduce_sum(tp.mul(tp.matmul(a, b), wmb)),
        [rng.standard_normal((5, 3, 4)), rng.standard_normal((5, 4, 2))],
    )
    case(
        "einsum2",
        lambda a, b: tp.reduce_sum(tp.einsum2("mij,mcj->mci", a, b)),
        [rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 3, 2))],
    )
    case("trace22", lambda a: tp.reduce_sum(tp.trace22(a)), [rng.standard_normal((4, 2, 2))])
    wt = rng.standard_normal((4, 2, 3))
    case(
        "transpose_last2",
        lambda a: tp.reduce_sum(tp.mul(tp.transpose_last2(a), wt)),
        [rng.standard_normal((4, 3, 2))],
    )
    w = rng.standard_normal((2, 9))
    case(
        "concat",
        lambda a, b, c: tp.reduce_sum(tp.mul(tp.concat([a, b, c], axis=1), w)),
        [rng.standard_normal((2, 2)), rng.standard_normal((2, 3)), rng.standard_normal((2, 4))],
    )
    wg = rng.standard_normal((E, 3))
    case(
        "gather",
        lambda a: tp.reduce_sum(tp.mul(tp.gather(a, idx), wg)),
        [rng.standard_normal((5, 3))],
    )
    ws = rng.standard_normal((5, 3))
    case(
        "scatter_add",
        lambda v: tp.reduce_sum(tp.mul(tp.scatter_add(v, idx, 5), ws)),
        [rng.standard_normal((E, 3))],
    )
    case(
        "narrow",
        lambda a: tp.reduce_sum(tp.narrow(a, 1, 1, 2)),
        [rng.standard_normal((3, 5))],
    )
    wr = rng.standard_normal((6, 2))
    case(
        "reshape",
        lambda a: tp.reduce_sum(tp.mul(tp.reshape(a, (6, 2)), wr)),
        [rng.standard_normal((3, 4))],
    )
    case(
        "relu",
        lambda a: tp.reduce_sum(tp.relu(a)),
        [rng.standard_normal((4, 4)) + 0.05],  # keep clear of the kink
    )
    case("tanh", lambda a: tp.reduce_sum(tp.tanh(a)), [rng.standard_normal((4, 4))])
    case("softplus", lambda a: tp.reduce_sum(tp.softplus(a)), [rng.standard_normal((4, 4))])
    case("reduce_sum_axis", lambda a: tp.reduce_sum(tp.mul(tp.reduce_sum(a, axis=0), np.arange(4.0))), [a34])
    case("reduce_mean", lambda a: tp.reduce_mean(a), [a34])
    case(
        "vector_norm",
        lambda a: tp.reduce_sum(tp.vector_norm(a, axis=1)),
        [rng.standard_normal((4, 3)) + 2.0],
    )
    wc = rng.standard_normal((4, 3))
    case(
        "cross",
        lambda a, b: tp.reduce_sum(tp.mul(tp.cross(a, b), wc)),
        [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))],
    )
    gain = 1.0 + 0.1 * rng.standard_normal(6)
    bias = 0.1 * rng.standard_normal(6)
    wln = rng.standard_normal((3, 6))
    case(
        "layer_norm",
        lambda a, g, b: tp.reduce_sum(tp.mul(tp.layer_norm(a, g, b), wln)),
        [rng.standard_normal((3, 6)), gain, bias],
    )
    return results


def random_test_mesh(rng, max_side=5):
    """Small square cloth with jittered current positions (<= 50 vertices)."""
    n = int(rng.integers(3, max_side + 1))
    size = float(rng.uniform(0.2, 0.6))
    mesh = make_square_cloth(n, size)
    amp = 0.15 * size
    X = mesh.vertices + rng.uniform(-amp, amp, size=mesh.vertices.shape)
    return mesh, X


def force_energy_suite(seed=0, meshes=20, h=1e-6):
    """Analytic forces vs -grad(energy) by central differences.

    Covers strain, bending, gravity, and collision (frozen body geometry)
    over ``meshes`` random <=50-vertex cloths; returns (name, err) pairs
    with the worst error per term.
    """
    from .forces import (
        bend_energy,
        bend_forces,
        collision_energy,
        gravity_energy,
        gravity_forces,
        strain_energy,
        strain_forces,
    )

    rng = np.random.default_rng(seed)
    worst = {"strain": 0.0, "bend": 0.0, "gravity": 0.0, "collision": 0.0}
    for _ in range(meshes):
        mesh, X = random_test_mesh(rng)
        mat = MaterialParams(
            mu=float(rng.uniform(1e3, 5e4)),
            lam=float(rng.uniform(0.0, 8e4)),
            k_bend=float(rng.uniform(1e-6, 1e-3)),
        )
        rest = build_rest_state(mesh, mat)

        def fd_force(efn):
            g = np.zeros_like(X)
            for i in range(X.shape[0]):
                for c in range(3):
                    xp = X.copy()
                    xm = X.copy()
                    xp[i, c] += h
                    xm[i, c] -= h
                    g[i, c] = -(float(tp.value_of(efn(xp))) - float(tp.value_of(efn(xm)))) / (2 * h)
            return g

        worst["strain"] = max(
            worst["strain"],
            rel_err(strain_forces(X, rest, mat), fd_force(lambda x: strain_energy(x, rest, mat))),
        )
        worst["bend"] = max(
            worst["bend"],
            rel_err(bend_forces(X, rest, mat), fd_force(lambda x: bend_energy(x, rest, mat))),
        )
        worst["gravity"] = max(
            worst["gravity"],
            rel_err(
                np.broadcast_to(gravity_forces(rest, mat), X.shape),
                fd_force(lambda x: gravity_energy(x, rest, mat)),
            ),
        )
        # collision with frozen (p, n): differentiate the linearized gap
        body = Sphere(center=X.mean(axis=0), radius=0.3 * float(rng.uniform(0.5, 1.0)))
        margin = 0.01
        q = batch_query(body, X)

        def coll_frozen(x):
            d = np.einsum("ij,ij->i", x - q.p, q.n)
            gap = np.maximum(margin - d, 0.0)
            return 1e3 * np.sum(gap**3)

        t = tp.Tape()
        Xt = t.leaf(X)
        e = collision_energy(Xt, body, margin, 1e3)
        ana = -t.backward(e).of(Xt)
        worst["collision"] = max(worst["collision"], rel_err(ana, fd_force(coll_frozen)))
    return [(f"force_{k}", v) for k, v in worst.items()]


def end_to_end_suite(seed=0, h=1e-6):
    """Pipeline loss gradients w.r.t. eta, delta, and a GNN weight vs FD
    on a ~20-vertex scene."""
    from .gnn import GNNParams, init_gnn_params
    from .scenes import make_scene
    from .solver import SolverConfig, drape_pipeline
    from .training import drape_loss

    from .scenes import desk_material

    rng = np.random.default_rng(seed)
    # soft material + center vertex over the pole: gravity reaches contact
    # within T steps, so the projection (hence delta) is active
    cfg = SolverConfig(T=8, epsilon=0.002)
    mesh = make_square_cloth(5, 0.2)
    mat = desk_material()
    body = Sphere(center=(0.0, 0.0, 0.0), radius=0.07)
    scene = make_scene(
        mesh, body, mat, cfg, placement="drop",
        clearance=cfg.epsilon + 0.001, name="gradcheck",
    )
    params = init_gnn_params(rng, latent=8, blocks=2)
    params.weights["dec.w2"] = (
        0.001 * rng.standard_normal(params.weights["dec.w2"].shape)
    ).astype(np.float32)
    wkey = "blk0.edge.w0"

    def loss_at(eta_v, delta_v, w_shift=0.0, widx=(0, 0)):
        w = {k: v.astype(np.float64) for k, v in params.weights.items()}
        w[wkey][widx] += w_shift
        p = GNNParams(params.latent, params.blocks, w)
        res = drape_pipeline(
            scene.mesh, scene.rest, scene.mat, scene.body, cfg, gnn=p,
            X_init=scene.X_init, eta=eta_v, delta=delta_v,
            with_trace=False, with_metrics=False,
        )
        loss, _ = drape_loss(
            res.X_final, scene.rest, scene.mat, scene.body,
            margin=cfg.epsilon, grav_origin=scene.grav_origin,
        )
        return float(tp.value_of(loss))

    t = tp.Tape()
    tracked = params.tracked(t)
    eta_t = t.leaf(np.float64(1.0))
    delta_t = t.leaf(np.float64(1.3))
    res = drape_pipeline(
        scene.mesh, scene.rest, scene.mat, scene.body, cfg, gnn=tracked,
        X_init=scene.X_init, eta=eta_t, delta=delta_t,
        with_trace=False, with_metrics=False,
    )
    loss, _ = drape_loss(
        res.X_final, scene.rest, scene.mat, scene.body,
        margin=cfg.epsilon, grav_origin=scene.grav_origin,
    )
    g = t.backward(loss)
    checks = []
    fd = (loss_at(1.0 + h, 1.3) - loss_at(1.0 - h, 1.3)) / (2 * h)
    checks.append(("pipeline_d_eta", rel_err(float(g.of(eta_t)), fd, floor=max(1e-9, abs(fd)))))
    fd = (loss_at(1.0, 1.3 + h) - loss_at(1.0, 1.3 - h)) / (2 * h)
    checks.append(("pipeline_d_delta", rel_err(float(g.of(delta_t)), fd, floor=max(1e-9, abs(fd)))))
    # probe the largest-gradient weight entry (avoids dead-relu zero/zero)
    gw_full = g.of(tracked.weights[wkey])
    widx = np.unravel_index(int(np.argmax(np.abs(gw_full))), gw_full.shape)
    fd = (loss_at(1.0, 1.3, h, widx) - loss_at(1.0, 1.3, -h, widx)) / (2 * h)
    gw = float(gw_full[widx])
    checks.append(("pipeline_d_weight", rel_err(gw, fd, floor=max(1e-9, abs(fd)))))
    return checks


def composite_suite(seed=0, n=3):
    """Random 3-layer tanh/relu/layer_norm compositions."""
    rng = np.random.default_rng(seed)
    results = []
    for k in range(n):
        w1 = rng.standard_normal((5, 6))
        w2 = rng.standard_normal((6, 6))
        w3 = rng.standard_normal((6, 2))
        g = 1.0 + 0.1 * rng.standard_normal(6)
        b = 0.1 * rng.standard_normal(6)
        wout = rng.standard_normal((4, 2))

        def build(x, w1, w2, w3):
            h = tp.tanh(tp.matmul(x, w1))
            h = tp.layer_norm(h, g, b)
            h = tp.relu(tp.add(tp.matmul(h, w2), 0.1))
            return tp.reduce_sum(tp.mul(tp.matmul(h, w3), wout))

        x = rng.standard_normal((4, 5))
        results.append((f"composite_{k}", check_scalar_fn(build, [x, w1, w2, w3])))
    return results
