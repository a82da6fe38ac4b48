import dataclasses

import numpy as np

from egrusim.egru import EgruLayerParams
from egrusim.sparse import EventVector
from egrusim.synth import random_layer


def make_layer(rng, n_in, n_units, sparsity=0.0, theta=None, **kw) -> EgruLayerParams:
    p = random_layer(rng, n_in, n_units, sparsity, gain=1.5, bias_scale=0.3, **kw)
    if theta is None:
        theta = rng.uniform(0.0, 0.5, n_units)
    theta = np.broadcast_to(np.asarray(theta, np.float32), (n_units,)).copy()
    return dataclasses.replace(p, theta=theta)


def make_stack(rng, dims, sparsity=0.0, **kw):
    return [make_layer(rng, a, b, sparsity, **kw) for a, b in zip(dims[:-1], dims[1:])]


def random_events(rng, dim, active_fraction, scale=1.0) -> EventVector:
    mask = rng.random(dim) < active_fraction
    vals = np.where(mask, rng.uniform(0.1, 1.0, dim) * scale * rng.choice([-1, 1], dim), 0)
    return EventVector.from_dense(vals.astype(np.float32))


def zero_layer(n_in, n_units, theta=1.0, **biases):
    from egrusim.sparse import csr_from_dense

    zx, zy = csr_from_dense(np.zeros((n_units, n_in))), csr_from_dense(np.zeros((n_units, n_units)))
    b = {f"b_{g}": np.asarray(biases.get(f"b_{g}", np.zeros(n_units)), np.float32) for g in "urz"}
    return EgruLayerParams(
        n_in, n_units, zx, zx, zx, zy, zy, zy, **b, theta=np.full(n_units, theta, np.float32)
    )


def margin_instance(rng, n_in, n_units, sparsity=0.0):
    """A layer, input and state where every unit sits more than epsilon from its threshold."""
    from egrusim.egru import EgruState, egru_step

    eps = float(rng.uniform(0.02, 0.3))
    p = make_layer(rng, n_in, n_units, sparsity, epsilon_sg=eps, lambda_sg=float(rng.uniform(0.2, 2.0)))
    x = rng.standard_normal(n_in).astype(np.float32)
    c0 = rng.uniform(-0.5, 0.5, n_units).astype(np.float32)
    state = EgruState(c0, random_events(rng, n_units, 0.5))
    _, _, trace = egru_step(p, x, state)
    side = rng.choice([-1.0, 1.0], n_units)
    theta = trace.c_pre - side * (eps + rng.uniform(0.05, 0.3, n_units))
    p = dataclasses.replace(p, theta=theta.astype(np.float32))
    return p, x, state


def finite_difference_grads(p, x, state, grad_y, grad_c, h=1e-3):
    """Central differences of sum(grad_y*y + grad_c*c_post) in float64."""
    from egrusim.egru import DenseLayer64, forward64

    base = DenseLayer64.from_params(p)
    inputs = {"x": np.asarray(x, np.float64), "c_prev": state.c.astype(np.float64), "y_prev": state.y.to_dense().astype(np.float64)}

    def loss(d, inp):
        y, c, _ = forward64(d, inp["x"], inp["c_prev"], inp["y_prev"])
        return float(grad_y @ y + grad_c @ c)

    def fd(get):
        d, inp = base.copy(), {k: v.copy() for k, v in inputs.items()}
        arr = get(d, inp)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss(d, inp)
            arr[idx] = old - h
            down = loss(d, inp)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        return g

    out = {}
    for gate in "urz":
        out[f"W_{gate}_x"] = fd(lambda d, i, g=gate: d.W_x[g])
        out[f"W_{gate}_y"] = fd(lambda d, i, g=gate: d.W_y[g])
        out[f"b_{gate}"] = fd(lambda d, i, g=gate: d.b[g])
    for k in inputs:
        out[k] = fd(lambda d, i, k=k: i[k])
    return out


def relative_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)
