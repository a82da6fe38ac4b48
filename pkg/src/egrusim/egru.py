"""Event-based GRU cell.

A unit emits its cell state as an event once it reaches the unit's
threshold, and the threshold is then subtracted from the state. Gates see
only the sparse outputs of the previous step.

Recurrent matrices are stored transposed (row = presynaptic unit) so that
one event selects one contiguous CSR row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sparse import (
    FLOAT,
    CsrMatrix,
    DimensionError,
    EventVector,
    OpCounter,
    csr_to_dense,
    dense_matvec,
    event_matvec,
)

GATES = ("u", "r", "z")


def sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return (FLOAT(1) / (FLOAT(1) + np.exp(-x))).astype(FLOAT, copy=False)


@dataclass(frozen=True, eq=False)
class EgruLayerParams:
    """Weights of one layer, split into input and recurrent blocks per gate.

    ``W_*_y`` are the recurrent matrices transposed: shape
    ``(n_presyn, n_units)``. For a whole layer ``n_presyn == n_units``; a
    per-PE slice keeps every presynaptic row but only its own destinations.
    """

    n_in: int
    n_units: int
    W_u_x: CsrMatrix
    W_r_x: CsrMatrix
    W_z_x: CsrMatrix
    W_u_y: CsrMatrix
    W_r_y: CsrMatrix
    W_z_y: CsrMatrix
    b_u: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray
    theta: np.ndarray
    lambda_sg: float = 1.0
    epsilon_sg: float = 1.0
    n_presyn: int | None = None

    def __post_init__(self):
        if self.n_presyn is None:
            object.__setattr__(self, "n_presyn", self.n_units)
        for g in GATES:
            wx, wy = getattr(self, f"W_{g}_x"), getattr(self, f"W_{g}_y")
            if wx.shape != (self.n_units, self.n_in):
                raise DimensionError(f"W_{g}_x is {wx.shape}, expected {(self.n_units, self.n_in)}")
            if wy.shape != (self.n_presyn, self.n_units):
                raise DimensionError(
                    f"W_{g}_y is {wy.shape}, expected {(self.n_presyn, self.n_units)} (transposed)"
                )
        for name in ("b_u", "b_r", "b_z", "theta"):
            v = np.ascontiguousarray(getattr(self, name), dtype=FLOAT)
            if v.shape != (self.n_units,):
                raise DimensionError(f"{name} has shape {v.shape}, expected ({self.n_units},)")
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        if not self.epsilon_sg > 0:
            raise ValueError("epsilon_sg must be > 0")
        if self.lambda_sg < 0:
            raise ValueError("lambda_sg must be >= 0")

    def input_matrices(self) -> tuple[CsrMatrix, CsrMatrix, CsrMatrix]:
        return self.W_u_x, self.W_r_x, self.W_z_x

    def recurrent_matrices(self) -> tuple[CsrMatrix, CsrMatrix, CsrMatrix]:
        return self.W_u_y, self.W_r_y, self.W_z_y

    def weight_matrices(self) -> list[CsrMatrix]:
        return [*self.input_matrices(), *self.recurrent_matrices()]


@dataclass(frozen=True, eq=False)
class EgruState:
    c: np.ndarray
    y: EventVector

    @classmethod
    def fresh(cls, n_units: int) -> "EgruState":
        return cls(np.zeros(n_units, dtype=FLOAT), EventVector.empty(n_units))


@dataclass(frozen=True, eq=False)
class StepTrace:
    u: np.ndarray
    r: np.ndarray
    z: np.ndarray
    c_pre: np.ndarray
    heaviside: np.ndarray


@dataclass
class StepCounters:
    input_macs: OpCounter = field(default_factory=OpCounter)
    recurrent_macs: OpCounter = field(default_factory=OpCounter)


def heaviside(x):
    return (np.asarray(x) >= 0).astype(np.uint8)


def input_projections(p: EgruLayerParams, x, counter: OpCounter | None = None):
    """``W_g_x @ x + b_g`` for the three gates."""
    x = np.asarray(x, dtype=FLOAT)
    if x.shape != (p.n_in,):
        raise DimensionError(f"input has shape {x.shape}, layer expects ({p.n_in},)")
    return tuple(
        dense_matvec(w, x, counter) + b
        for w, b in zip(p.input_matrices(), (p.b_u, p.b_r, p.b_z))
    )


def compute_gates(p: EgruLayerParams, wx_u, wx_r, y_prev: EventVector, counter=None):
    u = sigmoid(wx_u + event_matvec(p.W_u_y, y_prev, counter))
    r = sigmoid(wx_r + event_matvec(p.W_r_y, y_prev, counter))
    return u, r


def gate_events(r, y: EventVector, offset: int = 0) -> EventVector:
    """``r * y`` restricted to the active units of ``y``.

    ``r`` is indexed from ``offset`` (a PE holds the reset gate of its own
    units only). Products that underflow to zero are dropped.
    """
    vals = r[y.indices.astype(np.int64) - offset] * y.values
    keep = vals != 0
    return EventVector(y.dim, y.indices[keep], vals[keep])


def candidate_from_gated(p: EgruLayerParams, wx_z, gated: EventVector, counter=None):
    return np.tanh(wx_z + event_matvec(p.W_z_y, gated, counter)).astype(FLOAT, copy=False)


def compute_candidate(p: EgruLayerParams, wx_z, r, y_prev: EventVector, counter=None):
    """Candidate state; the reset gate scales the events before projection.

    ``wx_z`` already carries ``b_z`` (see :func:`input_projections`).
    """
    return candidate_from_gated(p, wx_z, gate_events(r, y_prev), counter)


def state_update(u, z, c_prev):
    return u * z + (FLOAT(1) - u) * c_prev


def emit_events(c_pre, theta, offset: int = 0, dim: int | None = None):
    """Threshold crossing with subtractive reset.

    Returns the events (indices shifted by ``offset``, in a vector of
    ``dim``), the post-reset state and the Heaviside bits.
    """
    c_pre = np.asarray(c_pre, dtype=FLOAT)
    theta = np.asarray(theta, dtype=FLOAT)
    if c_pre.shape != theta.shape:
        raise DimensionError("state and threshold lengths differ")
    h = heaviside(c_pre - theta)
    c_post = c_pre - theta * h.astype(FLOAT)
    (idx,) = np.nonzero(h)
    # a unit whose state is exactly 0 at a non-positive threshold carries no event
    idx = idx[c_pre[idx] != 0]
    y = EventVector(c_pre.shape[0] if dim is None else dim, idx + offset, c_pre[idx])
    return y, c_post, h


def egru_step(p: EgruLayerParams, x, s: EgruState, counters: StepCounters | None = None):
    """One timestep; returns ``(y, new_state, trace)``."""
    if s.c.shape != (p.n_units,) or s.y.dim != p.n_presyn:
        raise DimensionError("state does not match layer")
    ic = counters.input_macs if counters else None
    rc = counters.recurrent_macs if counters else None
    wx_u, wx_r, wx_z = input_projections(p, x, ic)
    u, r = compute_gates(p, wx_u, wx_r, s.y, rc)
    z = compute_candidate(p, wx_z, r, s.y, rc)
    c_pre = state_update(u, z, s.c)
    y, c_post, h = emit_events(c_pre, p.theta)
    return y, EgruState(c_post, y), StepTrace(u, r, z, c_pre, h)


def run_layer(p: EgruLayerParams, xs, state: EgruState | None = None):
    """Iterate :func:`egru_step` over a sequence; returns outputs and final state."""
    state = state or EgruState.fresh(p.n_units)
    ys = []
    for x in xs:
        y, state, _ = egru_step(p, x, state)
        ys.append(y)
    return ys, state


def activity_sparsity(y: EventVector) -> float:
    return 1.0 - len(y) / y.dim


def surrogate_deriv(v, lambda_sg: float, epsilon_sg: float):
    """Triangular pseudo-derivative of the step, centred on the threshold."""
    if not epsilon_sg > 0:
        raise ValueError("epsilon_sg must be > 0")
    return lambda_sg * np.maximum(0.0, 1.0 - np.abs(v) / epsilon_sg)


# ---------------------------------------------------------------------------
# float64 single-step reference and its reverse pass (gradient checks only)


@dataclass
class DenseLayer64:
    """Dense float64 copy of a layer; recurrent matrices in ``(n_units, n_units)`` orientation."""

    W_x: dict
    W_y: dict
    b: dict
    theta: np.ndarray
    lambda_sg: float
    epsilon_sg: float

    @classmethod
    def from_params(cls, p: EgruLayerParams) -> "DenseLayer64":
        return cls(
            W_x={g: csr_to_dense(getattr(p, f"W_{g}_x")).astype(np.float64) for g in GATES},
            W_y={g: csr_to_dense(getattr(p, f"W_{g}_y")).T.astype(np.float64) for g in GATES},
            b={g: getattr(p, f"b_{g}").astype(np.float64) for g in GATES},
            theta=p.theta.astype(np.float64),
            lambda_sg=p.lambda_sg,
            epsilon_sg=p.epsilon_sg,
        )

    def copy(self) -> "DenseLayer64":
        return DenseLayer64(
            {g: w.copy() for g, w in self.W_x.items()},
            {g: w.copy() for g, w in self.W_y.items()},
            {g: v.copy() for g, v in self.b.items()},
            self.theta.copy(),
            self.lambda_sg,
            self.epsilon_sg,
        )


def forward64(d: DenseLayer64, x, c_prev, y_prev):
    """Returns ``(y, c_post, cache)`` in float64 with dense ``y_prev``."""
    x, c_prev, y_prev = (np.asarray(a, dtype=np.float64) for a in (x, c_prev, y_prev))
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))  # noqa: E731
    u = sig(d.W_x["u"] @ x + d.b["u"] + d.W_y["u"] @ y_prev)
    r = sig(d.W_x["r"] @ x + d.b["r"] + d.W_y["r"] @ y_prev)
    gy = r * y_prev
    z = np.tanh(d.W_x["z"] @ x + d.b["z"] + d.W_y["z"] @ gy)
    c_pre = u * z + (1.0 - u) * c_prev
    h = (c_pre - d.theta >= 0).astype(np.float64)
    y = c_pre * h
    c_post = c_pre - d.theta * h
    cache = dict(x=x, c_prev=c_prev, y_prev=y_prev, u=u, r=r, gy=gy, z=z, c_pre=c_pre, h=h)
    return y, c_post, cache


def step_backward(p: EgruLayerParams, x, s: EgruState, trace: StepTrace, grad_y, grad_c=None):
    """Reverse pass of one :func:`egru_step`, using the surrogate for the step.

    ``grad_y`` and ``grad_c`` are dense loss gradients with respect to the
    emitted output and the post-reset state. Gradients are returned in
    float64 as a dict keyed ``W_<g>_x``, ``W_<g>_y`` (un-transposed,
    ``(n_units, n_units)``), ``b_<g>``, ``x``, ``c_prev`` and ``y_prev``.
    """
    d = DenseLayer64.from_params(p)
    _, _, k = forward64(d, x, s.c, s.y.to_dense())
    if not np.array_equal(k["h"].astype(np.uint8), trace.heaviside):
        raise ValueError("trace does not belong to this state and input")
    n = p.n_units
    grad_y = np.asarray(grad_y, dtype=np.float64)
    grad_c = np.zeros(n) if grad_c is None else np.asarray(grad_c, dtype=np.float64)
    if grad_y.shape != (n,) or grad_c.shape != (n,):
        raise DimensionError("output gradients must have one entry per unit")

    sd = surrogate_deriv(k["c_pre"] - d.theta, d.lambda_sg, d.epsilon_sg)
    g_cpre = grad_y * (k["h"] + k["c_pre"] * sd) + grad_c * (1.0 - d.theta * sd)
    u, r, z = k["u"], k["r"], k["z"]
    g_pre = {
        "u": g_cpre * (z - k["c_prev"]) * u * (1.0 - u),
        "z": g_cpre * u * (1.0 - z * z),
    }
    g_gy = d.W_y["z"].T @ g_pre["z"]
    g_pre["r"] = g_gy * k["y_prev"] * r * (1.0 - r)

    rec_in = {"u": k["y_prev"], "r": k["y_prev"], "z": k["gy"]}
    grads = {}
    for g in GATES:
        grads[f"W_{g}_x"] = np.outer(g_pre[g], k["x"])
        grads[f"W_{g}_y"] = np.outer(g_pre[g], rec_in[g])
        grads[f"b_{g}"] = g_pre[g]
    grads["x"] = sum(d.W_x[g].T @ g_pre[g] for g in GATES)
    grads["c_prev"] = g_cpre * (1.0 - u)
    grads["y_prev"] = d.W_y["u"].T @ g_pre["u"] + d.W_y["r"].T @ g_pre["r"] + g_gy * r
    return grads
