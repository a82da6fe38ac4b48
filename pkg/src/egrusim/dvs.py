"""DVS gesture path: event binning, max-pooling and EGRU classification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manycore import PeBudget, Simulator, SimConfig
from .profiler import CostModel, ProfileReport, StageCounters, build_report
from .sparse import FLOAT, DimensionError, csr_from_dense, dense_matvec

SENSOR_SIZE = 128
WINDOW_US = 25_000
POOL_FACTOR = 4
FEATURE_DIM = 512
N_CLASSES = 11


class CoordinateError(ValueError):
    pass


def bin_events(events, window_us: int = WINDOW_US, size: int = SENSOR_SIZE) -> np.ndarray:
    """Count events per ``(frame, polarity, y, x)``; frame ``k`` covers ``[k*window, (k+1)*window)``.

    ``events`` is a structured array with fields ``t`` (microseconds), ``x``,
    ``y`` and ``p``.
    """
    t = np.asarray(events["t"], dtype=np.int64)
    x = np.asarray(events["x"], dtype=np.int64)
    y = np.asarray(events["y"], dtype=np.int64)
    p = np.asarray(events["p"], dtype=np.int64)
    if t.size == 0:
        return np.zeros((0, 2, size, size), dtype=np.int32)
    if np.any(np.diff(t) < 0):
        raise ValueError("timestamps must be non-decreasing")
    if x.min() < 0 or y.min() < 0 or x.max() >= size or y.max() >= size:
        raise CoordinateError(f"event coordinate outside the {size}x{size} sensor")
    if p.min() < 0 or p.max() > 1:
        raise ValueError("polarity must be 0 or 1")
    frame = t // window_us
    out = np.zeros((int(frame[-1]) + 1, 2, size, size), dtype=np.int32)
    np.add.at(out, (frame, p, y, x), 1)
    return out


def maxpool_frames(frames: np.ndarray, factor: int = POOL_FACTOR) -> np.ndarray:
    n, ch, h, w = frames.shape
    if h % factor or w % factor:
        raise ValueError(f"resolution {h}x{w} not divisible by {factor}")
    return frames.reshape(n, ch, h // factor, factor, w // factor, factor).max(axis=(3, 5))


@dataclass(frozen=True, eq=False)
class GestureClassifierParams:
    layers: list
    readout: np.ndarray
    readout_bias: np.ndarray
    aggregate: str = "last"

    def __post_init__(self):
        r = np.ascontiguousarray(self.readout, dtype=FLOAT)
        b = np.ascontiguousarray(self.readout_bias, dtype=FLOAT)
        if r.ndim != 2 or r.shape[1] != self.layers[-1].n_units:
            raise DimensionError("readout must be n_classes x final-layer units")
        if b.shape != (r.shape[0],):
            raise DimensionError("readout bias must have one entry per class")
        for i in range(1, len(self.layers)):
            if self.layers[i].n_in != self.layers[i - 1].n_units:
                raise DimensionError(f"layer {i} input does not match layer {i - 1} width")
        if self.aggregate not in ("last", "mean"):
            raise ValueError("aggregate must be 'last' or 'mean'")
        for a in (r, b):
            a.flags.writeable = False
        object.__setattr__(self, "readout", r)
        object.__setattr__(self, "readout_bias", b)
        # dense weights go through the same CSR kernel as everything else
        object.__setattr__(self, "_readout_csr", csr_from_dense(r))

    @property
    def n_classes(self) -> int:
        return self.readout.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[0].n_in

    def simulator(self, pes=1, budget: PeBudget | None = None, config: SimConfig | None = None) -> Simulator:
        return Simulator.build(list(self.layers), pes, budget, config)


def _classify_on(sim: Simulator, features, params: GestureClassifierParams, aggregate: str):
    features = np.asarray(features, dtype=FLOAT)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("need a non-empty (steps, dim) feature sequence")
    if features.shape[1] != params.feature_dim:
        raise DimensionError(f"features have dim {features.shape[1]}, model expects {params.feature_dim}")
    sim.reset()
    acc = np.zeros(params.layers[-1].n_units, dtype=FLOAT)
    for f in features:
        h = sim.step(f)[-1].to_dense()
        if aggregate == "mean":
            acc += h
    if aggregate == "mean":
        h = acc / FLOAT(features.shape[0])
    logits = dense_matvec(params._readout_csr, h) + params.readout_bias
    return logits, int(np.argmax(logits))


def classify(features, params: GestureClassifierParams, aggregate: str | None = None, pes=1, budget=None):
    """Run the stack over one feature sequence and return ``(logits, class)``.

    Ties resolve to the lowest class index.
    """
    sim = params.simulator(pes, budget)
    try:
        return _classify_on(sim, features, params, aggregate or params.aggregate)
    finally:
        sim.close()


@dataclass
class DvsEvalResult:
    accuracy: float
    predictions: list
    batch_reports: list = field(repr=False)
    counters: StageCounters = field(repr=False)
    time_per_item_s: float = 0.0
    energy_per_item_j: float = 0.0


def evaluate_dvs(
    params: GestureClassifierParams,
    dataset,
    batch_size: int = 1,
    pes=1,
    budget: PeBudget | None = None,
    cost_model: CostModel | None = None,
    aggregate: str | None = None,
) -> DvsEvalResult:
    """Accuracy over ``(features, label)`` items, batches run back to back.

    Each batch gets its own report normalized by the batch's size; batching
    changes only the accounting, never a prediction.
    """
    items = list(dataset)
    if not items:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    sim = params.simulator(pes, budget)
    preds, reports, total = [], [], StageCounters()
    try:
        for b in range(0, len(items), batch_size):
            batch = items[b : b + batch_size]
            sim.counters = StageCounters()
            for features, _ in batch:
                preds.append(_classify_on(sim, features, params, aggregate or params.aggregate)[1])
            reports.append(build_report(sim.counters, cost_model, batch_size=len(batch)))
            total.merge(sim.counters)
    finally:
        sim.close()
    correct = sum(int(p == lab) for p, (_, lab) in zip(preds, items))
    overall: ProfileReport = build_report(total, cost_model, batch_size=len(items))
    return DvsEvalResult(
        accuracy=correct / len(items),
        predictions=preds,
        batch_reports=reports,
        counters=total,
        time_per_item_s=overall.time_per_item_s,
        energy_per_item_j=overall.energy_per_item_j,
    )
