"""Seeded random models for tests, demos and cost studies.

No trained weights ship with this package; these generators stand in for
them. Same arguments, same bytes.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .dvs import GestureClassifierParams
from .egru import GATES, EgruLayerParams, activity_sparsity, egru_step, EgruState
from .lm import EmbeddingTable, LanguageModel
from .sparse import FLOAT, csr_from_dense, csr_transpose, magnitude_prune


def random_matrix(rng: np.random.Generator, rows: int, cols: int, sparsity: float, gain: float = 1.0) -> np.ndarray:
    """Magnitude-pruned Gaussian matrix scaled so each row's sum has variance ``gain**2``."""
    w = magnitude_prune(rng.standard_normal((rows, cols), dtype=np.float32), sparsity)
    kept = w[w != 0]
    if kept.size:
        per_row = kept.size / rows
        w *= FLOAT(gain / np.sqrt(per_row * np.mean(kept.astype(np.float64) ** 2)))
    return w


def random_layer(
    rng: np.random.Generator,
    n_in: int,
    n_units: int,
    sparsity: float = 0.0,
    theta: float = 0.3,
    gain: float = 1.0,
    bias_scale: float = 0.1,
    lambda_sg: float = 1.0,
    epsilon_sg: float = 1.0,
) -> EgruLayerParams:
    mats = {f"W_{g}_x": csr_from_dense(random_matrix(rng, n_units, n_in, sparsity, gain)) for g in GATES}
    for g in GATES:
        # generated in (dest, presyn) orientation, stored transposed
        mats[f"W_{g}_y"] = csr_transpose(csr_from_dense(random_matrix(rng, n_units, n_units, sparsity, gain)))
    biases = {f"b_{g}": (bias_scale * rng.standard_normal(n_units)).astype(FLOAT) for g in GATES}
    return EgruLayerParams(
        n_in, n_units, **mats, **biases,
        theta=np.full(n_units, theta, dtype=FLOAT), lambda_sg=lambda_sg, epsilon_sg=epsilon_sg,
    )


def random_stack(rng, dims: list[int], sparsity: float = 0.0, theta: float = 0.3, **kw) -> list[EgruLayerParams]:
    """Layers for ``dims = [n_in, units_1, units_2, ...]``."""
    return [random_layer(rng, a, b, sparsity, theta, **kw) for a, b in zip(dims[:-1], dims[1:])]


def synth_lm(
    dims=(750, 1350, 1350, 750),
    vocab_size: int = 1000,
    sparsity: float = 0.95,
    seed: int = 0,
    theta: float = 0.3,
) -> LanguageModel:
    """Language model whose embedding dim is ``dims[0]`` (tied, so also ``dims[-1]``)."""
    if dims[0] != dims[-1]:
        raise ValueError("tied readout needs the last layer as wide as the embedding")
    rng = np.random.default_rng(seed)
    layers = random_stack(rng, list(dims), sparsity, theta)
    vocab = ["<unk>", "<eos>"] + [f"w{i}" for i in range(vocab_size - 2)]
    table = EmbeddingTable(rng.standard_normal((vocab_size, dims[0]), dtype=np.float32))
    return LanguageModel(layers, table, vocab, "<unk>", "<eos>")


def synth_dvs(
    dims=(512, 256, 256),
    n_classes: int = 11,
    sparsity: float = 0.0,
    seed: int = 0,
    theta: float = 0.3,
    aggregate: str = "last",
) -> GestureClassifierParams:
    rng = np.random.default_rng(seed)
    layers = random_stack(rng, list(dims), sparsity, theta)
    readout = (rng.standard_normal((n_classes, dims[-1])) / np.sqrt(dims[-1])).astype(FLOAT)
    bias = (0.01 * rng.standard_normal(n_classes)).astype(FLOAT)
    return GestureClassifierParams(layers, readout, bias, aggregate)


def with_thresholds(layers, thetas) -> list[EgruLayerParams]:
    return [dataclasses.replace(p, theta=np.full(p.n_units, t, dtype=FLOAT)) for p, t in zip(layers, thetas)]


def _mean_sparsity(layers, inputs, upto: int, warmup: int) -> float:
    states = [EgruState.fresh(p.n_units) for p in layers[: upto + 1]]
    total, n = 0.0, 0
    for t, x in enumerate(inputs):
        for i in range(upto + 1):
            y, states[i], _ = egru_step(layers[i], x, states[i])
            x = y.to_dense()
        if t >= warmup:
            total += activity_sparsity(y)
            n += 1
    return total / n


def calibrate_thresholds(layers, inputs, target_sparsity: float = 0.9, warmup: int = 2, iters: int = 24):
    """Per-layer scalar thresholds giving about ``target_sparsity`` mean activity sparsity.

    Layers are tuned front to back by bisection, since each layer's activity
    depends on the layers below it.
    """
    layers = list(layers)
    for i in range(len(layers)):
        lo, hi = 0.0, 4.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            layers[i] = with_thresholds([layers[i]], [mid])[0]
            if _mean_sparsity(layers, inputs, i, warmup) < target_sparsity:
                lo = mid
            else:
                hi = mid
        layers[i] = with_thresholds([layers[i]], [hi])[0]
    return layers
