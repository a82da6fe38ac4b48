"""Word-level language model on an EGRU stack with a tied embedding readout."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .egru import activity_sparsity
from .manycore import PeBudget, Simulator, SimConfig
from .profiler import StageCounters
from .sparse import FLOAT, DimensionError, EventVector

CHUNK_LEN = 70
GREEDY_TEMPERATURE = 1e-6


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    vectors: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=FLOAT)
        if v.ndim != 2:
            raise DimensionError("embedding table must be vocab_size x dim")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)
        # column-major copy so the readout walks one contiguous column per event
        cols = np.ascontiguousarray(v.T)
        cols.flags.writeable = False
        object.__setattr__(self, "_columns", cols)

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True, eq=False)
class LanguageModel:
    layers: list
    embedding: EmbeddingTable
    vocab: list
    unk_token: str = "<unk>"
    start_token: str | None = None

    def __post_init__(self):
        if len(self.vocab) != self.embedding.vocab_size:
            raise DimensionError("vocabulary and embedding table sizes differ")
        if not self.layers:
            raise ValueError("a language model needs at least one layer")
        if self.layers[0].n_in != self.embedding.dim or self.layers[-1].n_units != self.embedding.dim:
            raise DimensionError("first layer input and last layer width must equal the embedding dim")
        object.__setattr__(self, "_ids", {w: i for i, w in enumerate(self.vocab)})

    def token_id(self, word: str) -> int:
        return self._ids.get(word, self._ids.get(self.unk_token, -1))

    def simulator(self, pes=1, budget: PeBudget | None = None, config: SimConfig | None = None) -> Simulator:
        return Simulator.build(list(self.layers), pes, budget, config)


def embed(token: int, table: EmbeddingTable) -> np.ndarray:
    if not 0 <= token < table.vocab_size:
        raise IndexError(f"token {token} outside vocabulary of {table.vocab_size}")
    return table.vectors[token]


def readout_logits(h, table: EmbeddingTable) -> np.ndarray:
    """Dot product of the final-layer output with every embedding vector.

    ``h`` may be dense or an :class:`EventVector`; only active units are
    visited, in ascending order.
    """
    y = h if isinstance(h, EventVector) else EventVector.from_dense(h)
    if y.dim != table.dim:
        raise DimensionError(f"output dim {y.dim} != embedding dim {table.dim}")
    logits = np.zeros(table.vocab_size, dtype=FLOAT)
    for i, v in zip(y.indices, y.values):
        logits += v * table._columns[i]
    return logits


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


@dataclass
class PerplexityAccumulator:
    total_log_loss: float = 0.0
    token_count: int = 0
    zero_probability_count: int = 0

    def update(self, probs, target: int) -> "PerplexityAccumulator":
        p = float(probs[target])
        if p <= 0:
            self.zero_probability_count += 1
        else:
            self.total_log_loss -= math.log(p)
        self.token_count += 1
        return self

    def update_logits(self, logits, target: int) -> "PerplexityAccumulator":
        self.total_log_loss -= float(log_softmax(logits)[target])
        self.token_count += 1
        return self

    def value(self) -> float:
        if self.token_count == 0:
            raise ValueError("perplexity undefined for zero tokens")
        if self.zero_probability_count:
            return math.inf
        return math.exp(self.total_log_loss / self.token_count)


def ppl_update(acc: PerplexityAccumulator, probs, target: int) -> PerplexityAccumulator:
    return acc.update(probs, target)


def ppl_value(acc: PerplexityAccumulator) -> float:
    return acc.value()


@dataclass
class LmEvalResult:
    ppl: float
    token_count: int
    layer_sparsity: list
    counters: StageCounters = field(repr=False)
    n_steps: int = 0


def evaluate_lm(
    model: LanguageModel,
    tokens,
    pes=1,
    budget: PeBudget | None = None,
    chunk_len: int = CHUNK_LEN,
    reset_state: bool = False,
    config: SimConfig | None = None,
) -> LmEvalResult:
    """Teacher-forced perplexity of one document.

    The stream is cut into ``chunk_len`` pieces; state carries over between
    pieces unless ``reset_state`` is set.
    """
    tokens = list(tokens)
    if len(tokens) < 2:
        raise ValueError("need at least two tokens to score a prediction")
    sim = model.simulator(pes, budget, config)
    acc = PerplexityAccumulator()
    sparsity = [0.0] * len(model.layers)
    steps = 0
    try:
        for start in range(0, len(tokens) - 1, chunk_len):
            if reset_state:
                sim.reset()
            for t in range(start, min(start + chunk_len, len(tokens) - 1)):
                outs = sim.step(embed(tokens[t], model.embedding))
                acc.update_logits(readout_logits(outs[-1], model.embedding), tokens[t + 1])
                for i, y in enumerate(outs):
                    sparsity[i] += activity_sparsity(y)
                steps += 1
    finally:
        sim.close()
    return LmEvalResult(acc.value(), acc.token_count, [s / steps for s in sparsity], sim.counters, steps)


def generate(
    model: LanguageModel,
    prompt,
    length: int,
    temperature: float = 1.0,
    seed: int | None = None,
    pes=1,
    budget: PeBudget | None = None,
) -> list[int]:
    """Feed ``prompt`` then sample ``length`` tokens, each fed back in turn.

    Below ``GREEDY_TEMPERATURE`` the argmax is taken and no randomness is used.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if length < 0:
        raise ValueError("length must be >= 0")
    prompt = list(prompt)
    if not prompt:
        if model.start_token is None:
            raise ValueError("empty prompt and the model has no start token")
        prompt = [model.token_id(model.start_token)]
    if length == 0:
        return []
    rng = np.random.default_rng(seed)
    sim = model.simulator(pes, budget)
    try:
        for tok in prompt[:-1]:
            sim.step(embed(tok, model.embedding))
        out, tok = [], prompt[-1]
        for _ in range(length):
            logits = readout_logits(sim.step(embed(tok, model.embedding))[-1], model.embedding)
            if temperature < GREEDY_TEMPERATURE:
                tok = int(np.argmax(logits))
            else:
                tok = int(rng.choice(len(logits), p=softmax(np.asarray(logits, np.float64) / temperature)))
            out.append(tok)
    finally:
        sim.close()
    return out
