"""prod2vec: CBOW with negative sampling over browsing sessions.

For every centre position the context vector is the mean of the context
(``V``) rows within ``window`` positions on each side. One positive pair and
``negatives`` sampled products are scored against it, and SGD ascends

    log σ(U[p]·v̄) + Σ_n log σ(−U[n]·v̄)

Inference (session vectors, nearest neighbours) uses the centre table ``U``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numba
import numpy as np

from .corpus import Session, Vocabulary, build_vocab
from .errors import EmptyIntentError, TrainingDivergedError, ValidationError


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 48
    window: int = 5
    epochs: int = 5
    min_count: int = 5
    ns_exponent: float = 0.75
    negatives: int = 5
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    seed: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.dim < 2:
            raise ValidationError(f"dim must be >= 2, got {self.dim}")
        if self.window < 1:
            raise ValidationError(f"window must be >= 1, got {self.window}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.min_count < 1 or self.negatives < 1 or self.workers < 1:
            raise ValidationError("min_count, negatives and workers must be positive")
        if not -1.0 <= self.ns_exponent <= 1.0:
            raise ValidationError(f"ns_exponent must lie in [-1, 1], got {self.ns_exponent}")
        if not 0 < self.min_learning_rate <= self.learning_rate:
            raise ValidationError("need 0 < min_learning_rate <= learning_rate")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    vocab: Vocabulary
    U: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)
    loss_history: tuple[float, ...] = ()

    def __post_init__(self):
        n = len(self.vocab)
        for name in ("U", "V"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValidationError(f"{name} must have {n} rows, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.U.shape != self.V.shape:
            raise ValidationError("U and V shapes differ")

    @property
    def dim(self) -> int:
        return self.U.shape[1]

    def __len__(self):
        return len(self.vocab)

    def vector(self, product_id: str) -> np.ndarray:
        return self.U[self.vocab.index[product_id]]

    @cached_property
    def unit(self) -> np.ndarray:
        """Row-normalised copy of ``U`` used for cosine queries."""
        norms = np.linalg.norm(self.U, axis=1, keepdims=True)
        out = self.U / np.where(norms > 0, norms, 1.0)
        out.flags.writeable = False
        return out

    def with_vectors(self, U: np.ndarray) -> "EmbeddingTable":
        """Same vocabulary, different centre vectors (e.g. after mapping into another space)."""
        return EmbeddingTable(self.vocab, U, np.zeros_like(U))


# -- negative sampling ------------------------------------------------------

class NegativeSampler:
    """Draws products with probability proportional to ``count ** exponent``."""

    def __init__(self, counts: Sequence[int], exponent: float):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.size == 0 or np.any(counts < 1):
            raise ValidationError("negative sampler needs counts >= 1")
        w = counts ** exponent
        self.probs = w / w.sum()
        self.cum = np.cumsum(self.probs)
        self.cum[-1] = 1.0

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.searchsorted(self.cum, rng.random(n), side="right")


def build_negative_sampler(vocab: Vocabulary, ns_exponent: float) -> NegativeSampler:
    return NegativeSampler(vocab.counts, ns_exponent)


# -- objective --------------------------------------------------------------

def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def loss_and_gradient(batch, U: np.ndarray, V: np.ndarray):
    """Log-likelihood of a batch and its gradient (ascent direction).

    ``batch`` is a sequence of ``(center, context_indices, negative_indices)``.
    Returns ``(value, dU, dV)`` where ``value`` sums ``log σ(U[p]·v̄)`` and
    ``log σ(−U[n]·v̄)`` over the batch; only touched rows of the dense
    gradients are non-zero.
    """
    dU = np.zeros_like(U, dtype=np.float64)
    dV = np.zeros_like(V, dtype=np.float64)
    value = 0.0
    for center, context, negatives in batch:
        context = np.asarray(context, dtype=np.int64)
        if context.size == 0:
            continue
        h = V[context].mean(axis=0)
        gh = np.zeros_like(h)
        for target, label in [(center, 1.0)] + [(n, 0.0) for n in negatives]:
            score = float(U[target] @ h)
            sign = 1.0 if label else -1.0
            value += float(_log_sigmoid(sign * score))
            g = label - float(_sigmoid(score))
            gh += g * U[target]
            dU[target] += g * h
        np.add.at(dV, context, gh / context.size)
    return value, dU, dV


# -- training kernels ---------------------------------------------------------

@numba.njit(cache=True)
def _next_uniform(state):
    # splitmix64; state is a 1-element uint64 array
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _log_sig(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@numba.njit(cache=True)
def _sig(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _cbow_step(U, V, flat, lo, hi, i, negs, n_negs, lr, h, gh):
    """One SGD ascent step for the centre at ``flat[i]``; returns the step's loss."""
    d = U.shape[1]
    cnt = hi - lo - 1
    for k in range(d):
        h[k] = 0.0
        gh[k] = 0.0
    for j in range(lo, hi):
        if j != i:
            row = flat[j]
            for k in range(d):
                h[k] += V[row, k]
    for k in range(d):
        h[k] /= cnt
    loss = 0.0
    p = flat[i]
    for t in range(n_negs + 1):
        if t == 0:
            target = p
            label = 1.0
        else:
            target = negs[t - 1]
            if target == p:
                continue
            label = 0.0
        score = 0.0
        for k in range(d):
            score += U[target, k] * h[k]
        if label > 0:
            loss -= _log_sig(score)
        else:
            loss -= _log_sig(-score)
        g = lr * (label - _sig(score))
        for k in range(d):
            gh[k] += g * U[target, k]
            U[target, k] += g * h[k]
    for j in range(lo, hi):
        if j != i:
            row = flat[j]
            for k in range(d):
                V[row, k] += gh[k] / cnt
    return loss


@numba.njit(cache=True)
def _train_epoch(U, V, flat, offsets, cum, window, n_negs, lr0, min_lr, done, total, state):
    d = U.shape[1]
    h = np.empty(d)
    gh = np.empty(d)
    negs = np.empty(n_negs, dtype=np.int64)
    n = cum.shape[0]
    loss = 0.0
    steps = 0
    for s in range(offsets.shape[0] - 1):
        a = offsets[s]
        b = offsets[s + 1]
        for i in range(a, b):
            lo = max(a, i - window)
            hi = min(b, i + window + 1)
            if hi - lo - 1 <= 0:
                continue
            lr = lr0 * (1.0 - (done + steps) / total)
            if lr < min_lr:
                lr = min_lr
            for t in range(n_negs):
                idx = np.searchsorted(cum, _next_uniform(state), side="right")
                negs[t] = min(idx, n - 1)
            loss += _cbow_step(U, V, flat, lo, hi, i, negs, n_negs, lr, h, gh)
            steps += 1
    return loss, steps


@numba.njit(parallel=True, cache=True)
def _train_epoch_parallel(U, V, flat, offsets, cum, window, n_negs, lr0, min_lr, done, total, seeds):
    # lock-free (hogwild) updates: rows may be written concurrently
    n_chunks = seeds.shape[0]
    n_sess = offsets.shape[0] - 1
    losses = np.zeros(n_chunks)
    counts = np.zeros(n_chunks, dtype=np.int64)
    for c in numba.prange(n_chunks):
        state = np.empty(1, dtype=np.uint64)
        state[0] = seeds[c]
        s0 = c * n_sess // n_chunks
        s1 = (c + 1) * n_sess // n_chunks
        sub = offsets[s0:s1 + 1]
        # each chunk sees 1/n_chunks of the positions, so scale the decay schedule
        loss, steps = _train_epoch(U, V, flat, sub, cum, window, n_negs, lr0, min_lr,
                                   done / n_chunks, total / n_chunks, state)
        losses[c] = loss
        counts[c] = steps
    return losses.sum(), counts.sum()


def _flatten(sessions: Iterable[Session], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    flat: list[int] = []
    offsets = [0]
    for s in sessions:
        ids = vocab.encode(s.events)
        if len(ids) < 2:
            continue
        flat.extend(ids)
        offsets.append(len(flat))
    return np.asarray(flat, dtype=np.int64), np.asarray(offsets, dtype=np.int64)


def initial_vectors(n: int, dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    U = (rng.random((n, dim)) - 0.5) / dim
    return U, np.zeros((n, dim))


def train(sessions: Sequence[Session], config: TrainConfig, vocab: Vocabulary | None = None) -> EmbeddingTable:
    """Train a table on ``sessions``; the vocabulary is built with ``config.min_count`` unless given."""
    if vocab is None:
        vocab = build_vocab(sessions, config.min_count)
    flat, offsets = _flatten(sessions, vocab)
    U, V = initial_vectors(len(vocab), config.dim, config.seed)
    sampler = build_negative_sampler(vocab, config.ns_exponent)
    positions = max(1, len(flat))
    total = float(positions * max(1, config.epochs))
    state = np.array([(config.seed * 0x2545F4914F6CDD1D + 1) % 2**64], dtype=np.uint64)
    history = []
    done = 0
    for epoch in range(config.epochs):
        if config.workers > 1:
            numba.set_num_threads(min(config.workers, numba.config.NUMBA_NUM_THREADS))
            rng = np.random.default_rng([config.seed, epoch])
            seeds = rng.integers(1, 2**63, size=config.workers, dtype=np.uint64)
            loss, steps = _train_epoch_parallel(U, V, flat, offsets, sampler.cum, config.window, config.negatives,
                                                config.learning_rate, config.min_learning_rate, float(done), total, seeds)
        else:
            loss, steps = _train_epoch(U, V, flat, offsets, sampler.cum, config.window, config.negatives,
                                       config.learning_rate, config.min_learning_rate, float(done), total, state)
        done += steps
        mean = loss / max(1, steps)
        if not math.isfinite(mean) or not np.all(np.isfinite(U)):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch + 1} (learning_rate={config.learning_rate} may be too high)"
            )
        history.append(mean)
    return EmbeddingTable(vocab, U, V, tuple(history))


# -- queries ------------------------------------------------------------------

def _events(session) -> Sequence[str]:
    return session.events if isinstance(session, Session) else session


def session_vector(session, table: EmbeddingTable) -> np.ndarray:
    """Mean centre vector of the session's in-vocabulary events."""
    ids = table.vocab.encode(_events(session))
    if not ids:
        raise EmptyIntentError("session has no in-vocabulary event")
    return table.U[ids].mean(axis=0)


def rank_by_cosine(queries: np.ndarray, unit_rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k row indices by cosine similarity for each query row.

    Ties are broken by ascending row index. Zero queries are the caller's problem.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    sims = q @ unit_rows.T
    k = min(k, unit_rows.shape[0])
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def nearest_neighbors(query: np.ndarray, table: EmbeddingTable, k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if not np.all(np.isfinite(query)):
        raise ValidationError("query vector is not finite")
    if np.linalg.norm(query) == 0:
        raise ValidationError("zero-norm query vector")
    order, sims = rank_by_cosine(query, table.unit, k)
    return [(table.vocab.products[i], float(s)) for i, s in zip(order[0], sims[0])]


# -- files --------------------------------------------------------------------

def write_word2vec(path, products: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(products)} {matrix.shape[1]}\n")
        for p, row in zip(products, matrix):
            fh.write(p + " " + " ".join(repr(float(x)) for x in row) + "\n")


def read_word2vec(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValidationError(f"{path}: header must be 'N d'")
        n, d = int(header[0]), int(header[1])
        products, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) != d + 1:
                raise ValidationError(f"{path}: row for {parts[0]!r} has {len(parts) - 1} values, expected {d}")
            products.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if len(products) != n:
        raise ValidationError(f"{path}: header says {n} rows, found {len(products)}")
    return products, np.array(rows, dtype=np.float64).reshape(n, d)


def save_table(path, table: EmbeddingTable) -> None:
    """Centre vectors go to ``path`` (word2vec text); context vectors and counts to sidecars."""
    path = str(path)
    write_word2vec(path, table.vocab.products, table.U)
    write_word2vec(path + ".context", table.vocab.products, table.V)
    with open(path + ".vocab", "w", encoding="utf-8", newline="\n") as fh:
        for p, c in zip(table.vocab.products, table.vocab.counts):
            fh.write(f"{p}\t{int(c)}\n")


def load_table(path) -> EmbeddingTable:
    path = str(path)
    products, U = read_word2vec(path)
    counts = {}
    try:
        with open(path + ".vocab", encoding="utf-8") as fh:
            for line in fh:
                p, c = line.rstrip("\n").split("\t")
                counts[p] = int(c)
    except FileNotFoundError:
        # a bare word2vec file: keep file order by giving descending pseudo-counts
        counts = {p: len(products) - i for i, p in enumerate(products)}
    vocab = Vocabulary(counts)
    pos = {p: i for i, p in enumerate(products)}
    order = [pos[p] for p in vocab.products] if list(vocab.products) != products else None
    try:
        _, V = read_word2vec(path + ".context")
    except FileNotFoundError:
        V = np.zeros_like(U)
    if order is not None:
        U, V = U[order], V[order]
    return EmbeddingTable(vocab, U, V)
