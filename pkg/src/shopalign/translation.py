"""Sequence-to-sequence translation from Shop A browsing to Shop B browsing (TM).

A GRU encoder reads the source product sequence; its final state starts a GRU
decoder that emits a distribution over the target vocabulary at each step.
Both embedding layers start from the trained product embeddings. The decoder
has no end token: it is always run for a fixed number of steps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .embed import EmbeddingTable
from .errors import TrainingDivergedError, ValidationError
from .nn import Adam, gru_backward, gru_forward, gru_init, log_softmax, pad, softmax_xent


@dataclass(frozen=True)
class TMConfig:
    hidden: int = 64
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 5e-3
    max_source: int = 10
    max_target: int = 5
    clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden", "batch_size", "max_source", "max_target"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.epochs < 0 or not self.learning_rate > 0:
            raise ValidationError("epochs must be >= 0 and learning_rate > 0")

    def replace(self, **changes) -> "TMConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TranslationModel:
    source_products: list[str]
    target_products: list[str]
    params: dict[str, np.ndarray] = field(repr=False)
    config: TMConfig
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.source_index = {p: i for i, p in enumerate(self.source_products)}
        if self.params["Wo"].shape[1] != len(self.target_products):
            raise ValidationError("decoder output size must equal the target vocabulary size")

    @property
    def hidden(self) -> int:
        return self.params["enc_Wh"].shape[0]

    def encode_ids(self, products) -> list[int]:
        return [self.source_index[p] for p in products if p in self.source_index]


def init_params(source: np.ndarray, target: np.ndarray, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = source.shape[1]
    if target.shape[1] != d:
        raise ValidationError("source and target embeddings must share a dimension")
    n_tgt = target.shape[0]
    params = {
        "Es": np.array(source, dtype=np.float64),
        # last row is the start-of-sequence input
        "Et": np.vstack([np.array(target, dtype=np.float64), np.zeros((1, d))]),
        "Wo": 0.01 * rng.standard_normal((hidden, n_tgt)),
        "bo": np.zeros(n_tgt),
    }
    params.update(gru_init(d, hidden, rng, "enc_"))
    params.update(gru_init(d, hidden, rng, "dec_"))
    return params


def _batch(src_ids, tgt_ids, cfg: TMConfig, bos: int):
    s, s_mask = pad([x[-cfg.max_source:] for x in src_ids])
    y, y_mask = pad([x[:cfg.max_target] for x in tgt_ids])
    dec_in = np.vstack([np.full((1, y.shape[1]), bos), y[:-1]])
    return s, s_mask, dec_in, y, y_mask


def loss_and_grads(params, s, s_mask, dec_in, y, y_mask):
    """Teacher-forced cross-entropy (mean over target steps) and its gradients."""
    B = s.shape[1]
    hidden = params["enc_Wh"].shape[0]
    Hs, enc_cache = gru_forward(params["Es"][s], np.zeros((B, hidden)), s_mask, params, "enc_")
    h_enc = Hs[-1]
    Hd, dec_cache = gru_forward(params["Et"][dec_in], h_enc, y_mask, params, "dec_")
    logits = Hd @ params["Wo"] + params["bo"]
    loss, dlogits = softmax_xent(logits, y, y_mask)

    grads = {
        "Wo": Hd.reshape(-1, hidden).T @ dlogits.reshape(-1, dlogits.shape[-1]),
        "bo": dlogits.sum(axis=(0, 1)),
    }
    dHd = dlogits @ params["Wo"].T
    g_dec, dXd, dh_enc = gru_backward(dHd, None, dec_cache, params, "dec_")
    g_enc, dXs, _ = gru_backward(np.zeros_like(Hs), dh_enc, enc_cache, params, "enc_")
    grads.update(g_dec)
    grads.update(g_enc)
    dEt = np.zeros_like(params["Et"])
    np.add.at(dEt, dec_in.ravel(), dXd.reshape(-1, dXd.shape[-1]))
    dEs = np.zeros_like(params["Es"])
    np.add.at(dEs, s.ravel(), dXs.reshape(-1, dXs.shape[-1]))
    grads["Et"], grads["Es"] = dEt, dEs
    return loss, grads


def _pairs(cross_sessions, src: EmbeddingTable, tgt: EmbeddingTable):
    out = []
    for item in cross_sessions:
        s, t = (item.source, item.target) if hasattr(item, "source") else item
        si = src.vocab.encode(getattr(s, "events", s))
        ti = tgt.vocab.encode(getattr(t, "events", t))
        if si and ti:
            out.append((si, ti))
    return out


def tm_train(cross_sessions, src: EmbeddingTable, tgt: EmbeddingTable, config: TMConfig = TMConfig()) -> TranslationModel:
    """Train by teacher-forced cross-entropy with Adam; deterministic for a given seed."""
    pairs = _pairs(cross_sessions, src, tgt)
    if not pairs:
        raise ValidationError("no cross-shop pair has in-vocabulary events on both sides")
    rng = np.random.default_rng(config.seed)
    params = init_params(src.U, tgt.U, config.hidden, rng)
    opt = Adam(params, lr=config.learning_rate, clip=config.clip)
    bos = len(tgt)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        total, batches = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [pairs[i] for i in order[lo:lo + config.batch_size]]
            batch = _batch([p[0] for p in chunk], [p[1] for p in chunk], config, bos)
            loss, grads = loss_and_grads(params, *batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"translation loss became {loss}")
            opt.step(params, grads)
            total += loss
            batches += 1
        history.append(total / batches)
    return TranslationModel(list(src.vocab.products), list(tgt.vocab.products), params, config, history)


def mean_cross_entropy(model: TranslationModel, cross_sessions, src: EmbeddingTable, tgt: EmbeddingTable) -> float:
    pairs = _pairs(cross_sessions, src, tgt)
    batch = _batch([p[0] for p in pairs], [p[1] for p in pairs], model.config, len(model.target_products))
    return loss_and_grads(model.params, *batch)[0]


def decode(model: TranslationModel, source_products, max_steps: int = 5) -> np.ndarray:
    """Greedy decoding; returns the ``(max_steps, |V_target|)`` per-step distributions."""
    ids = model.encode_ids(source_products)[-model.config.max_source:]
    if not ids:
        return np.full((max_steps, len(model.target_products)), 1.0 / len(model.target_products))
    p = model.params
    s = np.array(ids)[:, None]
    Hs, _ = gru_forward(p["Es"][s], np.zeros((1, model.hidden)), np.ones(s.shape), p, "enc_")
    h = Hs[-1]
    token = len(model.target_products)
    out = []
    for _ in range(max_steps):
        H, _ = gru_forward(p["Et"][[[token]]], h, np.ones((1, 1)), p, "dec_")
        h = H[-1]
        probs = np.exp(log_softmax(h @ p["Wo"] + p["bo"]))[0]
        out.append(probs)
        token = int(np.argmax(probs))
    return np.array(out)


def _top(scores: np.ndarray, products, k: int) -> list[str]:
    order = np.argsort(-scores, kind="stable")[:min(k, len(products))]
    return [products[i] for i in order]


def tm_predict(model: TranslationModel, source_products, top_k: int = 10, max_steps: int = 1) -> tuple[list[str], list[str]]:
    """``(first-item ranking, any-item ranking)``.

    The first ranking is the top-k of the first decoder step; the any-item
    ranking orders products by their highest probability over the first
    ``max_steps`` decoded steps. With one step both rankings come from the same
    distribution; later greedy steps condition on earlier guesses and are
    noisier, so more steps tends to lower any-item scores. Ties go to the lower
    vocabulary index.
    """
    if top_k < 1:
        raise ValidationError(f"top_k must be >= 1, got {top_k}")
    probs = decode(model, getattr(source_products, "events", source_products), max_steps)
    return _top(probs[0], model.target_products, top_k), _top(probs.max(axis=0), model.target_products, top_k)


def greedy_sequence(model: TranslationModel, source_products, steps: int) -> list[str]:
    probs = decode(model, source_products, steps)
    return [model.target_products[int(np.argmax(p))] for p in probs]


def save_model(path, model: TranslationModel) -> None:
    np.savez(path, source=np.array(model.source_products), target=np.array(model.target_products),
             history=np.array(model.loss_history, dtype=np.float64),
             config=np.array([repr(sorted(model.config.as_dict().items()))]),
             **{f"p_{k}": v for k, v in model.params.items()})


def load_model(path) -> TranslationModel:
    import ast

    with np.load(path, allow_pickle=False) as z:
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p_")}
        cfg = TMConfig(**dict(ast.literal_eval(str(z["config"][0]))))
        return TranslationModel([str(x) for x in z["source"]], [str(x) for x in z["target"]], params, cfg,
                                [float(x) for x in z["history"]])
