"""Intent-conditioned character language model for query completion.

A GRU reads the query one character at a time; its initial hidden state is
``tanh(intent @ Wi + bi)`` where ``intent`` is a unit-length session vector
in the target shop's space (zero when no intent is known). Completions are
ranked by their total log-probability, terminator included.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Session
from .errors import EmptyIntentError, TrainingDivergedError, ValidationError
from .evaluate import EvalReport, SessionRecord
from .metrics import RankedPrediction, hit_at_k, reciprocal_rank
from .nn import Adam, gru_backward, gru_forward, gru_init, log_softmax, pad, softmax_xent

# Per-activity query templates. First letters overlap across activities on
# purpose (basketball / baseball / babolat, soccer / swimming / spikes) so a
# one-character prefix alone cannot tell activities apart.
QUERY_TEMPLATES = {
    "soccer": ["soccer cleats", "soccer ball", "shin guards", "goalkeeper gloves", "soccer jersey", "stud wrench"],
    "basketball": ["basketball shoes", "basketball jersey", "backboard", "ball pump", "hoop net", "headband"],
    "tennis": ["babolat racket", "tennis balls", "tennis skirt", "string dampener", "overgrip", "wristband"],
    "running": ["running shoes", "race belt", "running socks", "sports watch", "reflective vest", "hydration pack"],
    "swimming": ["swim goggles", "swim cap", "swimsuit", "kickboard", "pull buoy", "ear plugs"],
    "cycling": ["cycling helmet", "bike lights", "cycling shorts", "chain lube", "saddle bag", "bottle cage"],
    "golf": ["golf balls", "golf glove", "golf bag", "tees", "rangefinder", "putter"],
    "hiking": ["hiking boots", "trekking poles", "headlamp", "backpack", "rain jacket", "water filter"],
    "yoga": ["yoga mat", "yoga blocks", "yoga strap", "leggings", "meditation cushion", "bolster"],
    "baseball": ["baseball bat", "baseball glove", "batting helmet", "baseball cap", "batting gloves", "cleats"],
    "skiing": ["ski goggles", "ski poles", "ski gloves", "base layer", "ski wax", "helmet"],
    "boxing": ["boxing gloves", "hand wraps", "punching bag", "mouth guard", "jump rope", "boxing shoes"],
    "climbing": ["climbing shoes", "chalk bag", "harness", "carabiner", "belay device", "crash pad"],
    "surfing": ["surfboard", "wetsuit", "surf wax", "leash", "rash guard", "fins"],
    "volleyball": ["volleyball", "knee pads", "volleyball shoes", "ankle brace", "net", "spandex shorts"],
    "badminton": ["badminton racket", "shuttlecocks", "badminton shoes", "grip tape", "string", "bag"],
}
TEMPLATE_DECAY = 1.0   # within-activity query popularity ∝ 1 / rank**TEMPLATE_DECAY


@dataclass(frozen=True)
class QueryRecord:
    query: str
    session: Session
    shop_id: str


class QueryCorpus:
    """Queries with the session that produced them and the character inventory."""

    def __init__(self, records: Sequence[QueryRecord], inventory: Sequence[str] | None = None):
        if not records:
            raise ValidationError("query corpus is empty")
        for r in records:
            if not r.query:
                raise ValidationError(f"empty query for session {r.session.session_id}")
        chars = sorted({c for r in records for c in r.query})
        self.inventory = tuple(inventory) if inventory is not None else tuple(chars)
        unknown = set(chars) - set(self.inventory)
        if unknown:
            raise ValidationError(f"characters outside the inventory: {sorted(unknown)}")
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def query_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.query] = out.get(r.query, 0) + 1
        return out


def write_queries(path, corpus: QueryCorpus) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in corpus:
            fh.write(f"{r.query}\t{r.session.session_id}\t{r.shop_id}\n")


def read_queries(path, sessions: Mapping[str, Session], inventory: Sequence[str] | None = None) -> QueryCorpus:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: expected query, session_id, shop_id")
            if parts[1] not in sessions:
                raise ValidationError(f"{path}:{lineno}: unknown session {parts[1]!r}")
            records.append(QueryRecord(parts[0], sessions[parts[1]], parts[2]))
    return QueryCorpus(records, inventory)


def template_queries(activity: str) -> list[str]:
    if activity not in QUERY_TEMPLATES:
        raise ValidationError(f"no query templates for activity {activity!r}")
    return QUERY_TEMPLATES[activity]


def sample_query(activity: str, rng: np.random.Generator) -> str:
    options = template_queries(activity)
    w = 1.0 / np.arange(1, len(options) + 1) ** TEMPLATE_DECAY
    return options[int(rng.choice(len(options), p=w / w.sum()))]


def generate_queries(sessions: Sequence[Session], activity: Mapping[str, str], seed: int = 0,
                     anchor: str = "last") -> QueryCorpus:
    """One synthetic query per session, keyed to the activity of its last (or first) product."""
    if anchor not in ("first", "last"):
        raise ValidationError("anchor must be 'first' or 'last'")
    rng = np.random.default_rng(seed)
    records = []
    for s in sessions:
        product = s.events[-1] if anchor == "last" else s.events[0]
        records.append(QueryRecord(sample_query(activity[product], rng), s, s.shop_id))
    return QueryCorpus(records)


# -- model ------------------------------------------------------------------------

@dataclass(frozen=True)
class LMConfig:
    hidden: int = 64
    char_dim: int = 16
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 5e-3
    clip: float = 5.0
    intent_dropout: float = 0.2   # share of training queries seen with the zero intent
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden, self.char_dim, self.batch_size) < 1 or self.epochs < 0:
            raise ValidationError("hidden, char_dim and batch_size must be >= 1; epochs >= 0")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.intent_dropout < 1.0:
            raise ValidationError("intent_dropout must be in [0, 1)")

    def replace(self, **changes) -> "LMConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class CondLM:
    inventory: tuple[str, ...]
    params: dict[str, np.ndarray] = field(repr=False)
    config: LMConfig = LMConfig()
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.char_index = {c: i for i, c in enumerate(self.inventory)}

    @property
    def terminator(self) -> int:
        return len(self.inventory)

    @property
    def intent_dim(self) -> int:
        return self.params["Wi"].shape[0]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.char_index[c] for c in text]
        except KeyError as exc:
            raise ValidationError(f"character {exc.args[0]!r} is not in the inventory") from None


def init_lm(inventory: Sequence[str], intent_dim: int, config: LMConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n_out = len(inventory) + 1          # characters plus terminator
    params = {
        # the terminator row doubles as the start-of-query input
        "C": 0.1 * rng.standard_normal((n_out, config.char_dim)),
        "Wi": rng.standard_normal((intent_dim, config.hidden)) / np.sqrt(intent_dim),
        "bi": np.zeros(config.hidden),
        "Wo": 0.01 * rng.standard_normal((config.hidden, n_out)),
        "bo": np.zeros(n_out),
    }
    params.update(gru_init(config.char_dim, config.hidden, rng))
    return params


def unit_intent(vector, dim: int) -> np.ndarray:
    """Unit-length intent; ``None`` and the zero vector both mean 'no intent'."""
    if vector is None:
        return np.zeros(dim)
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if v.shape != (dim,):
        raise ValidationError(f"intent must have dimension {dim}, got {v.shape[0]}")
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _batch(texts_ids, terminator):
    y, mask = pad([ids + [terminator] for ids in texts_ids])
    x = np.vstack([np.full((1, y.shape[1]), terminator), y[:-1]])
    return x, y, mask


def lm_loss_and_grads(params, intents, x, y, mask):
    """Teacher-forced next-character cross-entropy (mean per character) and gradients."""
    pre = intents @ params["Wi"] + params["bi"]
    h0 = np.tanh(pre)
    H, cache = gru_forward(params["C"][x], h0, mask, params)
    logits = H @ params["Wo"] + params["bo"]
    loss, dlogits = softmax_xent(logits, y, mask)
    hidden = H.shape[-1]
    grads = {"Wo": H.reshape(-1, hidden).T @ dlogits.reshape(-1, dlogits.shape[-1]), "bo": dlogits.sum(axis=(0, 1))}
    g, dX, dh0 = gru_backward(dlogits @ params["Wo"].T, None, cache, params)
    grads.update(g)
    dpre = dh0 * (1.0 - h0 * h0)
    grads["Wi"], grads["bi"] = intents.T @ dpre, dpre.sum(0)
    dC = np.zeros_like(params["C"])
    np.add.at(dC, x.ravel(), dX.reshape(-1, dX.shape[-1]))
    grads["C"] = dC
    return loss, grads


def lm_train(corpus: QueryCorpus, intent_fn: Callable[[Session], np.ndarray | None], intent_dim: int,
             config: LMConfig = LMConfig()) -> CondLM:
    """Fit on (intent, query) pairs; ``intent_fn`` maps a record's session to a target-space vector.

    Records whose session yields no intent are trained with the zero intent, as
    is a random ``config.intent_dropout`` share of the others. The model then also
    learns the unconditioned query distribution, which it falls back on when a
    transferred intent is weak, and scoring with no intent is in-distribution.
    """
    rng = np.random.default_rng(config.seed)
    params = init_lm(corpus.inventory, intent_dim, config, rng)
    model = CondLM(corpus.inventory, params, config)
    texts = [model.encode(r.query) for r in corpus]
    intents = []
    for r in corpus:
        try:
            intents.append(unit_intent(intent_fn(r.session), intent_dim))
        except EmptyIntentError:
            intents.append(np.zeros(intent_dim))
    intents = np.array(intents)
    dropped = np.random.default_rng([config.seed, 1]).random(len(intents)) < config.intent_dropout
    intents[dropped] = 0.0
    opt = Adam(params, lr=config.learning_rate, clip=config.clip)
    for _ in range(config.epochs):
        order = rng.permutation(len(texts))
        total, batches = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            x, y, mask = _batch([texts[i] for i in idx], model.terminator)
            loss, grads = lm_loss_and_grads(params, intents[idx], x, y, mask)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"language-model loss became {loss}")
            opt.step(params, grads)
            total += loss
            batches += 1
        model.loss_history.append(total / batches)
    return model


def lm_cross_entropy(model: CondLM, queries: Sequence[str], intents=None) -> float:
    """Mean per-character cross-entropy (terminator included)."""
    ids = [model.encode(q) for q in queries]
    x, y, mask = _batch(ids, model.terminator)
    I = np.zeros((len(ids), model.intent_dim)) if intents is None else np.array(
        [unit_intent(v, model.intent_dim) for v in intents])
    return lm_loss_and_grads(model.params, I, x, y, mask)[0]


def step_distributions(model: CondLM, intent, text: str) -> np.ndarray:
    """Next-character distributions after each prefix of ``text`` (``len(text) + 1`` rows)."""
    x = np.array([[model.terminator] + model.encode(text)]).T
    p = model.params
    h0 = np.tanh(unit_intent(intent, model.intent_dim) @ p["Wi"] + p["bi"])[None, :]
    H, _ = gru_forward(p["C"][x], h0, np.ones(x.shape), p)
    return np.exp(log_softmax(H[:, 0] @ p["Wo"] + p["bo"]))


def sequence_log_probs(model: CondLM, intent, candidates: Sequence[str]) -> np.ndarray:
    ids = [model.encode(c) for c in candidates]
    x, y, mask = _batch(ids, model.terminator)
    p = model.params
    h0 = np.tanh(unit_intent(intent, model.intent_dim) @ p["Wi"] + p["bi"])
    H, _ = gru_forward(p["C"][x], np.repeat(h0[None, :], len(ids), axis=0), mask, p)
    logp = log_softmax(H @ p["Wo"] + p["bo"])
    picked = np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    return (picked * mask).sum(axis=0)


def rank_by_score(candidates: Sequence[str], scores: Sequence[float]) -> list[tuple[str, float]]:
    """Descending score; ties by ascending candidate string."""
    return sorted(zip(candidates, (float(s) for s in scores)), key=lambda cs: (-cs[1], cs[0]))


def score_completions(model: CondLM, intent, prefix: str, candidates: Sequence[str]) -> list[tuple[str, float]]:
    """Candidates ranked by total log-probability given the intent (or none)."""
    if not candidates:
        raise ValidationError("no candidates to score")
    for c in candidates:
        if not c.startswith(prefix):
            raise ValidationError(f"candidate {c!r} does not extend prefix {prefix!r}")
    return rank_by_score(candidates, sequence_log_probs(model, intent, candidates))


# -- evaluation -------------------------------------------------------------------

@dataclass(frozen=True)
class TypeaheadItem:
    item_id: str
    query: str
    source: Session


def candidate_pool(query_counts: Mapping[str, int], prefix: str, truth: str, size: int = 35) -> list[str]:
    """The ``size`` most frequent known queries extending ``prefix``, plus the ground truth."""
    known = sorted((q for q in query_counts if q.startswith(prefix)), key=lambda q: (-query_counts[q], q))
    pool = known[:size]
    if truth not in pool:
        pool.append(truth)
    return pool


def popularity_scorer(query_counts: Mapping[str, int]):
    def score(_source, prefix, candidates):
        return rank_by_score(candidates, [query_counts.get(c, 0) for c in candidates])
    return score


def lm_scorer(model: CondLM, intent_fn: Callable | None):
    """Scorer over a source session; ``intent_fn`` None gives the unconditioned model."""
    def score(source, prefix, candidates):
        intent = None if intent_fn is None else intent_fn(source)
        return score_completions(model, intent, prefix, candidates)
    return score


def typeahead_eval(scorers: Mapping[str, Callable], items: Sequence[TypeaheadItem], query_counts: Mapping[str, int],
                   k: int = 5, seed_lengths: Sequence[int] = (0, 1), pool_size: int = 35) -> dict[tuple[str, int], EvalReport]:
    """MRR@k of the ground-truth query per (scorer, seed length)."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    out = {}
    for name, scorer in scorers.items():
        for sl in seed_lengths:
            rep = EvalReport("typeahead", f"{name}@SL={sl}", k)
            for item in items:
                prefix = item.query[:sl]
                pool = candidate_pool(query_counts, prefix, item.query, pool_size)
                try:
                    ranked = [c for c, _ in scorer(item.source, prefix, pool)]
                except EmptyIntentError:
                    rep.skipped += 1
                    continue
                pred = RankedPrediction(ranked, {item.query})
                rank = pred.first_relevant_rank(k)
                rr = reciprocal_rank(pred, k)
                rep.records.append(SessionRecord(item.item_id, rr, hit_at_k(pred, k), rr, rank, ranked[0], item.query))
            out[(name, sl)] = rep
    return out


def save_lm(path, model: CondLM) -> None:
    np.savez(path, inventory=np.array(list(model.inventory)), history=np.array(model.loss_history, dtype=np.float64),
             config=np.array([repr(sorted(model.config.as_dict().items()))]),
             **{f"p_{k}": v for k, v in model.params.items()})


def load_lm(path) -> CondLM:
    import ast

    with np.load(path, allow_pickle=False) as z:
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p_")}
        cfg = LMConfig(**dict(ast.literal_eval(str(z["config"][0]))))
        return CondLM(tuple(str(c) for c in z["inventory"]), params, cfg, [float(x) for x in z["history"]])
