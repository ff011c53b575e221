"""Within-shop next-event prediction, cross-shop benchmarks and embedding probes."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .align import AlignmentMap
from .corpus import Session, Vocabulary, product_counts
from .embed import EmbeddingTable, TrainConfig, rank_by_cosine, session_vector, train
from .errors import EmptyIntentError, ShopAlignError, ValidationError
from .metrics import RankedPrediction, any_item_ndcg_at_k, hit_at_k, ndcg_at_k, reciprocal_rank
from .numerics import fit_pca

TASKS = ("NEP", "FIP", "AIP", "typeahead")

# hyperparameter values tried for the within-shop grid
TABLE3_GRID = {
    "min_count": [2, 3, 5, 10, 15, 30],
    "window": [2, 3, 5, 10, 15],
    "epochs": [5, 10, 20, 30, 50],
    "ns_exponent": [-1.0, -0.5, 0.0, 0.75, 1.0],
}


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    ndcg: float
    hit: int
    rr: float
    rank: int | None = None               # first relevant position within k; None on a miss
    predicted: str | None = None          # top-1 candidate
    target: str | None = None             # first ground-truth product
    error_distance: float | None = None   # cosine distance predicted -> target, misses only


@dataclass
class EvalReport:
    task: str
    method: str
    k: int
    records: list[SessionRecord] = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}")

    def _mean(self, name):
        if not self.records:
            return float("nan")
        return float(np.mean([getattr(r, name) for r in self.records]))

    @property
    def ndcg(self) -> float:
        return self._mean("ndcg")

    @property
    def hit(self) -> float:
        return self._mean("hit")

    @property
    def mrr(self) -> float:
        return self._mean("rr")

    def aggregates(self) -> dict:
        return {"task": self.task, "method": self.method, "k": self.k, "ndcg": self.ndcg, "hit": self.hit,
                "mrr": self.mrr, "count": len(self.records), "skipped": self.skipped}


def write_report(path, reports: Iterable[EvalReport]) -> None:
    """JSON lines: an aggregate line per report followed by its per-session records."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rep in reports:
            fh.write(json.dumps({"aggregate": rep.aggregates()}, sort_keys=True) + "\n")
            for r in rep.records:
                fh.write(json.dumps({"record": asdict(r)}, sort_keys=True) + "\n")


def read_report(path) -> list[EvalReport]:
    reports: list[EvalReport] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "aggregate" in obj:
                a = obj["aggregate"]
                reports.append(EvalReport(a["task"], a["method"], a["k"], [], a.get("skipped", 0)))
            elif "record" in obj and reports:
                reports[-1].records.append(SessionRecord(**obj["record"]))
            else:
                raise ValidationError(f"{path}:{lineno}: unexpected line")
    return reports


def _cosine_distance(table: EmbeddingTable, a: str, b: str) -> float | None:
    ia, ib = table.vocab.index.get(a), table.vocab.index.get(b)
    if ia is None or ib is None:
        return None
    return float(1.0 - table.unit[ia] @ table.unit[ib])


def _record(sid, candidates, relevant, first, k, table, any_item=False) -> SessionRecord:
    pred = RankedPrediction(candidates, relevant)
    rank = pred.first_relevant_rank(k)
    top = candidates[0] if candidates else None
    dist = None
    if rank != 1 and top is not None and table is not None:
        dist = _cosine_distance(table, top, first)
    score = any_item_ndcg_at_k(pred, k) if any_item else ndcg_at_k(pred, k)
    return SessionRecord(sid, score, hit_at_k(pred, k), reciprocal_rank(pred, k), rank, top, first, dist)


# -- within shop -----------------------------------------------------------------

def nep_within_shop(sessions: Sequence[Session], table: EmbeddingTable, k: int = 10,
                    exclude_seen: bool = False, method: str = "kNN") -> EvalReport:
    """Predict each session's last event from the mean vector of the preceding ones.

    Sessions shorter than 2 are ignored; sessions whose prefix has no
    in-vocabulary product are skipped and counted.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    report = EvalReport("NEP", method, k)
    keep, intents = [], []
    for s in sessions:
        if len(s.events) < 2:
            continue
        try:
            intents.append(session_vector(s.events[:-1], table))
        except EmptyIntentError:
            report.skipped += 1
            continue
        keep.append(s)
    if not keep:
        return report
    extra = max((len(s.events) for s in keep), default=0) if exclude_seen else 0
    order, _ = rank_by_cosine(np.array(intents), table.unit, k + extra)
    products = table.vocab.products
    for s, row in zip(keep, order):
        cands = [products[i] for i in row]
        if exclude_seen:
            seen = set(s.events[:-1])
            cands = [c for c in cands if c not in seen]
        report.records.append(_record(s.session_id, cands[:k], {s.events[-1]}, s.events[-1], k, table))
    return report


def split_sessions(sessions: Sequence[Session], fractions=(0.8, 0.1, 0.1)) -> tuple[list[Session], ...]:
    """Train / validation / test split by a stable hash of the session id."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValidationError("split fractions must be non-negative and sum to 1")
    bounds = np.cumsum(fractions)
    parts: tuple[list[Session], ...] = tuple([] for _ in fractions)
    for s in sessions:
        h = int.from_bytes(hashlib.sha256(s.session_id.encode("utf-8")).digest()[:8], "big") / 2.0 ** 64
        parts[min(int(np.searchsorted(bounds, h, side="right")), len(parts) - 1)].append(s)
    return parts


def expand_grid(grid: Mapping[str, Sequence], base: TrainConfig = TrainConfig()) -> list[TrainConfig]:
    keys = sorted(grid)
    return [base.replace(**dict(zip(keys, values))) for values in itertools.product(*(grid[k] for k in keys))]


@dataclass(frozen=True)
class GridResult:
    config: TrainConfig
    ndcg: float
    hit: float
    table: EmbeddingTable | None = field(default=None, repr=False, compare=False)


def grid_search(train_sessions: Sequence[Session], heldout: Sequence[Session], grid, base: TrainConfig = TrainConfig(),
                k: int = 10, sample: int | None = None, seed: int = 0, keep_tables: bool = False) -> list[GridResult]:
    """Train one table per configuration and rank configurations by held-out NEP NDCG@k.

    ``grid`` is either a mapping of parameter lists or a list of configs.
    ``sample`` evaluates a seeded random subset of the configurations.
    """
    configs = expand_grid(grid, base) if isinstance(grid, Mapping) else list(grid)
    if not configs:
        raise ValidationError("empty grid")
    if sample is not None and sample < len(configs):
        pick = np.sort(np.random.default_rng(seed).choice(len(configs), size=sample, replace=False))
        configs = [configs[i] for i in pick]
    results = []
    for cfg in configs:
        try:
            table = train(train_sessions, cfg)
        except ShopAlignError as exc:
            raise type(exc)(f"{exc} [config: {cfg.as_dict()}]") from exc
        rep = nep_within_shop(heldout, table, k)
        results.append(GridResult(cfg, rep.ndcg, rep.hit, table if keep_tables else None))
    # stable sort keeps grid order among equal scores
    return sorted(results, key=lambda r: -np.nan_to_num(r.ndcg, nan=-1.0))


# -- cross shop ------------------------------------------------------------------

def popularity_baseline(target_sessions: Sequence[Session]) -> list[str]:
    """Target products by training-corpus frequency, descending; ties by product id."""
    counts = product_counts(target_sessions)
    if not counts:
        raise ValidationError("popularity baseline needs a non-empty target corpus")
    return list(Vocabulary(dict(counts)).products)


class MapPredictor:
    """Mean source vector, mapped into the target space, then cosine kNN."""

    supervision = "unsupervised"

    def __init__(self, name: str, mapping: AlignmentMap, source: EmbeddingTable, target: EmbeddingTable,
                 supervision: str | None = None):
        self.name, self.mapping, self.source, self.target = name, mapping, source, target
        if supervision:
            self.supervision = supervision

    def intent(self, source_events) -> np.ndarray:
        return self.mapping.apply(session_vector(source_events, self.source))

    def rank(self, source_events, k: int) -> tuple[list[str], list[str]]:
        order, _ = rank_by_cosine(self.intent(source_events), self.target.unit, k)
        cands = [self.target.vocab.products[i] for i in order[0]]
        return cands, cands


class PopularityPredictor:
    supervision = "unsupervised"

    def __init__(self, ranking: Sequence[str], name: str = "PM"):
        self.name, self.ranking = name, list(ranking)

    def rank(self, source_events, k: int) -> tuple[list[str], list[str]]:
        return self.ranking[:k], self.ranking[:k]


class TranslationPredictor:
    supervision = "supervised"

    def __init__(self, model, name: str = "TM", max_steps: int = 1):
        self.name, self.model, self.max_steps = name, model, max_steps

    def rank(self, source_events, k: int) -> tuple[list[str], list[str]]:
        from .translation import tm_predict

        if not self.model.encode_ids(source_events):
            raise EmptyIntentError("source session has no in-vocabulary event")
        return tm_predict(self.model, source_events, k, self.max_steps)


def cross_shop_eval(cross_sessions, predictor, k: int = 10,
                    target_table: EmbeddingTable | None = None) -> tuple[EvalReport, EvalReport]:
    """First-item (FIP) and any-item (AIP) reports for one predictor.

    FIP scores NDCG@k against the first target product; AIP credits the
    best-placed product of the whole target session.
    """
    fip = EvalReport("FIP", predictor.name, k)
    aip = EvalReport("AIP", predictor.name, k)
    for item in cross_sessions:
        src, tgt = (item.source, item.target) if hasattr(item, "source") else item
        if not src.events or not tgt.events:
            raise ValidationError(f"cross session {src.session_id} needs events on both sides")
        try:
            first_list, any_list = predictor.rank(src.events, k)
        except EmptyIntentError:
            fip.skipped += 1
            aip.skipped += 1
            continue
        first = tgt.events[0]
        fip.records.append(_record(src.session_id, first_list, {first}, first, k, target_table))
        aip.records.append(_record(src.session_id, any_list, set(tgt.events), first, k, target_table, any_item=True))
    return fip, aip


# -- probes ------------------------------------------------------------------------

@dataclass
class ActivityProbe:
    """Two ReLU hidden layers, softmax output, dropout on hidden activations.

    Inputs are length-normalised rows, standardised with training statistics.
    """

    classes: list[str]
    params: dict[str, np.ndarray] = field(repr=False)
    dropout: float = 0.5
    mean: np.ndarray | None = field(default=None, repr=False)
    scale: np.ndarray | None = field(default=None, repr=False)

    def prepare(self, X) -> np.ndarray:
        X = _unit_rows(X)
        return X if self.mean is None else (X - self.mean) / self.scale

    def forward(self, X, rng=None):
        p = self.params
        h1 = np.maximum(X @ p["W1"] + p["b1"], 0.0)
        m1 = None if rng is None else (rng.random(h1.shape) >= self.dropout) / (1.0 - self.dropout)
        a1 = h1 if m1 is None else h1 * m1
        h2 = np.maximum(a1 @ p["W2"] + p["b2"], 0.0)
        m2 = None if rng is None else (rng.random(h2.shape) >= self.dropout) / (1.0 - self.dropout)
        a2 = h2 if m2 is None else h2 * m2
        logits = a2 @ p["W3"] + p["b3"]
        return logits, (X, h1, m1, a1, h2, m2, a2)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.forward(self.prepare(X))[0]
        e = np.exp(logits - logits.max(1, keepdims=True))
        return e / e.sum(1, keepdims=True)

    def predict(self, X) -> list[str]:
        return [self.classes[i] for i in np.argmax(self.predict_proba(X), axis=1)]


def _unit_rows(X):
    X = np.asarray(X, dtype=np.float64)
    return X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)


def fit_probe(X, labels: Sequence[str], seed: int = 0, hidden: int = 64, dropout: float = 0.5,
              lr: float = 0.05, epochs: int = 50, batch_size: int = 16) -> ActivityProbe:
    """Plain minibatch SGD on softmax cross-entropy."""
    X = _unit_rows(X)
    mean, scale = X.mean(0), X.std(0) + 1e-8
    X = (X - mean) / scale
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValidationError("the probe needs at least two classes")
    y = np.array([classes.index(c) for c in labels])
    counts = np.bincount(y, minlength=len(classes))
    if counts.min() < 2:
        raise ValidationError(f"class {classes[int(np.argmin(counts))]!r} has fewer than 2 examples")
    rng = np.random.default_rng(seed)
    d = X.shape[1]

    def he(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)

    params = {"W1": he(d, hidden), "b1": np.zeros(hidden), "W2": he(hidden, hidden), "b2": np.zeros(hidden),
              "W3": he(hidden, len(classes)) * 0.1, "b3": np.zeros(len(classes))}
    probe = ActivityProbe(classes, params, dropout, mean, scale)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            logits, (x, h1, m1, a1, h2, m2, a2) = probe.forward(X[idx], rng)
            p = np.exp(logits - logits.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            p[np.arange(len(idx)), y[idx]] -= 1.0
            dlog = p / len(idx)
            g = {"W3": a2.T @ dlog, "b3": dlog.sum(0)}
            da2 = dlog @ params["W3"].T
            dh2 = da2 * m2 * (h2 > 0)
            g["W2"], g["b2"] = a1.T @ dh2, dh2.sum(0)
            da1 = dh2 @ params["W2"].T
            dh1 = da1 * m1 * (h1 > 0)
            g["W1"], g["b1"] = x.T @ dh1, dh1.sum(0)
            for key in params:
                params[key] -= lr * g[key]
    return probe


def probe_accuracy(probe: ActivityProbe, X, labels: Sequence[str]) -> float:
    pred = probe.predict(X)
    return float(np.mean([a == b for a, b in zip(pred, labels)]))


def probe_train_eval(table: EmbeddingTable, activity: Mapping[str, str], test_fraction: float = 0.3,
                     seed: int = 0, **probe_kw) -> float:
    """Held-out accuracy of an activity probe on one shop's centre vectors (stratified split)."""
    labelled = [p for p in table.vocab.products if p in activity]
    rng = np.random.default_rng(seed)
    train_ids, test_ids = [], []
    for act in sorted({activity[p] for p in labelled}):
        members = [p for p in labelled if activity[p] == act]
        members = [members[i] for i in rng.permutation(len(members))]
        n_test = int(round(test_fraction * len(members)))
        if len(members) - n_test < 2:
            raise ValidationError(f"activity {act!r} has too few products to split")
        test_ids += members[:n_test]
        train_ids += members[n_test:]
    rows = lambda ids: table.U[[table.vocab.index[p] for p in ids]]
    probe = fit_probe(rows(train_ids), [activity[p] for p in train_ids], seed=seed, **probe_kw)
    return probe_accuracy(probe, rows(test_ids), [activity[p] for p in test_ids])


def aligned_rows(table: EmbeddingTable, mapping: AlignmentMap | None = None) -> np.ndarray:
    """Centre vectors in the shared space: mapped through ``mapping`` when given, otherwise as they are."""
    if mapping is None:
        return table.U.copy()
    X = table.unit if mapping.bias is None else table.U
    return mapping.apply(X)


def probe_transfer(source: EmbeddingTable, target: EmbeddingTable, mapping: AlignmentMap,
                   activity_source: Mapping[str, str], activity_target: Mapping[str, str],
                   seed: int = 0, **probe_kw) -> float:
    """Train the probe on aligned Shop A vectors and report its accuracy on Shop B vectors."""
    xa = aligned_rows(source, mapping)
    ia = [i for i, p in enumerate(source.vocab.products) if p in activity_source]
    ib = [i for i, p in enumerate(target.vocab.products) if p in activity_target]
    probe = fit_probe(xa[ia], [activity_source[source.vocab.products[i]] for i in ia], seed=seed, **probe_kw)
    return probe_accuracy(probe, target.U[ib], [activity_target[target.vocab.products[i]] for i in ib])


def projection_2d(table: EmbeddingTable) -> tuple[list[str], np.ndarray]:
    """Top-two principal-component coordinates of every product."""
    if len(table) < 3:
        raise ValidationError("projection needs at least 3 products")
    pca = fit_pca(table.U, 2)
    return list(table.vocab.products), pca.transform(table.U)


def write_projection(path, products: Sequence[str], coords: np.ndarray, labels: Mapping[str, str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("product\tx\ty\tactivity\n")
        for p, (x, y) in zip(products, coords):
            fh.write(f"{p}\t{x!r}\t{y!r}\t{(labels or {}).get(p, '')}\n")


@dataclass(frozen=True)
class ErrorAnalysis:
    misses: tuple[tuple[str, float, str, str], ...]   # (session id, distance, predicted, target), ascending
    median: float
    below: int
    above: int
    match_rate: float | None = None
    match_rate_below: float | None = None
    match_rate_above: float | None = None


def error_analysis(report: EvalReport, table: EmbeddingTable | None = None,
                   activity: Mapping[str, str] | None = None) -> ErrorAnalysis:
    """Misses ordered by cosine distance between top prediction and true target.

    Misses at or below the median distance form the lower half. With activity
    labels, reports how often the predicted and true products share an activity.
    """
    rows = []
    for r in report.records:
        if r.rank == 1 or r.predicted is None or r.target is None:
            continue
        dist = r.error_distance
        if dist is None and table is not None:
            dist = _cosine_distance(table, r.predicted, r.target)
        if dist is not None:
            rows.append((r.session_id, float(dist), r.predicted, r.target))
    rows.sort(key=lambda x: (x[1], x[0]))
    if not rows:
        return ErrorAnalysis((), float("nan"), 0, 0)
    median = float(np.median([d for _, d, _, _ in rows]))
    below = [x for x in rows if x[1] <= median]
    above = [x for x in rows if x[1] > median]

    def rate(group):
        labelled = [(p, t) for _, _, p, t in group if p in activity and t in activity]
        return float(np.mean([activity[p] == activity[t] for p, t in labelled])) if labelled else None

    if activity is None:
        return ErrorAnalysis(tuple(rows), median, len(below), len(above))
    return ErrorAnalysis(tuple(rows), median, len(below), len(above), rate(rows), rate(below), rate(above))
