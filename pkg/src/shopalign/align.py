"""Linear maps between two product embedding spaces.

Maps act on row vectors: ``translate(v) = v @ W + bias`` with ``W`` of shape
``(d_source, d_target)``.

Orthogonal methods (feature-seeded self-learning and the structural
unsupervised variant) work on length-normalised centre vectors; the regression
methods (user pairs, activity centroids) fit raw centre vectors with ridge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Catalog, Session
from .embed import EmbeddingTable
from .errors import ValidationError
from .numerics import fit_pca, kmeans

METHODS = ("IM", "NM", "UM", "AM", "identity", "random")
ORTHO_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class AlignmentMap:
    W: np.ndarray = field(repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)
    method: str = "identity"
    trace: tuple = ()

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        if W.ndim != 2 or not np.all(np.isfinite(W)):
            raise ValidationError("map matrix must be a finite 2-D array")
        W.flags.writeable = False
        object.__setattr__(self, "W", W)
        if self.bias is not None:
            b = np.array(self.bias, dtype=np.float64).reshape(-1)
            if b.shape != (W.shape[1],) or not np.all(np.isfinite(b)):
                raise ValidationError("bias must be a finite vector of length d_target")
            b.flags.writeable = False
            object.__setattr__(self, "bias", b)

    @property
    def d_source(self) -> int:
        return self.W.shape[0]

    @property
    def d_target(self) -> int:
        return self.W.shape[1]

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d_source:
            raise ValidationError(f"expected vectors of dimension {self.d_source}, got {X.shape[-1]}")
        out = X @ self.W
        return out if self.bias is None else out + self.bias

    def is_orthogonal(self, tol: float = ORTHO_TOL) -> bool:
        W = self.W
        return W.shape[0] == W.shape[1] and np.max(np.abs(W.T @ W - np.eye(W.shape[1]))) < tol


def translate_point(mapping: AlignmentMap, vector: np.ndarray) -> np.ndarray:
    return mapping.apply(vector)


def identity_map(d: int) -> AlignmentMap:
    return AlignmentMap(np.eye(d), None, "identity")


def random_map(d: int, seed: int = 0) -> AlignmentMap:
    """A random orthogonal map: the no-information baseline."""
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return AlignmentMap(q * np.sign(np.diag(r)), None, "random")


@dataclass(frozen=True)
class SeedDictionary:
    pairs: tuple[tuple[str, str, float], ...]

    def __init__(self, pairs: Iterable[tuple]):
        norm = []
        for p in pairs:
            src, tgt = p[0], p[1]
            w = float(p[2]) if len(p) > 2 else 1.0
            if not w > 0:
                raise ValidationError(f"pair ({src}, {tgt}) has non-positive weight {w}")
            norm.append((src, tgt, w))
        if not norm:
            raise ValidationError("seed dictionary is empty")
        object.__setattr__(self, "pairs", tuple(norm))

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


# -- file formats -------------------------------------------------------------

def write_map(path, mapping: AlignmentMap) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{mapping.d_source} {mapping.d_target} {mapping.method}\n")
        for row in mapping.W:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        if mapping.bias is not None:
            fh.write(" ".join(repr(float(x)) for x in mapping.bias) + "\n")


def read_map(path) -> AlignmentMap:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty map file")
    head = lines[0].split()
    if len(head) != 3:
        raise ValidationError(f"{path}: header must be 'd_source d_target method'")
    ds, dt, method = int(head[0]), int(head[1]), head[2]
    rows = [[float(x) for x in ln.split()] for ln in lines[1:]]
    if len(rows) not in (ds, ds + 1) or any(len(r) != dt for r in rows):
        raise ValidationError(f"{path}: expected {ds} rows (plus optional bias) of {dt} values")
    W = np.array(rows[:ds])
    bias = np.array(rows[ds]) if len(rows) == ds + 1 else None
    return AlignmentMap(W, bias, method)


def write_seed(path, seed: SeedDictionary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, t, w in seed:
            fh.write(f"{s}\t{t}\t{w!r}\n")


def read_seed(path) -> SeedDictionary:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) not in (2, 3):
                raise ValidationError(f"{path}:{lineno}: expected source, target[, weight]")
            pairs.append((parts[0], parts[1], float(parts[2]) if len(parts) == 3 else 1.0))
    return SeedDictionary(pairs)


# -- orthogonal methods ---------------------------------------------------------

def _orthogonal_solution(X: np.ndarray, Z: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """argmin over orthogonal W of sum_i w_i ||x_i W - z_i||^2."""
    M = X.T @ (Z if w is None else Z * w[:, None])
    if not np.any(np.abs(M) > 1e-300):
        raise ValidationError("degenerate seed: cross-covariance is zero")
    u, _, vt = np.linalg.svd(M)
    return u @ vt


def _seed_indices(seed: SeedDictionary, src: EmbeddingTable, tgt: EmbeddingTable):
    rows = [(src.vocab.index[s], tgt.vocab.index[t], w) for s, t, w in seed
            if s in src.vocab.index and t in tgt.vocab.index]
    if not rows:
        return np.empty(0, int), np.empty(0, int), np.empty(0)
    i, j, w = zip(*rows)
    return np.array(i), np.array(j), np.array(w, dtype=np.float64)


def procrustes_fit(seed: SeedDictionary, src: EmbeddingTable, tgt: EmbeddingTable, method: str = "IM") -> AlignmentMap:
    """Closed-form orthogonal map from the weighted seed pairs (SVD of the cross-covariance)."""
    if src.dim != tgt.dim:
        raise ValidationError(f"dimension mismatch: {src.dim} vs {tgt.dim}")
    i, j, w = _seed_indices(seed, src, tgt)
    if len(i) < 2:
        raise ValidationError(f"need at least 2 in-vocabulary seed pairs, got {len(i)}")
    return AlignmentMap(_orthogonal_solution(src.unit[i], tgt.unit[j], w), None, method)


def _mutual_nn(mapped_unit: np.ndarray, tgt_unit: np.ndarray) -> set[tuple[int, int]]:
    sims = mapped_unit @ tgt_unit.T
    fwd = np.argmax(sims, axis=1)
    bwd = np.argmax(sims, axis=0)
    return {(int(s), int(t)) for s, t in enumerate(fwd) if bwd[t] == s}


def induce_dictionary(W: np.ndarray, src: EmbeddingTable, tgt: EmbeddingTable) -> set[tuple[int, int]]:
    """Mutual nearest neighbours (cosine) between mapped source and target products."""
    mapped = src.unit @ W
    mapped /= np.linalg.norm(mapped, axis=1, keepdims=True)
    return _mutual_nn(mapped, tgt.unit)


def self_learning_align(seed: SeedDictionary, src: EmbeddingTable, tgt: EmbeddingTable,
                        max_iters: int = 50, method: str = "IM") -> AlignmentMap:
    """Alternate Procrustes fits and mutual-NN dictionary induction until the dictionary is stable.

    ``trace`` records the induced dictionary size per iteration; iteration stops
    at a fixed point or after ``max_iters`` rounds. ``max_iters=0`` returns the
    Procrustes fit of the raw seed.
    """
    W = procrustes_fit(seed, src, tgt, method).W
    i, j, _ = _seed_indices(seed, src, tgt)
    previous = set(zip(i.tolist(), j.tolist()))
    trace = []
    for _ in range(max_iters):
        current = induce_dictionary(W, src, tgt)
        if not current:
            raise ValidationError("dictionary induction produced no mutual pairs")
        trace.append(len(current))
        if current == previous:
            break
        s, t = map(np.array, zip(*sorted(current)))
        W = _orthogonal_solution(src.unit[s], tgt.unit[t])
        previous = current
    return AlignmentMap(W, None, method, tuple(trace))


def similarity_signatures(table: EmbeddingTable, length: int = 64) -> np.ndarray:
    """Rotation-invariant product descriptors.

    Each product's cosine similarities to every other in-shop product, sorted
    in descending order and resampled to ``length`` evenly spaced quantiles so
    shops of different sizes are comparable.
    """
    n = len(table)
    if n < 3:
        raise ValidationError("need at least 3 products for similarity signatures")
    sims = table.unit @ table.unit.T
    np.fill_diagonal(sims, -np.inf)
    ranked = -np.sort(-sims, axis=1)[:, :n - 1]
    grid = np.linspace(0, n - 2, length)
    lo = np.floor(grid).astype(int)
    hi = np.minimum(lo + 1, n - 2)
    frac = grid - lo
    return ranked[:, lo] * (1 - frac) + ranked[:, hi] * frac


def structural_seed(src: EmbeddingTable, tgt: EmbeddingTable, length: int = 64) -> SeedDictionary:
    """Weak seed matching products whose similarity signatures are mutual nearest neighbours."""
    a = similarity_signatures(src, length)
    b = similarity_signatures(tgt, length)
    d = (a ** 2).sum(1)[:, None] - 2 * a @ b.T + (b ** 2).sum(1)[None, :]
    fwd = np.argmin(d, axis=1)
    bwd = np.argmin(d, axis=0)
    pairs = [(s, int(t)) for s, t in enumerate(fwd) if bwd[t] == s]
    if len(pairs) < 2:
        pairs = list(enumerate(fwd.tolist()))
    return SeedDictionary((src.vocab.products[s], tgt.vocab.products[t], 1.0) for s, t in pairs)


def nm_align(src: EmbeddingTable, tgt: EmbeddingTable, max_iters: int = 50, signature_length: int = 64) -> AlignmentMap:
    """Fully unsupervised: structural seed, then self-learning."""
    seed = structural_seed(src, tgt, signature_length)
    return self_learning_align(seed, src, tgt, max_iters=max_iters, method="NM")


def build_feature_seed(feat_a: Catalog, feat_b: Catalog, d: int = 20, k: int = 50, seed: int = 0) -> SeedDictionary:
    """Noisy seed from product feature vectors.

    PCA (fit on both catalogs together) reduces features to ``d`` dimensions,
    k-means groups Shop A into ``k`` clusters, the two members nearest each
    centroid become sample points, and each is paired with its cosine-nearest
    Shop B product. Pair weights are ``(1 + cos) / 2``.
    """
    if len(feat_a) == 0 or len(feat_b) == 0:
        raise ValidationError("both catalogs must be non-empty")
    if feat_a.features.shape[1] != feat_b.features.shape[1]:
        raise ValidationError("catalog feature lengths differ")
    if d > feat_a.features.shape[1]:
        raise ValidationError(f"PCA dimension {d} exceeds feature length {feat_a.features.shape[1]}")
    if k > len(feat_a):
        raise ValidationError(f"k={k} exceeds the {len(feat_a)} Shop A products")
    pca = fit_pca(np.vstack([feat_a.features, feat_b.features]), d)
    xa, xb = pca.transform(feat_a.features), pca.transform(feat_b.features)
    centroids, labels, _ = kmeans(xa, k, np.random.default_rng(seed))

    ua = xa / np.maximum(np.linalg.norm(xa, axis=1, keepdims=True), 1e-12)
    ub = xb / np.maximum(np.linalg.norm(xb, axis=1, keepdims=True), 1e-12)
    pairs = []
    for c in range(k):
        members = np.where(labels == c)[0]
        if members.size == 0:
            continue
        dist = ((xa[members] - centroids[c]) ** 2).sum(1)
        for m in members[np.argsort(dist, kind="stable")[:2]]:
            sims = ub @ ua[m]
            t = int(np.argmax(sims))
            pairs.append((feat_a.products[m], feat_b.products[t], (1.0 + float(sims[t])) / 2.0 + 1e-12))
    return SeedDictionary(pairs)


def im_align(feat_a: Catalog, feat_b: Catalog, src: EmbeddingTable, tgt: EmbeddingTable,
             pca_dim: int = 20, clusters: int = 50, max_iters: int = 50, seed: int = 0) -> AlignmentMap:
    """Feature-seeded self-learning; catalogs are restricted to each table's vocabulary first."""
    fa = feat_a.subset(src.vocab.products)
    fb = feat_b.subset(tgt.vocab.products)
    seed_dict = build_feature_seed(fa, fb, d=pca_dim, k=min(clusters, len(fa)), seed=seed)
    return self_learning_align(seed_dict, src, tgt, max_iters=max_iters, method="IM")


# -- regression methods ----------------------------------------------------------

def ridge_fit(X: np.ndarray, Y: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    """Least squares ``Y ≈ X W + b`` with an unpenalised intercept and penalty ``ridge * ||W||²``."""
    xm, ym = X.mean(0), Y.mean(0)
    Xc, Yc = X - xm, Y - ym
    if ridge > 0:
        W = np.linalg.solve(Xc.T @ Xc + ridge * np.eye(X.shape[1]), Xc.T @ Yc)
    else:
        W = np.linalg.lstsq(Xc, Yc, rcond=None)[0]
    return W, ym - xm @ W


def _pair_of(item):
    if hasattr(item, "source"):
        return item.source, item.target
    return item[0], item[1]


def handoff_pairs(cross_sessions, src: EmbeddingTable, tgt: EmbeddingTable) -> list[tuple[int, int]]:
    """(last in-vocabulary source product, first in-vocabulary target product) per cross session."""
    out = []
    for item in cross_sessions:
        s, t = _pair_of(item)
        si = src.vocab.encode(s.events if isinstance(s, Session) else s)
        ti = tgt.vocab.encode(t.events if isinstance(t, Session) else t)
        if si and ti:
            out.append((si[-1], ti[0]))
    return out


def pair_regression_align(cross_sessions, src: EmbeddingTable, tgt: EmbeddingTable, ridge: float = 1e-3) -> AlignmentMap:
    """Ridge regression from the last source product to the first target product of each user."""
    pairs = handoff_pairs(cross_sessions, src, tgt)
    if len(pairs) < src.dim:
        raise ValidationError(
            f"only {len(pairs)} usable cross-shop pairs for dimension {src.dim}; "
            "use the activity-centroid or feature-seeded method instead"
        )
    i, j = map(np.array, zip(*pairs))
    W, b = ridge_fit(src.U[i], tgt.U[j], ridge)
    return AlignmentMap(W, b, "UM")


def centroid_align(activities_a: Mapping[str, str], activities_b: Mapping[str, str], src: EmbeddingTable,
                   tgt: EmbeddingTable, n_per_category: int = 20, seed: int = 0, ridge: float = 1e-3) -> AlignmentMap:
    """Regression between per-activity centroids of randomly sampled products."""
    rng = np.random.default_rng(seed)

    def groups(labels, table):
        out: dict[str, list[int]] = {}
        for p, i in table.vocab.index.items():
            if p in labels:
                out.setdefault(labels[p], []).append(i)
        return out

    ga, gb = groups(activities_a, src), groups(activities_b, tgt)
    shared = sorted(set(ga) & set(gb))
    if len(shared) < 2:
        raise ValidationError(f"need at least 2 shared activities, found {len(shared)}")
    X, Y = [], []
    for act in shared:
        for g, table, out in ((ga, src, X), (gb, tgt, Y)):
            members = np.array(sorted(g[act]))
            pick = rng.choice(members, size=min(n_per_category, len(members)), replace=False)
            out.append(table.U[pick].mean(0))
    W, b = ridge_fit(np.array(X), np.array(Y), ridge)
    return AlignmentMap(W, b, "AM")


def dictionary_precision(mapping: AlignmentMap, src: EmbeddingTable, tgt: EmbeddingTable,
                         gold: Mapping[str, str]) -> float:
    """Precision@1 of cosine retrieval for gold (source -> target) pairs inside both vocabularies."""
    pairs = [(src.vocab.index[s], tgt.vocab.index[t]) for s, t in gold.items()
             if s in src.vocab.index and t in tgt.vocab.index]
    if not pairs:
        raise ValidationError("no gold pair is inside both vocabularies")
    i, j = map(np.array, zip(*pairs))
    X = src.unit[i] if mapping.bias is None else src.U[i]
    mapped = mapping.apply(X)
    mapped /= np.linalg.norm(mapped, axis=1, keepdims=True)
    return float(np.mean(np.argmax(mapped @ tgt.unit.T, axis=1) == j))
