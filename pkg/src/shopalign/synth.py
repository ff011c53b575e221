"""Synthetic two-shop world with a known cross-shop correspondence.

Both shops draw their products from one pool of latent prototypes. Each
prototype belongs to an activity and has a position in a small latent space.
Sessions are Markov walks: with probability ``intra_activity`` the next product
stays in the current activity and is chosen by a Gaussian kernel around the
current product times a per-product weight, otherwise the walk jumps to a
product drawn by popularity from the whole catalog. The weights balance the
kernel (``w * (K @ w) = popularity``), which makes the local walk reversible
with respect to popularity: every product's long-run share of views is
proportional to its popularity value, without padding sessions with repeats.
Popularity values are draws from a truncated power law over view counts, one
exponent per shop.

This is a stand-in generator for proprietary logs; it claims nothing about
real shopper behaviour beyond matching the aggregate statistics it is
calibrated on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Catalog, Event, Session
from .errors import ValidationError
from .powerlaw import draw_power_law

ACTIVITIES = (
    "soccer", "basketball", "tennis", "running", "swimming",
    "cycling", "golf", "hiking", "yoga", "baseball",
    "skiing", "boxing", "climbing", "surfing", "volleyball", "badminton",
)

# session length = 2 + NegBin(2, 0.35): nearest-rank quartiles (3, 5, 7)
LENGTH_NB = (2.0, 0.35)
MAX_SESSION_LENGTH = 60
REVIEW_WEIGHT = 0.05   # re-view kernel weight, relative to the closest neighbour


@dataclass(frozen=True)
class SynthConfig:
    products_a: int = 230
    products_b: int = 420
    prototypes: int = 500
    activities: int = 10
    sessions_a: int = 30_000
    sessions_b: int = 110_000
    alpha_a: float = 2.32
    alpha_b: float = 2.72
    popularity_max: int = 1000
    cutoff: float = 200.0
    intra_activity: float = 0.85
    drift: float = 0.2
    latent_dim: int = 8
    activity_spread: float = 3.0
    prototype_spread: float = 1.0
    shop_noise: float = 0.15
    kernel_width: float = 0.6
    feature_dim: int = 32
    feature_identity: float = 1.0
    feature_noise: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("intra_activity", "drift"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.alpha_a <= 1 or self.alpha_b <= 1:
            raise ValidationError("power-law exponents must exceed 1")
        if not 2 <= self.activities <= len(ACTIVITIES):
            raise ValidationError(f"activities must lie in [2, {len(ACTIVITIES)}]")
        if max(self.products_a, self.products_b) > self.prototypes:
            raise ValidationError("a shop cannot have more products than there are prototypes")
        if min(self.products_a, self.products_b) < self.activities:
            raise ValidationError("each shop needs at least one product per activity")

    def replace(self, **changes) -> "SynthConfig":
        return SynthConfig(**{**asdict(self), **changes})

    def as_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper-scale-0.01": SynthConfig(),
    "tiny": SynthConfig(products_a=60, products_b=90, prototypes=120, activities=4,
                        sessions_a=1500, sessions_b=2500),
}


@dataclass
class Shop:
    """One generated shop: product ids, latent state and walk tables."""

    shop_id: str
    products: list[str]
    activity: np.ndarray          # activity index per product
    prototype: np.ndarray         # prototype index per product
    latent: np.ndarray = field(repr=False)
    popularity: np.ndarray = field(repr=False)
    features: np.ndarray = field(repr=False)
    local_cdf: np.ndarray = field(repr=False)       # row i: next-product cdf staying in activity
    activity_cdf: list = field(repr=False)          # per activity: (product indices, cdf by popularity)
    global_cdf: np.ndarray = field(repr=False)      # all products, cdf by popularity
    _flat_cdf: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.products)


@dataclass
class GroundTruth:
    activity_names: tuple[str, ...]
    activity_a: dict[str, str]
    activity_b: dict[str, str]
    correspondence: dict[str, str]     # Shop A product -> Shop B product sharing its prototype
    popularity_a: dict[str, int]
    popularity_b: dict[str, int]


@dataclass
class SynthWorld:
    config: SynthConfig
    shop_a: Shop
    shop_b: Shop
    sessions_a: list[Session]
    sessions_b: list[Session]
    catalog_a: Catalog
    catalog_b: Catalog
    truth: GroundTruth


@dataclass(frozen=True)
class CrossSession:
    source: Session
    target: Session
    source_activity: str       # activity of the last source event
    target_activity: str       # activity of the first target event
    drifted: bool


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def session_lengths(n: int, rng: np.random.Generator, minimum: int = 2) -> np.ndarray:
    r, p = LENGTH_NB
    lengths = minimum + rng.negative_binomial(r, p, size=n)
    return np.minimum(lengths, MAX_SESSION_LENGTH)


def balance_kernel(kernel: np.ndarray, target: np.ndarray, tol: float = 1e-10, max_iter: int = 20_000) -> np.ndarray:
    """Positive ``w`` with ``w * (kernel @ w) = target`` for a symmetric kernel with positive diagonal.

    Damped symmetric Sinkhorn iteration. The walk ``P[i, j] ∝ kernel[i, j] * w[j]``
    is then reversible with stationary distribution proportional to ``target``.
    """
    w = np.sqrt(target / kernel.sum(1))
    for _ in range(max_iter):
        w = np.sqrt(w * target / (kernel @ w))
        if np.max(np.abs(w * (kernel @ w) - target) / target) < tol:
            break
    return w


def _build_shop(shop_id, n_products, chosen, proto_activity, proto_latent, act_features, proto_features, cfg, alpha, rng):
    # guarantee every activity is present in every shop
    latent = proto_latent[chosen] + cfg.shop_noise * rng.standard_normal((n_products, cfg.latent_dim))
    activity = proto_activity[chosen]
    popularity = draw_power_law(alpha, cfg.cutoff, cfg.popularity_max, n_products, rng).astype(np.float64)
    features = (act_features[activity] + cfg.feature_identity * proto_features[chosen]
                + cfg.feature_noise * rng.standard_normal((n_products, cfg.feature_dim)))
    order = rng.permutation(n_products)   # product ids carry no information about prototypes
    ids = [f"{shop_id.lower()}{order[i]:05d}" for i in range(n_products)]

    d2 = ((latent[:, None, :] - latent[None, :, :]) ** 2).sum(-1)
    same = activity[:, None] == activity[None, :]
    kernel = np.where(same, np.exp(-d2 / (2 * cfg.kernel_width ** 2)), 0.0)
    np.fill_diagonal(kernel, 0.0)
    nearest = kernel.max(1)
    # relative to the closest neighbour, so re-views stay rare; lone products only re-view
    np.fill_diagonal(kernel, np.where(nearest > 0, REVIEW_WEIGHT * nearest, 1.0))
    moves = kernel * balance_kernel(kernel, popularity)[None, :]
    local_cdf = np.cumsum(moves / moves.sum(1, keepdims=True), axis=1)
    local_cdf[:, -1] = 1.0

    activity_cdf = []
    for a in range(cfg.activities):
        members = np.where(activity == a)[0]
        w = popularity[members]
        cdf = np.cumsum(w / w.sum())
        cdf[-1] = 1.0
        activity_cdf.append((members, cdf))
    global_cdf = np.cumsum(popularity / popularity.sum())
    global_cdf[-1] = 1.0
    return Shop(shop_id, ids, activity, np.asarray(chosen), latent, popularity, features,
                local_cdf, activity_cdf, global_cdf)


def _choose_prototypes(n, proto_activity, activities, rng):
    first = [rng.choice(np.where(proto_activity == a)[0]) for a in range(activities)]
    rest = np.setdiff1d(np.arange(len(proto_activity)), first)
    extra = rng.choice(rest, size=n - activities, replace=False)
    return np.sort(np.concatenate([first, extra]))


def _pick_in_activity(shop: Shop, acts: np.ndarray, rng) -> np.ndarray:
    out = np.empty(len(acts), dtype=np.int64)
    u = rng.random(len(acts))
    for a in np.unique(acts):
        members, cdf = shop.activity_cdf[a]
        m = acts == a
        out[m] = members[np.searchsorted(cdf, u[m], side="right")]
    return out


def _pick_global(shop: Shop, n: int, rng) -> np.ndarray:
    return np.searchsorted(shop.global_cdf, rng.random(n), side="right")


def _step_local(shop: Shop, current: np.ndarray, rng) -> np.ndarray:
    # row-offset trick: one searchsorted over all rows of the cdf matrix at once
    n = len(shop)
    if shop._flat_cdf is None:
        shop._flat_cdf = (shop.local_cdf + np.arange(n)[:, None]).ravel()
    flat = shop._flat_cdf
    idx = np.searchsorted(flat, current + rng.random(len(current)), side="right")
    return np.minimum(idx - current * n, n - 1)


def walk(shop: Shop, start: np.ndarray, lengths: np.ndarray, intra: float, rng) -> list[np.ndarray]:
    """Markov walks from ``start`` products; returns one index array per walk."""
    m = len(start)
    path = np.full((m, int(lengths.max())), -1, dtype=np.int64)
    path[:, 0] = start
    cur = start.copy()
    for t in range(1, path.shape[1]):
        live = lengths > t
        if not live.any():
            break
        nxt = _step_local(shop, cur, rng)
        jump = rng.random(m) >= intra
        if jump.any():
            nxt[jump] = _pick_global(shop, int(jump.sum()), rng)
        cur = np.where(live, nxt, cur)
        path[live, t] = cur[live]
    return [path[i, :lengths[i]] for i in range(m)]


def _sessions(shop: Shop, n: int, cfg: SynthConfig, rng, prefix: str) -> list[Session]:
    lengths = session_lengths(n, rng)
    start = _pick_global(shop, n, rng)
    paths = walk(shop, start, lengths, cfg.intra_activity, rng)
    return [Session(f"{prefix}{i:07d}", shop.shop_id, tuple(shop.products[j] for j in p)) for i, p in enumerate(paths)]


def generate_shops(config: SynthConfig = SynthConfig()) -> SynthWorld:
    cfg = config
    g_world, g_a, g_b, g_sa, g_sb = _streams(cfg.seed, 5)
    names = ACTIVITIES[:cfg.activities]

    centers = cfg.activity_spread * g_world.standard_normal((cfg.activities, cfg.latent_dim))
    proto_activity = np.arange(cfg.prototypes) % cfg.activities
    proto_latent = centers[proto_activity] + cfg.prototype_spread * g_world.standard_normal((cfg.prototypes, cfg.latent_dim))
    act_features = g_world.standard_normal((cfg.activities, cfg.feature_dim))
    proto_features = g_world.standard_normal((cfg.prototypes, cfg.feature_dim))

    chosen_a = _choose_prototypes(cfg.products_a, proto_activity, cfg.activities, g_a)
    chosen_b = _choose_prototypes(cfg.products_b, proto_activity, cfg.activities, g_b)
    shop_a = _build_shop("A", cfg.products_a, chosen_a, proto_activity, proto_latent, act_features, proto_features, cfg, cfg.alpha_a, g_a)
    shop_b = _build_shop("B", cfg.products_b, chosen_b, proto_activity, proto_latent, act_features, proto_features, cfg, cfg.alpha_b, g_b)

    sessions_a = _sessions(shop_a, cfg.sessions_a, cfg, g_sa, "a")
    sessions_b = _sessions(shop_b, cfg.sessions_b, cfg, g_sb, "b")

    b_by_proto = {int(p): shop_b.products[i] for i, p in enumerate(shop_b.prototype)}
    truth = GroundTruth(
        activity_names=names,
        activity_a={p: names[a] for p, a in zip(shop_a.products, shop_a.activity)},
        activity_b={p: names[a] for p, a in zip(shop_b.products, shop_b.activity)},
        correspondence={p: b_by_proto[int(q)] for p, q in zip(shop_a.products, shop_a.prototype) if int(q) in b_by_proto},
        popularity_a={p: int(x) for p, x in zip(shop_a.products, shop_a.popularity)},
        popularity_b={p: int(x) for p, x in zip(shop_b.products, shop_b.popularity)},
    )
    catalog_a = Catalog(list(shop_a.products), [names[a] for a in shop_a.activity], shop_a.features)
    catalog_b = Catalog(list(shop_b.products), [names[a] for a in shop_b.activity], shop_b.features)
    return SynthWorld(cfg, shop_a, shop_b, sessions_a, sessions_b, catalog_a, catalog_b, truth)


def generate_cross_sessions(world: SynthWorld, count: int, seed: int = 0, drift: float | None = None) -> list[CrossSession]:
    """Paired (Shop A, Shop B) sessions of the same user.

    Without drift the first Shop B product is drawn near the last Shop A
    product's latent position, within its activity; with probability ``drift``
    the Shop B session starts from an independently drawn activity instead.
    """
    cfg = world.config
    drift = cfg.drift if drift is None else drift
    if not 0.0 <= drift <= 1.0:
        raise ValidationError(f"drift must lie in [0, 1], got {drift}")
    a, b = world.shop_a, world.shop_b
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919, seed]))
    names = world.truth.activity_names

    src_len = session_lengths(count, rng, minimum=1)
    tgt_len = session_lengths(count, rng, minimum=1)
    src_start = _pick_global(a, count, rng)
    src_paths = walk(a, src_start, src_len, cfg.intra_activity, rng)
    last = np.array([p[-1] for p in src_paths])
    last_act = a.activity[last]

    drifted = rng.random(count) < drift
    tgt_act = np.where(drifted, rng.integers(0, cfg.activities, size=count), last_act)

    # kernel-weighted handoff from the last Shop A product into Shop B
    first = np.empty(count, dtype=np.int64)
    u = rng.random(count)
    by_pop = _pick_in_activity(b, tgt_act, rng)
    for i in range(count):
        if drifted[i]:
            first[i] = by_pop[i]
            continue
        d2 = ((b.latent - a.latent[last[i]]) ** 2).sum(1)
        row = np.exp(-d2 / (2 * cfg.kernel_width ** 2)) * b.popularity
        row = np.where(b.activity == tgt_act[i], row, 0.0)
        total = row.sum()
        if total <= 0:
            first[i] = by_pop[i]
        else:
            first[i] = min(np.searchsorted(np.cumsum(row) / total, u[i], side="right"), len(b) - 1)
    tgt_paths = walk(b, first, tgt_len, cfg.intra_activity, rng)

    out = []
    for i in range(count):
        sid = f"x{seed}_{i:06d}"
        src = Session(sid, "A", tuple(a.products[j] for j in src_paths[i]))
        tgt = Session(sid, "B", tuple(b.products[j] for j in tgt_paths[i]))
        out.append(CrossSession(src, tgt, names[last_act[i]], names[b.activity[first[i]]], bool(drifted[i])))
    return out


def sessions_to_events(sessions, seed: int = 0, start_ms: int = 1_577_836_800_000) -> list[Event]:
    """Timestamped events for ``sessions``; gaps are 1 s plus an exponential of mean 30 s."""
    rng = np.random.default_rng(seed)
    types = np.array(["view", "click", "add", "purchase"])
    out = []
    for s in sessions:
        t = start_ms + int(rng.integers(0, 30 * 86_400_000))
        kinds = types[np.searchsorted([0.8, 0.93, 0.98, 1.0], rng.random(len(s)), side="right").clip(max=3)]
        for product, kind in zip(s.events, kinds):
            out.append(Event(s.session_id, product, t, str(kind), s.shop_id))
            t += 1000 + int(rng.exponential(30_000))
    return out


def popularity_ks(sessions, popularity: dict[str, float], n_events: int | None = 100_000) -> float:
    """KS distance between observed view shares and configured popularity shares.

    Products are ordered by configured popularity (descending, ties by id); the
    statistic is the largest gap between the two cumulative share curves over
    that order, using the first ``n_events`` events of ``sessions``.
    """
    if not popularity:
        raise ValidationError("popularity table is empty")
    order = sorted(popularity, key=lambda p: (-popularity[p], p))
    pos = {p: i for i, p in enumerate(order)}
    counts = np.zeros(len(order))
    seen = 0
    for s in sessions:
        for p in s.events:
            if n_events is not None and seen >= n_events:
                break
            if p not in pos:
                raise ValidationError(f"product {p!r} has no configured popularity")
            counts[pos[p]] += 1
            seen += 1
    if not seen:
        raise ValidationError("no events to compare")
    expected = np.array([popularity[p] for p in order], dtype=np.float64)
    return float(np.max(np.abs(np.cumsum(counts) / seen - np.cumsum(expected) / expected.sum())))
