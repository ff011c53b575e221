import numpy as np
import pytest

from shopalign import corpus, embed, synth


def make_table(products, U, V=None, counts=None):
    """EmbeddingTable with a vocabulary in exactly the given product order."""
    n = len(products)
    # descending counts keep the requested order in the vocabulary index
    counts = counts or {p: 10 * (n - i) for i, p in enumerate(products)}
    U = np.asarray(U, dtype=np.float64)
    V = np.zeros_like(U) if V is None else V
    return embed.EmbeddingTable(corpus.Vocabulary(counts), U, V)


def random_table(n, d, seed, prefix="p"):
    rng = np.random.default_rng(seed)
    return make_table([f"{prefix}{i:03d}" for i in range(n)], rng.standard_normal((n, d)))


@pytest.fixture(scope="session")
def tiny_world():
    return synth.generate_shops(synth.PRESETS["tiny"])


@pytest.fixture(scope="session")
def tiny_tables(tiny_world):
    cfg = embed.TrainConfig(dim=16, window=3, epochs=3, seed=1)
    return embed.train(tiny_world.sessions_a, cfg), embed.train(tiny_world.sessions_b, cfg)


@pytest.fixture(scope="session")
def tiny_cross(tiny_world):
    return synth.generate_cross_sessions(tiny_world, 400, seed=1)


def max_relative_error(loss, params, grads, eps=1e-6):
    """Worst central-difference relative error over every entry of ``params``.

    ``loss()`` re-evaluates the objective from the (mutated in place) arrays.
    """
    worst = 0.0
    for name, M in params.items():
        for idx in np.ndindex(M.shape):
            old = M[idx]
            M[idx] = old + eps
            up = loss()
            M[idx] = old - eps
            down = loss()
            M[idx] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - grads[name][idx]) / max(1e-8, abs(num) + abs(grads[name][idx])))
    return worst


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
