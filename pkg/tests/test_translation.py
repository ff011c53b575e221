import numpy as np
import pytest

from shopalign import translation
from shopalign.errors import ValidationError
from shopalign.translation import TMConfig

from conftest import max_relative_error, random_table


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    params = translation.init_params(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), 8, rng)
    params["Wo"] = 0.5 * rng.standard_normal(params["Wo"].shape)
    batch = translation._batch([[0, 1, 2], [3], [2, 2]], [[1, 0], [3, 2, 1], [0]], TMConfig(), bos=4)
    _, grads = translation.loss_and_grads(params, *batch)
    err = max_relative_error(lambda: translation.loss_and_grads(params, *batch)[0], params, grads)
    assert err < 1e-3


def test_memorises_single_pair():
    src, tgt = random_table(6, 8, 1, "a"), random_table(7, 8, 2, "b")
    pair = [(["a001", "a004"], ["b005", "b002"])]
    model = translation.tm_train(pair, src, tgt, TMConfig(hidden=16, epochs=200, learning_rate=0.02))
    first, _ = translation.tm_predict(model, ["a001", "a004"], top_k=3)
    assert first[0] == "b005"
    assert translation.greedy_sequence(model, ["a001", "a004"], 2) == ["b005", "b002"]
    assert model.loss_history[-1] < model.loss_history[0]


def test_untrained_cross_entropy_is_near_uniform():
    src, tgt = random_table(30, 8, 3, "a"), random_table(60, 8, 4, "b")
    rng = np.random.default_rng(0)
    cross = [([f"a{i:03d}" for i in rng.integers(0, 30, 3)], [f"b{i:03d}" for i in rng.integers(0, 60, 2)])
             for _ in range(50)]
    model = translation.tm_train(cross, src, tgt, TMConfig(epochs=0))
    ce = translation.mean_cross_entropy(model, cross, src, tgt)
    assert abs(ce - np.log(60)) / np.log(60) < 0.05


def gru_step(x, h, Wx, Wh, b):
    """Textbook GRU cell, one example at a time."""
    n = len(h)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    z = sig(x @ Wx[:, :n] + h @ Wh[:, :n] + b[:n])
    r = sig(x @ Wx[:, n:2 * n] + h @ Wh[:, n:2 * n] + b[n:2 * n])
    c = np.tanh(x @ Wx[:, 2 * n:] + (r * h) @ Wh[:, 2 * n:] + b[2 * n:])
    return (1 - z) * c + z * h


def test_first_step_matches_exhaustive_softmax():
    src, tgt = random_table(5, 4, 5, "a"), random_table(9, 4, 6, "b")
    model = translation.tm_train([(["a000"], ["b001"]), (["a002", "a003"], ["b004"])], src, tgt,
                                 TMConfig(hidden=6, epochs=5))
    p = model.params
    h = np.zeros(6)
    for i in (1, 3, 2):
        h = gru_step(p["Es"][i], h, p["enc_Wx"], p["enc_Wh"], p["enc_b"])
    h = gru_step(p["Et"][-1], h, p["dec_Wx"], p["dec_Wh"], p["dec_b"])
    logits = h @ p["Wo"] + p["bo"]
    probs = np.exp(logits) / np.exp(logits).sum()
    expected = [model.target_products[i] for i in sorted(range(9), key=lambda i: (-probs[i], i))]
    assert np.allclose(translation.decode(model, ["a001", "a003", "a002"], 1)[0], probs)
    first, anyitem = translation.tm_predict(model, ["a001", "a003", "a002"], top_k=4)
    assert first == expected[:4] == anyitem
    assert translation.tm_predict(model, ["a001"], top_k=50)[0].__len__() == 9


def test_any_item_ranking_pools_steps():
    src, tgt = random_table(5, 4, 7, "a"), random_table(9, 4, 8, "b")
    model = translation.tm_train([(["a000"], ["b001", "b003"])], src, tgt, TMConfig(hidden=6, epochs=3))
    probs = translation.decode(model, ["a000"], 3)
    pooled = probs.max(axis=0)
    _, anyitem = translation.tm_predict(model, ["a000"], top_k=9, max_steps=3)
    assert anyitem == [model.target_products[i] for i in sorted(range(9), key=lambda i: (-pooled[i], i))]


def test_errors_and_unknown_source():
    src, tgt = random_table(4, 4, 9, "a"), random_table(4, 4, 10, "b")
    with pytest.raises(ValidationError):
        translation.tm_train([(["zz"], ["b000"])], src, tgt)
    with pytest.raises(ValidationError):
        TMConfig(hidden=0)
    model = translation.tm_train([(["a000"], ["b000"])], src, tgt, TMConfig(epochs=1))
    with pytest.raises(ValidationError):
        translation.tm_predict(model, ["a000"], top_k=0)
    assert np.allclose(translation.decode(model, ["zz"], 2), 0.25)


def test_save_load_roundtrip(tmp_path):
    src, tgt = random_table(4, 4, 11, "a"), random_table(5, 4, 12, "b")
    model = translation.tm_train([(["a000", "a001"], ["b002"])], src, tgt, TMConfig(hidden=5, epochs=2, seed=3))
    translation.save_model(tmp_path / "tm.npz", model)
    back = translation.load_model(tmp_path / "tm.npz")
    assert back.config == model.config and back.loss_history == model.loss_history
    assert back.target_products == model.target_products
    assert np.array_equal(translation.decode(back, ["a001"], 2), translation.decode(model, ["a001"], 2))


def test_training_is_deterministic():
    src, tgt = random_table(6, 4, 13, "a"), random_table(6, 4, 14, "b")
    cross = [(["a000", "a003"], ["b001"]), (["a005"], ["b004", "b002"])]
    m1 = translation.tm_train(cross, src, tgt, TMConfig(epochs=4, seed=2))
    m2 = translation.tm_train(cross, src, tgt, TMConfig(epochs=4, seed=2))
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)
