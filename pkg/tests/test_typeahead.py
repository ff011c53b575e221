import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shopalign import typeahead
from shopalign.corpus import Session
from shopalign.errors import EmptyIntentError, ValidationError
from shopalign.typeahead import LMConfig, QueryCorpus, QueryRecord

from conftest import max_relative_error


def session(i, *events):
    return Session(f"s{i}", "B", tuple(events) or ("p",))


def corpus(queries):
    return QueryCorpus([QueryRecord(q, session(i), "B") for i, q in enumerate(queries)])


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    cfg = LMConfig(hidden=8, char_dim=4)
    params = typeahead.init_lm("abcde", 3, cfg, rng)
    params["Wo"] = 0.5 * rng.standard_normal(params["Wo"].shape)
    params["bi"] = 0.2 * rng.standard_normal(8)
    x, y, mask = typeahead._batch([[0, 1, 2], [4], [3, 3]], 5)
    intents = rng.standard_normal((3, 3))
    _, grads = typeahead.lm_loss_and_grads(params, intents, x, y, mask)
    err = max_relative_error(lambda: typeahead.lm_loss_and_grads(params, intents, x, y, mask)[0], params, grads)
    assert err < 1e-3


def test_single_query_is_memorised():
    model = typeahead.lm_train(corpus(["bad"]), lambda s: None, 4, LMConfig(hidden=16, epochs=300, learning_rate=0.02))
    dist = typeahead.step_distributions(model, None, "bad")
    assert "".join(model.inventory[i] if i < len(model.inventory) else "$" for i in dist.argmax(1)) == "bad$"
    ranked = typeahead.score_completions(model, None, "", ["dab", "bad", "abd"])
    assert ranked[0][0] == "bad"


def test_untrained_cross_entropy_near_log_inventory():
    queries = ["soccer ball", "swim cap", "tees", "yoga mat"]
    model = typeahead.lm_train(corpus(queries), lambda s: None, 4, LMConfig(epochs=0))
    ce = typeahead.lm_cross_entropy(model, queries)
    expected = math.log(len(model.inventory) + 1)
    assert abs(ce - expected) / expected < 0.05


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.text("abc ", min_size=0, max_size=6))
def test_step_distributions_normalise(seed, text):
    params = typeahead.init_lm("abc ", 3, LMConfig(hidden=5, char_dim=3), np.random.default_rng(seed))
    params["Wo"] *= 300
    model = typeahead.CondLM(tuple("abc "), params)
    dist = typeahead.step_distributions(model, np.random.default_rng(seed).standard_normal(3), text)
    assert dist.shape == (len(text) + 1, 5)
    assert np.all(np.abs(dist.sum(1) - 1.0) < 1e-6)


def test_score_is_sum_of_step_log_probs():
    rng = np.random.default_rng(4)
    model = typeahead.CondLM(tuple("ab"), typeahead.init_lm("ab", 2, LMConfig(hidden=4, char_dim=3), rng))
    intent = np.array([0.3, -1.0])
    for cand in ("ab", "abba", "b"):
        dist = typeahead.step_distributions(model, intent, cand)
        ids = model.encode(cand) + [model.terminator]
        oracle = sum(math.log(dist[t, i]) for t, i in enumerate(ids))
        assert abs(typeahead.sequence_log_probs(model, intent, [cand])[0] - oracle) < 1e-10


def test_scoring_rules():
    rng = np.random.default_rng(5)
    model = typeahead.CondLM(tuple("abc"), typeahead.init_lm("abc", 2, LMConfig(hidden=4), rng))
    assert [c for c, _ in typeahead.score_completions(model, None, "c", ["cab"])] == ["cab"]
    with pytest.raises(ValidationError):
        typeahead.score_completions(model, None, "a", ["ab", "ba"])
    with pytest.raises(ValidationError):
        typeahead.score_completions(model, None, "", [])
    with pytest.raises(ValidationError):
        typeahead.score_completions(model, None, "", ["xyz"])
    # none and the zero vector both mean no intent
    a = typeahead.score_completions(model, None, "", ["ab", "ca"])
    b = typeahead.score_completions(model, np.zeros(2), "", ["ab", "ca"])
    assert a == b
    with pytest.raises(ValidationError):
        typeahead.unit_intent(np.ones(3), 2)


def test_rank_by_score_ties_and_shift_invariance():
    assert typeahead.rank_by_score(["b", "a", "c"], [1, 1, 2]) == [("c", 2.0), ("a", 1.0), ("b", 1.0)]
    cands, scores = ["x", "y", "z"], [0.3, -2.0, 1.5]
    plain = [c for c, _ in typeahead.rank_by_score(cands, scores)]
    assert plain == [c for c, _ in typeahead.rank_by_score(cands, [s + 7 for s in scores])]


def test_candidate_pool():
    counts = {"ba": 5, "bb": 9, "bc": 1, "ca": 20}
    assert typeahead.candidate_pool(counts, "b", "bc", size=2) == ["bb", "ba", "bc"]
    assert typeahead.candidate_pool(counts, "", "zz", size=2) == ["ca", "bb", "zz"]


def test_eval_oracle_and_popularity():
    counts = {"aa": 3, "ab": 2, "ba": 1}
    items = [typeahead.TypeaheadItem(f"i{n}", q, session(n)) for n, q in enumerate(["aa", "ab", "ba"])]
    truth = {it.source.session_id: it.query for it in items}

    def oracle(source, prefix, candidates):
        return typeahead.rank_by_score(candidates, [0.0 if c == truth[source.session_id] else -np.inf for c in candidates])

    def empty(source, prefix, candidates):
        raise EmptyIntentError("none")

    reports = typeahead.typeahead_eval({"oracle": oracle, "PM": typeahead.popularity_scorer(counts), "x": empty},
                                       items, counts, k=5)
    assert reports[("oracle", 0)].mrr == 1.0 and reports[("oracle", 1)].mrr == 1.0
    assert abs(reports[("PM", 0)].mrr - (1 + 1 / 2 + 1 / 3) / 3) < 1e-12
    assert abs(reports[("PM", 1)].mrr - (1 + 1 / 2 + 1) / 3) < 1e-12
    assert reports[("x", 0)].skipped == 3 and not reports[("x", 0)].records
    with pytest.raises(ValidationError):
        typeahead.typeahead_eval({}, items, counts, k=0)


def test_intent_flips_completion():
    # two activity families sharing the prefix "b"
    records = []
    for i in range(120):
        q = "basketball jersey" if i % 2 == 0 else "babolat racket"
        records.append(QueryRecord(q, session(i, "x" if i % 2 == 0 else "y"), "B"))
    intents = {"x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0])}
    model = typeahead.lm_train(QueryCorpus(records), lambda s: intents[s.events[0]], 2,
                               LMConfig(hidden=16, epochs=30, learning_rate=0.02))
    cands = ["babolat racket", "basketball jersey"]
    assert typeahead.score_completions(model, intents["x"], "b", cands)[0][0] == "basketball jersey"
    assert typeahead.score_completions(model, intents["y"], "b", cands)[0][0] == "babolat racket"


def test_intent_dropout_learns_the_marginal():
    # 3:1 majority for one family; the zero intent should fall back on it
    records = [QueryRecord("basketball jersey" if i % 4 else "babolat racket", session(i, "x" if i % 4 else "y"), "B")
               for i in range(160)]
    intents = {"x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0])}
    model = typeahead.lm_train(QueryCorpus(records), lambda s: intents[s.events[0]], 2,
                               LMConfig(hidden=16, epochs=30, learning_rate=0.02, intent_dropout=0.3))
    cands = ["babolat racket", "basketball jersey"]
    assert typeahead.score_completions(model, None, "b", cands)[0][0] == "basketball jersey"
    assert typeahead.score_completions(model, intents["y"], "b", cands)[0][0] == "babolat racket"
    with pytest.raises(ValidationError):
        LMConfig(intent_dropout=1.0)


def test_query_corpus_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValidationError):
        corpus([])
    with pytest.raises(ValidationError):
        corpus(["ok", ""])
    with pytest.raises(ValidationError):
        QueryCorpus([QueryRecord("ab", session(0), "B")], inventory="a")
    c = corpus(["tees", "putter", "tees"])
    assert c.query_counts() == {"tees": 2, "putter": 1}
    typeahead.write_queries(tmp_path / "q.tsv", c)
    back = typeahead.read_queries(tmp_path / "q.tsv", {r.session.session_id: r.session for r in c})
    assert [r.query for r in back] == ["tees", "putter", "tees"] and back.inventory == c.inventory
    with pytest.raises(ValidationError):
        typeahead.read_queries(tmp_path / "q.tsv", {})


def test_generated_queries_follow_activity():
    sessions = [Session("s0", "B", ("p1", "p2")), Session("s1", "B", ("p2", "p1"))]
    act = {"p1": "golf", "p2": "yoga"}
    qs = typeahead.generate_queries(sessions, act, seed=3)
    assert qs.records[0].query in typeahead.QUERY_TEMPLATES["yoga"]
    assert qs.records[1].query in typeahead.QUERY_TEMPLATES["golf"]
    first = typeahead.generate_queries(sessions, act, seed=3, anchor="first")
    assert first.records[0].query in typeahead.QUERY_TEMPLATES["golf"]
    with pytest.raises(ValidationError):
        typeahead.template_queries("chess")


def test_training_is_deterministic_and_roundtrips(tmp_path):
    c = corpus(["tees", "putter"])
    m1 = typeahead.lm_train(c, lambda s: None, 3, LMConfig(hidden=6, epochs=3, seed=4))
    m2 = typeahead.lm_train(c, lambda s: None, 3, LMConfig(hidden=6, epochs=3, seed=4))
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)
    typeahead.save_lm(tmp_path / "lm.npz", m1)
    back = typeahead.load_lm(tmp_path / "lm.npz")
    assert back.inventory == m1.inventory and back.config == m1.config
    assert typeahead.score_completions(back, None, "", ["tees", "putter"]) == \
        typeahead.score_completions(m1, None, "", ["tees", "putter"])
