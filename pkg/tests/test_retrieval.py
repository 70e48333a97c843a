import numpy as np
import pytest
from hypothesis import given, strategies as st

from setle.builder import SetBuilder
from setle.encoder import EncoderConfig, EncoderState, encode_store
from setle.envsim import random_rollout
from setle.features import SymbolicFeatures
from setle.graph import MemoryStore, NodeKind
from setle.nn import Tensor
from setle.retrieval import (SOURCE_TAG, EnrichmentConfig, LtmEntry, LtmIndex, RetrievalAttention,
                             attention_scores, enrich, extract_candidates, match_topk)

from conftest import unit

K = NodeKind


def index_of(*vecs, start=0):
    return LtmIndex([LtmEntry(start + i, unit(v), "Success", "A") for i, v in enumerate(vecs)])


# -- match_topk -----------------------------------------------------------------------
def test_penalty_example():
    # cos = 0.9 with two prior matches, gamma 0.9 -> 0.729
    idx = index_of([0.9, np.sqrt(1 - 0.81)])
    idx.match_counts[0] = 2
    [(sid, s)] = match_topk([1.0, 0.0], idx, 1, 0.9)
    assert sid == 0 and s == pytest.approx(0.729, abs=1e-12)
    assert idx.match_counts[0] == 3


def test_identical_query_ranked_first():
    idx = index_of([1, 2, 3], [3, 2, 1], [0, 1, 0])
    out = match_topk([3, 2, 1], idx, 3, 0.9)
    assert out[0][0] == 1 and out[0][1] == pytest.approx(1.0)


def test_no_penalty_is_cosine_ranking():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(8, 4))
    idx = index_of(*vecs)
    q = rng.normal(size=4)
    for _ in range(3):
        out = match_topk(q, idx, 8, 1.0)
        cos = (vecs @ q) / np.linalg.norm(vecs, axis=1) / np.linalg.norm(q)
        assert [s for s, _ in out] == list(np.argsort(-cos))


def test_ties_lower_id_and_empty_index():
    idx = index_of([1, 0], [1, 0], [1, 0], start=5)
    assert [s for s, _ in match_topk([1, 0], idx, 2, 1.0)] == [5, 6]
    with pytest.raises(ValueError):
        match_topk([1, 0], LtmIndex(), 1, 0.9)


def test_penalty_demotes_repeated_top():
    idx = index_of([1.0, 0.0], [0.8, 0.6])
    q = [1.0, 0.0]
    scores = []
    while True:
        (sid, s), = match_topk(q, idx, 1, 0.9)
        if sid != 0:
            break
        scores.append(s)
    assert len(scores) >= 2 and all(a > b for a, b in zip(scores, scores[1:]))
    idx.reset_counts()
    assert match_topk(q, idx, 1, 0.9)[0][0] == 0


# -- candidates -----------------------------------------------------------------------
def _ltm_with_set():
    ltm = MemoryStore(d_in=4)
    sid = ltm.create_set(np.ones(4), {"task": "A", "label": "Success"})
    o = ltm.add_node(K.OBJECT, [1.0, 0, 0, 0])
    s = ltm.add_node(K.STATE, [0, 0, 1.0, 0])
    a = ltm.add_node(K.AFFORDANCE, [0, 1.0, 0, 0])
    for n in (o, s, a):
        ltm.add_member(sid, n)
    return ltm, sid, o, s, a


def test_contained_set_gives_no_candidates():
    ltm, sid, *_ = _ltm_with_set()
    assert extract_candidates(ltm, [sid], ltm.copy()) == []


def test_similar_object_excluded_and_no_states():
    ltm, sid, o, s, a = _ltm_with_set()
    wm = MemoryStore(d_in=4, id_start=1000)
    cos97 = np.array([0.97, np.sqrt(1 - 0.97 ** 2), 0, 0])
    wm.add_node(K.OBJECT, cos97)
    assert extract_candidates(ltm, [sid], wm, tau_sim=0.95) == [a]
    wm2 = MemoryStore(d_in=4, id_start=1000)
    wm2.add_node(K.OBJECT, [0, 0, 0, 1.0])
    assert extract_candidates(ltm, [sid], wm2, tau_sim=0.95) == [o, a]


# -- attention ------------------------------------------------------------------------
def test_attention_hand_2x2():
    wq = np.array([[1.0, 0.0], [0.0, 2.0]])
    wk = np.array([[0.5, 0.5], [1.0, -1.0]])
    z = np.array([1.0, 1.0])
    c = np.array([[1.0, 0.0], [0.0, 1.0]])
    # q = (1, 2); keys = (0.5, 1), (0.5, -1); logits = 2.5, -1.5
    w = attention_scores(z, c, wq, wk, 2.0).data
    e = np.exp([1.25, -0.75])
    np.testing.assert_allclose(w, e / e.sum(), atol=1e-15)


def test_attention_trivial_cases():
    assert attention_scores(np.ones(2), np.ones((1, 2)), np.eye(2), np.eye(2)).data[0] == 1.0
    w = attention_scores(np.ones(3), np.ones((4, 3)), np.eye(3), np.eye(3)).data
    np.testing.assert_allclose(w, 0.25)
    with pytest.raises(ValueError):
        attention_scores(np.ones(2), np.zeros((0, 2)), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        attention_scores(np.ones(2), np.ones((2, 2)), np.eye(2), np.eye(2), tau_attn=0.0)


@given(st.integers(0, 10_000), st.integers(1, 7))
def test_attention_distribution_and_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    att = RetrievalAttention(4, rng)
    z, c = rng.normal(size=4), rng.normal(size=(n, 4))
    w = att(Tensor(z), c).data
    assert abs(w.sum() - 1.0) <= 1e-9
    perm = rng.permutation(n)
    np.testing.assert_allclose(att(Tensor(z), c[perm]).data, w[perm], atol=1e-12)


# -- enrich ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def ltm_setup(memory):
    state = EncoderState(EncoderConfig(d_in=16, hidden_dim=16, heads=2, key_dim=8))
    index = LtmIndex.from_embeddings(memory, encode_store(memory, state))
    att = RetrievalAttention(16, np.random.default_rng(0))
    return memory, state, index, att


def _window(ltm, task, seed, episode, t):
    tr = random_rollout(task, seed, 30, episode)
    t = min(t, len(tr.steps))
    obs = tr.observations()
    acts = [s.action for s in tr.steps]
    rews = [s.reward for s in tr.steps]
    return SetBuilder(SymbolicFeatures(16)).build_window(obs, acts, rews, t, 4, ltm=ltm)


def test_enrich_soundness_randomized(ltm_setup):
    ltm, state, index, att = ltm_setup
    rng = np.random.default_rng(42)
    injected_any = 0
    for i in range(50):
        task = ("Empty-5", "DoorKey-5")[i % 2]
        cfg = EnrichmentConfig(top_k=int(rng.integers(1, 6)), n_inject=int(rng.integers(1, 6)),
                               penalty=float(rng.uniform(0.5, 1.0)))
        wm, window = _window(ltm, task, 100 + i, i, int(rng.integers(1, 12)))
        before = set(wm.nodes)
        ltm_ids = set(ltm.nodes)
        index.reset_counts()
        res = enrich(wm, window, index, ltm, state, att, cfg)
        ids = [n.node_id for n in res.injected]
        assert len(ids) <= cfg.n_inject
        assert len(ids) == len(set(ids))
        for n in res.injected:
            assert n.node_id in ltm_ids and n.node_id not in before
            assert n.source == SOURCE_TAG and wm.nodes[n.node_id].meta["source"] == SOURCE_TAG
            assert n.attached_at in wm.nodes and wm.kind(n.attached_at) is K.STATE
            assert wm.kind(n.node_id) in (K.OBJECT, K.INTERACTION, K.AFFORDANCE)
        assert set(wm.nodes) - before == set(ids)
        assert wm.schema_violations() == []
        assert res.weights is None or abs(res.weights.sum() - 1.0) < 1e-9
        injected_any += len(ids)
    assert injected_any > 0


def test_enrich_boundaries(ltm_setup):
    ltm, state, index, att = ltm_setup
    wm, window = _window(ltm, "DoorKey-5", 7, 0, 6)
    before = (sorted(wm.nodes), list(wm.edges))
    res = enrich(wm, window, index, ltm, state, att, EnrichmentConfig(n_inject=0))
    assert res.injected == [] and (sorted(wm.nodes), list(wm.edges)) == before
    res = enrich(wm, window, LtmIndex(), ltm, state, att, EnrichmentConfig())
    assert res.injected == [] and res.matched == [] and (sorted(wm.nodes), list(wm.edges)) == before


def test_enrich_identical_episode_injects_missing(ltm_setup):
    """Index of one episode identical to the window: its missing nodes come back tagged."""
    ltm, state, _, att = ltm_setup
    sid = next(s for s in ltm.set_ids() if ltm.nodes[s].meta["task"] == "DoorKey-5")
    meta = ltm.nodes[sid].meta
    tr = random_rollout("DoorKey-5", meta["seed"], meta["n_steps"], meta["episode"])
    obs, acts, rews = tr.observations(), [s.action for s in tr.steps], [s.reward for s in tr.steps]
    wm, window = SetBuilder(SymbolicFeatures(16)).build_window(obs, acts, rews, 1, 4, ltm=ltm)
    emb = [e for e in encode_store(ltm, state, [sid])]
    index = LtmIndex.from_embeddings(ltm, emb)
    res = enrich(wm, window, index, ltm, state, att, EnrichmentConfig(top_k=1, n_inject=50))
    assert [s for s, _ in res.matched] == [sid]
    got = {n.node_id for n in res.injected}
    assert got and all(n.source == SOURCE_TAG for n in res.injected)
    assert got <= set(ltm.set_index[sid]) and got <= set(res.candidates)
    # with room for every candidate, only interactions lacking an anchor object may be skipped
    for n in set(res.candidates) - got:
        assert ltm.kind(n) is K.INTERACTION


def test_config_validation():
    with pytest.raises(ValueError):
        EnrichmentConfig(penalty=0.0)
    with pytest.raises(ValueError):
        EnrichmentConfig(top_k=0)
    with pytest.raises(ValueError):
        EnrichmentConfig(tau_attn=-1.0)
