import math

import numpy as np
import pytest

from conftest import small_traces, toy_set
from setle.builder import build_memory
from setle.encoder import (DEFAULT_METAPATHS, SET_ST_AFF_ST, SET_ST_OBJ_INTER_AFF, DegenerateSetError,
                           EncoderConfig, EncoderState, InsufficientDataError, PreparedSet, SetInfo, batch_loss,
                           count_metapath_instances, encode_prepared, encode_set, encode_store, hybrid_loss,
                           metapath_instances, prepare_set, sample_triplets, train_encoder, triplet_batch_loss)
from setle.graph import EdgeKind, MemoryStore, NodeKind
from setle.nn import Adam, Tensor, grad_check, info_nce_value, triplet_value
from setle.nn import autodiff as ad

K, E = NodeKind, EdgeKind
SMALL = dict(d_in=4, hidden_dim=8, layers=2, heads=2, key_dim=4)


@pytest.fixture(scope="module")
def train_memory():
    return build_memory(small_traces(n=4, seed=3))


# -- meta-path instances --------------------------------------------------------------
def test_unique_instance(store):
    sid = toy_set(store, n_states=1)
    sub = store.get_set_subgraph(sid)
    inst, nodes, adj = metapath_instances(store, sub, SET_ST_OBJ_INTER_AFF)
    assert len(inst) == 1 and len(inst[0]) == 5
    assert [store.kind(n) for n in inst[0]] == [K.SET, K.STATE, K.OBJECT, K.INTERACTION, K.AFFORDANCE]
    assert adj.shape == (5, 5)
    # symmetric normalisation with self-loops
    a = adj.toarray()
    assert np.allclose(a, a.T) and np.all(np.diag(a) > 0)


def test_no_interactions_only_state_path(store):
    sid = toy_set(store, n_states=2, interaction=False)
    sub = store.get_set_subgraph(sid)
    assert count_metapath_instances(store, sub, SET_ST_OBJ_INTER_AFF) == 0
    assert metapath_instances(store, sub, SET_ST_OBJ_INTER_AFF)[0] == []
    assert count_metapath_instances(store, sub, SET_ST_AFF_ST) >= 1


def test_three_state_chain_two_instances(store):
    sid = toy_set(store, n_states=3, interaction=False)
    sub = store.get_set_subgraph(sid)
    inst, _, _ = metapath_instances(store, sub, SET_ST_AFF_ST)
    assert len(inst) == 2 == count_metapath_instances(store, sub, SET_ST_AFF_ST)


def test_instance_count_matches_enumeration(memory):
    for sid in memory.set_ids()[:6]:
        sub = memory.get_set_subgraph(sid)
        for path in DEFAULT_METAPATHS:
            assert count_metapath_instances(memory, sub, path) == len(metapath_instances(memory, sub, path)[0])


def test_degenerate_set_raises(store):
    sid = store.create_set(np.ones(4), {"task": "A", "label": "Success"})
    s = store.add_node(K.STATE, np.ones(4))
    store.add_member(sid, s)
    store.add_edge(sid, E.HAS_STATE, s)
    with pytest.raises(DegenerateSetError):
        prepare_set(store, sid, DEFAULT_METAPATHS)


def test_metapaths_schema_valid():
    from setle.graph import HIERARCHICAL_SCHEMA
    for p in DEFAULT_METAPATHS:
        p.validate(HIERARCHICAL_SCHEMA)


# -- views ----------------------------------------------------------------------------
def test_single_metapath_attention_is_one(store):
    sid = toy_set(store, n_states=3)
    state = EncoderState(EncoderConfig(**SMALL, metapaths=(SET_ST_AFF_ST,)))
    ps = prepare_set(store, sid, state.config.metapaths)
    with ad.no_grad():
        z_mp, beta = state.metapath_view([ps])
        h = state.tables.lookup(store, ps.path_nodes[0])
        readout = state.gcns[0](h, ps.path_adj[0]).data[ps.path_nodes[0].index(sid)]
    assert beta.data[0, 0] == 1.0
    np.testing.assert_array_equal(z_mp.data[0], readout)


def test_equal_semantic_logits_average(store):
    sid = toy_set(store, n_states=2)
    state = EncoderState(EncoderConfig(**SMALL))
    state.sem_q.data[:] = 0.0
    ps = prepare_set(store, sid, state.config.metapaths)
    with ad.no_grad():
        z_mp, beta = state.metapath_view([ps])
        reads = []
        for p, gcn in enumerate(state.gcns):
            h = state.tables.lookup(store, ps.path_nodes[p])
            reads.append(gcn(h, ps.path_adj[p]).data[ps.path_nodes[p].index(sid)])
    np.testing.assert_allclose(beta.data[0], [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(z_mp.data[0], (reads[0] + reads[1]) / 2, atol=1e-12)


def test_metapath_view_hand_gcn(store):
    """d=4, identity-like weights, 2-layer GCN on a 5-node instance, computed by hand in numpy."""
    sid = toy_set(store, n_states=1)
    cfg = EncoderConfig(d_in=4, hidden_dim=4, layers=2, heads=1, key_dim=4, metapaths=(SET_ST_OBJ_INTER_AFF,))
    state = EncoderState(cfg)
    w0 = np.diag([1.0, 0.5, -1.0, 2.0])
    w1 = np.full((4, 4), 0.25)
    state.gcns[0].weights[0].data = w0
    state.gcns[0].weights[1].data = w1
    ps = prepare_set(store, sid, cfg.metapaths)
    nodes = ps.path_nodes[0]
    x = np.stack([store.nodes[n].feature.astype(np.float64) @ state.tables.proj[store.kind(n)] for n in nodes])
    # chain Set-State-Object-Interaction-Affordance, plus the Affordance-State Outcome edge
    pos = {n: i for i, n in enumerate(nodes)}
    a = np.eye(5)
    for src in nodes:
        for _, dst in store.out_edges(src):
            if dst in pos:
                a[pos[src], pos[dst]] = a[pos[dst], pos[src]] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    a_hat = a * d[:, None] * d[None, :]

    def elu(v):
        return np.where(v > 0, v, np.expm1(np.minimum(v, 0)))

    h = elu(a_hat @ elu(a_hat @ x @ w0) @ w1)
    with ad.no_grad():
        z_mp, _ = state.metapath_view([ps])
    np.testing.assert_allclose(z_mp.data[0], h[pos[sid]], atol=1e-12)


def _states_only(store, sid, ids):
    return PreparedSet(sid, "A", "Success", [], [], {k: (list(ids) if k is K.STATE else []) for k in
                                                    (K.STATE, K.AFFORDANCE, K.OBJECT, K.INTERACTION)}, store)


def test_schema_view_uniform_states_is_mean(store):
    sid = toy_set(store, n_states=2, interaction=False)
    states = [n for n in store.members(sid) if store.kind(n) is K.STATE]
    state = EncoderState(EncoderConfig(**SMALL))
    state.sc_wq.data[:] = 0.0
    with ad.no_grad():
        z_sc = state.schema_view([_states_only(store, sid, states)])
        e = state.tables.lookup(store, states).data
    np.testing.assert_allclose(z_sc.data[0], e.mean(axis=0), atol=1e-12)


def test_schema_view_masks_absent_kinds(store):
    sid = toy_set(store, n_states=2, interaction=False)
    states = [n for n in store.members(sid) if store.kind(n) is K.STATE]
    state = EncoderState(EncoderConfig(**SMALL))
    ps = _states_only(store, sid, states)
    with ad.no_grad():
        before = state.schema_view([ps]).data.copy()
        # other kinds' parameters can change freely: only state embeddings matter
        state.tables.proj[K.OBJECT] = state.tables.proj[K.OBJECT] * 3.0
        state.sc_kind_q.data *= -2.0
        after = state.schema_view([ps]).data
    np.testing.assert_allclose(before, after, atol=1e-12)


def test_schema_view_hand_attention(store):
    """One head, one kind: softmax(e W_k q / sqrt(dk)) weighted mean, by hand."""
    sid = toy_set(store, n_states=3, interaction=False)
    states = [n for n in store.members(sid) if store.kind(n) is K.STATE]
    cfg = EncoderConfig(d_in=4, hidden_dim=4, layers=1, heads=1, key_dim=2)
    state = EncoderState(cfg)
    with ad.no_grad():
        z_sc = state.schema_view([_states_only(store, sid, states)]).data[0]
        e = state.tables.lookup(store, states).data
        e_set = state.tables.lookup(store, [sid]).data[0]
    logits = (e @ state.sc_wk.data) @ (e_set @ state.sc_wq.data) / math.sqrt(2)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    np.testing.assert_allclose(z_sc, w @ e, atol=1e-12)


# -- encode_set -----------------------------------------------------------------------
def test_unit_norm_and_determinism(memory):
    state = EncoderState(EncoderConfig(d_in=16, hidden_dim=16, heads=2, key_dim=8))
    a = encode_store(memory, state)
    b = encode_store(memory, state)
    for x, y in zip(a, b):
        assert abs(np.linalg.norm(x.z) - 1.0) < 1e-6
        np.testing.assert_array_equal(x.z, y.z)


def test_batching_does_not_change_embeddings(memory):
    state = EncoderState(EncoderConfig(d_in=16, hidden_dim=16, heads=2, key_dim=8))
    prepared = [prepare_set(memory, s, state.config.metapaths) for s in memory.set_ids()]
    together = encode_prepared(state, prepared)
    alone = [encode_prepared(state, [p])[0] for p in prepared]
    for x, y in zip(together, alone):
        np.testing.assert_allclose(x.z, y.z, atol=1e-12)


def test_insertion_order_invariance():
    traces = small_traces(n=2, seed=5)
    fwd = build_memory(traces)
    rev = build_memory(traces[::-1])
    state = EncoderState(EncoderConfig(d_in=16, hidden_dim=16, heads=2, key_dim=8))
    key = lambda st, s: (st.nodes[s].meta["task"], st.nodes[s].meta["episode"])
    za = {key(fwd, e.set_id): e.z for e in encode_store(fwd, state)}
    zb = {key(rev, e.set_id): e.z for e in encode_store(rev, state)}
    assert za.keys() == zb.keys()
    for k in za:
        np.testing.assert_allclose(za[k], zb[k], atol=1e-12)


def test_semantic_attention_is_distribution(memory):
    state = EncoderState(EncoderConfig(d_in=16, hidden_dim=16, heads=2, key_dim=8))
    prepared = [prepare_set(memory, s, state.config.metapaths) for s in memory.set_ids()]
    with ad.no_grad():
        _, _, _, beta = state.forward(prepared)
    assert np.all(beta.data >= 0)
    np.testing.assert_allclose(beta.data.sum(axis=1), 1.0, atol=1e-9)


# -- triplets ---------------------------------------------------------------------------
def test_forced_triplet():
    infos = [SetInfo(1, "A", "Success"), SetInfo(2, "A", "Success"), SetInfo(3, "A", "Failure")]
    rng = np.random.default_rng(0)
    for a, p, n in sample_triplets(infos, 20, rng):
        assert (a, p, n) in {(1, 2, 3), (2, 1, 3)}


def test_anchor_never_positive():
    infos = [SetInfo(i, "AB"[i % 2], "Success" if i % 3 else "Failure") for i in range(30)]
    for a, p, n in sample_triplets(infos, 500, np.random.default_rng(1)):
        assert a != p
        ia, ip, ineg = (infos[x] for x in (a, p, n))
        assert ia.task == ip.task and ip.label == "Success"
        assert ineg.task != ia.task or ineg.label == "Failure"


def test_negative_pools_balanced():
    infos = ([SetInfo(i, "A", "Success") for i in range(3)] + [SetInfo(10 + i, "A", "Failure") for i in range(2)]
             + [SetInfo(20 + i, "B", "Success") for i in range(7)])
    trips = sample_triplets(infos, 10_000, np.random.default_rng(0), anchors=[0] * 10_000)
    frac = np.mean([n >= 20 for _, _, n in trips])
    assert abs(frac - 0.5) <= 0.05


def test_insufficient_data_errors():
    with pytest.raises(InsufficientDataError, match="positive pool"):
        sample_triplets([SetInfo(1, "A", "Success"), SetInfo(2, "A", "Failure")], 1, np.random.default_rng(0))
    with pytest.raises(InsufficientDataError, match="negative pools"):
        sample_triplets([SetInfo(1, "A", "Success"), SetInfo(2, "A", "Success")], 1, np.random.default_rng(0))


# -- hybrid loss ----------------------------------------------------------------------
def _toy_views(seed=0, d=4):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.normal(size=s), requires_grad=True) for s in [(d,), (d,), (d,), (3, d), (3, d)]]


def test_hybrid_loss_boundaries():
    za, zp, zn, mp, sc = _toy_views()
    trip = triplet_value(np.linalg.norm(za.data - zp.data), np.linalg.norm(za.data - zn.data), 0.6)
    assert hybrid_loss(za, zp, zn, mp, sc, 1.0, 0.6, 0.5).item() == pytest.approx(trip, abs=1e-12)
    cos = lambda u, v: u @ v / np.linalg.norm(u) / np.linalg.norm(v)
    nce = np.mean([info_nce_value(cos(mp.data[i], sc.data[i]), [cos(mp.data[i], sc.data[j]) for j in range(3)], 0.5)
                   for i in range(3)])
    assert hybrid_loss(za, zp, zn, mp, sc, 0.0, 0.6, 0.5).item() == pytest.approx(nce, abs=1e-12)
    with pytest.raises(ValueError):
        hybrid_loss(za, zp, zn, mp, sc, 1.5, 0.6, 0.5)


def test_hybrid_loss_hand_three_sets():
    za, zp, zn, mp, sc = _toy_views(seed=4)
    lam, margin, tau = 0.5, 1.0, 0.5
    d_ap = math.sqrt(sum((a - b) ** 2 for a, b in zip(za.data, zp.data)))
    d_an = math.sqrt(sum((a - b) ** 2 for a, b in zip(za.data, zn.data)))
    trip = max(0.0, d_ap - d_an + margin)
    total = 0.0
    for i in range(3):
        sims = []
        for j in range(3):
            u, v = mp.data[i], sc.data[j]
            sims.append(sum(u * v) / math.sqrt(sum(u * u) * sum(v * v)) / tau)
        total += -sims[i] + math.log(sum(math.exp(s) for s in sims))
    expected = lam * trip + (1 - lam) * total / 3
    assert hybrid_loss(za, zp, zn, mp, sc, lam, margin, tau).item() == pytest.approx(expected, abs=1e-12)


def test_batched_loss_matches_hybrid():
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(3, 4)))
    mp, sc = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    a = triplet_batch_loss(z, mp, sc, np.array([[0, 1, 2]]), 0.5, 1.0, 0.5).item()
    b = hybrid_loss(z[0], z[1], z[2], mp, sc, 0.5, 1.0, 0.5).item()
    assert a == pytest.approx(b, abs=1e-9)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_hybrid_loss_gradients(lam):
    views = _toy_views(seed=7)
    assert grad_check(lambda: hybrid_loss(*views, lam, 5.0, 0.5), views) < 1e-4


def test_encoder_gradients_through_sets(memory):
    cfg = EncoderConfig(d_in=16, hidden_dim=6, layers=2, heads=2, key_dim=3, seed=1)
    state = EncoderState(cfg)
    prepared = {s: prepare_set(memory, s, cfg.metapaths) for s in memory.set_ids()}
    for ps in prepared.values():
        for nodes in ps.path_nodes + list(ps.schema_nodes.values()):
            state.tables.register(memory, nodes)
    ids = sorted(prepared)
    trip = sample_triplets([SetInfo(s, memory.nodes[s].meta["task"], memory.nodes[s].meta["label"]) for s in ids],
                           3, np.random.default_rng(0))
    params = state.named_parameters()
    cfg.margin = 5.0  # keep every triplet inside the hinge
    assert grad_check(lambda: batch_loss(state, prepared, trip), params) < 1e-4


# -- shared embeddings ----------------------------------------------------------------
def test_shared_embedding_propagation(store):
    shared = store.add_node(K.OBJECT, [0.0, 0, 1.0, 0])
    a1 = toy_set(store, 2, shared=shared)
    a2 = toy_set(store, 2, shared=shared)
    neg = toy_set(store, 2, obj=(0, 0, 0, 1.0), label="Failure")
    other = toy_set(store, 2, shared=shared, task="B")            # contains n, not in the triplet
    lone = toy_set(store, 2, obj=(0, 1.0, 1.0, 0), task="B")      # no node in common with the triplet
    cfg = EncoderConfig(**SMALL, margin=5.0)
    state = EncoderState(cfg)
    prepared = {s: prepare_set(store, s, cfg.metapaths) for s in (a1, a2, neg, other, lone)}
    for ps in prepared.values():
        for nodes in ps.path_nodes + list(ps.schema_nodes.values()):
            state.tables.register(store, nodes)
    # interaction nodes are per-SET here; only the object is shared
    row = state.tables.index[K.OBJECT][shared]
    before_row = state.tables.tables[K.OBJECT].data[row].copy()
    z_other, z_lone = (encode_prepared(state, [prepared[s]])[0].z for s in (other, lone))
    tables = {n: p for n, p in state.named_parameters().items() if n.startswith("tables.")}
    opt = Adam(tables, lr=1e-2, weight_decay=0.0, sparse=tuple(tables))
    opt.zero_grad()
    batch_loss(state, prepared, [(a1, a2, neg)]).backward()
    opt.step()
    assert not np.array_equal(state.tables.tables[K.OBJECT].data[row], before_row)
    assert not np.array_equal(encode_prepared(state, [prepared[other]])[0].z, z_other)
    np.testing.assert_array_equal(encode_prepared(state, [prepared[lone]])[0].z, z_lone)


# -- training -------------------------------------------------------------------------
def _quick(**kw):
    base = dict(d_in=16, hidden_dim=8, layers=2, heads=2, key_dim=4, max_epochs=3, val_fraction=0.5,
                accumulation=4)
    base.update(kw)
    return EncoderConfig(**base)


def test_training_deterministic(train_memory, tmp_path):
    r1 = train_encoder(train_memory, _quick(), log_path=tmp_path / "a.csv")
    r2 = train_encoder(train_memory, _quick(), log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(r1.log) == 3 and r1.log == r2.log
    for (n1, p1), (n2, p2) in zip(r1.state.named_parameters().items(), r2.state.named_parameters().items()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)


def test_lower_margin_lower_final_loss(train_memory):
    lo = train_encoder(train_memory, _quick(margin=0.1, max_epochs=5))
    hi = train_encoder(train_memory, _quick(margin=1.5, max_epochs=5))
    assert lo.log[-1]["train_loss"] < hi.log[-1]["train_loss"]


def test_training_changes_and_restores_best(train_memory):
    res = train_encoder(train_memory, _quick(max_epochs=4))
    best = min(r["val_loss"] for r in res.log)
    assert res.log[res.best_epoch - 1]["val_loss"] == best
    assert set(res.train_ids).isdisjoint(res.val_ids)


def test_checkpoint_roundtrip(train_memory, tmp_path):
    res = train_encoder(train_memory, _quick(max_epochs=1), checkpoint_path=tmp_path / "enc.npz")
    loaded, meta = EncoderState.load(tmp_path / "enc.npz")
    assert meta["best_epoch"] == res.best_epoch
    sid = train_memory.set_ids()[0]
    # tensors are stored as float32
    np.testing.assert_allclose(encode_set(train_memory, sid, loaded).z, encode_set(train_memory, sid, res.state).z,
                               atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(lam=1.2)
    with pytest.raises(ValueError):
        EncoderConfig(hidden_dim=0)
    with pytest.raises(ValueError):
        EncoderConfig(temperature=0.0)
