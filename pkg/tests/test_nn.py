import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import sparse

from setle.nn import (GCN, MLP, Adam, Adapter, Linear, Tensor, gcn_layer, grad_check, hard_update, info_nce,
                      info_nce_value, normalized_adjacency, polyak_update, triplet_loss, triplet_value)
from setle.nn import autodiff as ad
from setle.nn.checkpoint import CheckpointError, load_tensors, save_tensors
from setle.nn.layers import attention_pool

rng0 = np.random.default_rng(0)


def p(shape, rng=rng0, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# -- autodiff -------------------------------------------------------------------------
def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)
    assert grad_check(lambda: x * x, [x]) < 1e-8


OPS = {
    "matmul": lambda a, b: ad.tsum(ad.matmul(a, b)),
    "elu": lambda a, b: ad.tsum(ad.elu(a) * ad.transpose(b)),
    "tanh_div": lambda a, b: ad.tsum(ad.tanh(a) / (1.5 + ad.power(a, 2))),
    "softmax": lambda a, b: ad.tsum(ad.softmax(a, axis=1) * np.arange(4.0)),
    "logsumexp": lambda a, b: ad.tsum(ad.logsumexp(a, axis=0)),
    "l2norm": lambda a, b: ad.tsum(ad.l2_normalize(a) * np.linspace(-1, 1, 4)),
    "sqrt_exp": lambda a, b: ad.tsum(ad.sqrt(ad.exp(a) + 1.0)),
    "concat_stack": lambda a, b: ad.tsum(ad.stack([a[0], a[1]]) * ad.reshape(ad.concat([a[2], a[0]]), (2, 4))),
    "take_rows": lambda a, b: ad.tsum(ad.take_rows(a, np.array([0, 2, 2, 1])) ** 2),
    "reshape_mean": lambda a, b: ad.mean(ad.reshape(a, (2, 6)) * np.arange(12.0).reshape(2, 6)),
    "cosine": lambda a, b: ad.cosine(a[0], a[1]) + ad.euclidean(a[1], a[2]),
    "huber": lambda a, b: ad.tsum(ad.huber(a * 2.0)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(1)
    a, b = p((3, 4), rng), p((4, 3), rng)
    err = grad_check(lambda: OPS[name](a, b), [a, b])
    assert err < 1e-6, name


def test_segment_ops_gradients():
    rng = np.random.default_rng(2)
    e, r, w = p((5, 3), rng), p((2, 3, 4), rng), p((5, 4), rng)
    seg = np.array([0, 0, 1, 1, 1])
    assert grad_check(lambda: ad.tsum(ad.segment_bilinear(e, r, seg) ** 2), [e, r]) < 1e-6
    assert grad_check(lambda: ad.tsum(ad.segment_weighted_sum(w, e, seg, 2) ** 2), [w, e]) < 1e-6


def test_sparse_matmul_gradient():
    rng = np.random.default_rng(3)
    a = sparse.random(5, 5, density=0.5, random_state=3, format="csr")
    h = p((5, 2), rng)
    assert grad_check(lambda: ad.tsum(ad.sparse_matmul(a, h) ** 2), [h]) < 1e-6


def test_no_grad_builds_no_graph():
    a = p((2, 2))
    with ad.no_grad():
        y = ad.tsum(a * a)
    assert not y.requires_grad


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_is_distribution(xs):
    s = ad.softmax(Tensor(np.array(xs))).data
    assert np.all(s >= 0) and abs(s.sum() - 1) < 1e-9


# -- layers ---------------------------------------------------------------------------
def test_gcn_single_node_identity():
    h = np.array([[1.0, 2.0]])
    w = np.array([[1.0, 0.5], [0.0, 1.0]])
    out = gcn_layer(h, normalized_adjacency(np.zeros((1, 1))), w, "identity")
    np.testing.assert_allclose(out.data, h @ w)


def test_gcn_two_nodes_hand():
    h = np.array([[1.0, 0.0], [0.0, 2.0]])
    w = np.eye(2)
    a = normalized_adjacency(np.array([[0, 1], [1, 0]]))
    out = gcn_layer(h, a, w, "identity").data
    np.testing.assert_allclose(out, np.vstack([0.5 * (h[0] + h[1])] * 2))
    elu = gcn_layer(h, a, -w, "elu").data
    np.testing.assert_allclose(elu, np.expm1(-0.5 * (h[0] + h[1]))[None].repeat(2, 0))


def test_gcn_zero_weight_and_identity_adjacency():
    h = rng0.normal(size=(4, 3))
    assert np.all(gcn_layer(h, np.eye(4), np.zeros((3, 2)), "identity").data == 0)
    w = rng0.normal(size=(3, 2))
    assert np.array_equal(gcn_layer(h, np.eye(4), w, "identity").data, h @ w)
    with pytest.raises(ValueError):
        gcn_layer(h, np.eye(3), w)


def test_gcn_stack_and_attention_gradients():
    rng = np.random.default_rng(4)
    g = GCN([3, 3, 3, 3], rng)
    h = p((4, 3), rng)
    adj = normalized_adjacency(np.array([[0, 1, 0, 0], [1, 0, 1, 1], [0, 1, 0, 0], [0, 1, 0, 0]]))
    assert grad_check(lambda: ad.tsum(g(h, adj) ** 2), g.parameters() + [h]) < 1e-6
    q, k, v = p((3,), rng), p((5, 3), rng), p((5, 2), rng)
    assert grad_check(lambda: ad.tsum(attention_pool(q, k, v, 0.5)[0] ** 2), [q, k, v]) < 1e-6


def test_adapter_modes():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    assert np.allclose(Adapter(4, rng, init="identity")(x).data, x)
    z = Adapter(4, rng, init="zeros")
    z.fc2.bias.data[:] = 0.25
    assert np.allclose(z(x).data, 0.25)
    a = Adapter(2, rng)
    a.fc1.weight.data[...] = [[1.0, 0.0], [2.0, -1.0]]
    a.fc1.bias.data[...] = [0.0, 1.0]
    a.fc2.weight.data[...] = [[1.0, 1.0], [0.0, 2.0]]
    a.fc2.bias.data[...] = [0.5, 0.0]
    v = np.array([1.0, 1.0])
    hid = v @ a.fc1.weight.data + a.fc1.bias.data          # [3, 0]
    hid = np.where(hid > 0, hid, np.expm1(hid))
    np.testing.assert_allclose(a(v[None]).data[0], hid @ a.fc2.weight.data + a.fc2.bias.data)
    with pytest.raises(ValueError):
        a(np.ones((1, 3)))
    assert grad_check(lambda: ad.tsum(a(Tensor(x[:, :2])) ** 2), a.parameters()) < 1e-6


# -- losses ---------------------------------------------------------------------------
def test_triplet_examples():
    assert triplet_value(0.4, 0.4, 0.7) == pytest.approx(0.7)
    assert triplet_value(0.2, 1.0, 0.5) == 0.0
    assert triplet_value(0.5, 0.8, 0.6) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        triplet_loss(0.1, 0.2, -1.0)


def test_triplet_hinge_subgradient_zero():
    d_ap = Tensor(np.array(0.5), requires_grad=True)
    d_an = Tensor(np.array(1.0), requires_grad=True)
    triplet_loss(d_ap, d_an, 0.5).backward()   # exactly at the kink
    assert d_ap.grad == 0.0 and d_an.grad == 0.0


@given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_triplet_monotone_in_margin(d_ap, d_an, m1, m2):
    lo, hi = sorted((m1, m2))
    assert triplet_value(d_ap, d_an, lo) <= triplet_value(d_ap, d_an, hi)


def test_info_nce_examples():
    assert info_nce_value(0.3, [0.3] * 4, 0.5) == pytest.approx(math.log(4))
    assert info_nce_value(50.0, [50.0, 0.0, -1.0], 0.1) == pytest.approx(0.0, abs=1e-12)
    assert info_nce_value(0.7, [0.7], 0.5) == 0.0
    with pytest.raises(ValueError):
        info_nce_value(0.1, [], 0.5)
    t = info_nce(1, Tensor(np.array([0.2, 0.9, -0.3])), 0.5)
    assert t.item() == pytest.approx(info_nce_value(0.9, [0.2, 0.9, -0.3], 0.5))


# -- optimizer ------------------------------------------------------------------------
def test_adam_zero_grad_no_change():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1, weight_decay=0.0)
    x.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(x.data, [1.0, -2.0])


def test_adam_first_step():
    x = Tensor(np.array(0.0), requires_grad=True)
    opt = Adam({"x": x}, lr=0.001, weight_decay=0.0)
    x.grad = np.array(1.0)
    opt.step()
    assert x.data == pytest.approx(-0.001)


def test_adam_nan_gradient_names_parameter():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"weights.x": x})
    x.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="weights.x"):
        opt.step()


def test_accumulation_window():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.01, accumulation_window=20)
    updates = []
    for i in range(1, 61):
        x.grad = np.array([1.0])
        if opt.step():
            updates.append(i)
    assert updates == [20, 40, 60]


def test_accumulation_equals_mean_gradient():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    oa = Adam({"w": a}, lr=0.01, accumulation_window=4)
    ob = Adam({"w": b}, lr=0.01)
    grads = [np.array([1.0, -1.0]), np.array([2.0, 0.0]), np.array([0.5, 3.0]), np.array([-1.0, 1.0])]
    for g in grads:
        a.grad = g.copy()
        oa.step()
    b.grad = np.mean(grads, axis=0)
    ob.step()
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-15)


def test_adam_quadratic_bowl_monotone():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.05, weight_decay=0.0)
    losses = []
    for _ in range(100):
        opt.zero_grad()
        loss = ad.tsum(x * x)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses[5:60], losses[6:61]))
    assert losses[-1] < 1e-2 * losses[0]


def test_sparse_rows_untouched():
    t = Tensor(np.ones((3, 2)), requires_grad=True)
    opt = Adam({"tables.t": t}, lr=0.1, sparse=("tables.t",))
    t.grad = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    opt.step()
    assert np.array_equal(t.data[1:], np.ones((2, 2))) and not np.array_equal(t.data[0], [1.0, 1.0])


def test_polyak():
    tgt = {"w": Tensor(np.zeros(3))}
    onl = {"w": Tensor(np.ones(3))}
    polyak_update(tgt, onl, 0.005)
    assert np.allclose(tgt["w"].data, 0.005)
    for n in range(2, 50):
        polyak_update(tgt, onl, 0.005)
        assert np.allclose(tgt["w"].data, 1 - (1 - 0.005) ** n, atol=1e-14)
    hard_update(tgt, onl)
    assert np.array_equal(tgt["w"].data, onl["w"].data)
    with pytest.raises(ValueError):
        polyak_update({"w": Tensor(np.zeros(2))}, onl, 0.5)
    with pytest.raises(ValueError):
        polyak_update(tgt, onl, 0.0)


# -- checkpoint -----------------------------------------------------------------------
def test_checkpoint_roundtrip(tmp_path):
    tensors = {"b": rng0.normal(size=(2, 3)), "a": np.arange(4.0)}
    save_tensors(tmp_path / "c.bin", tensors, {"k": 1})
    save_tensors(tmp_path / "d.bin", dict(reversed(list(tensors.items()))), {"k": 1})
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()
    back, meta = load_tensors(tmp_path / "c.bin")
    assert meta == {"k": 1}
    np.testing.assert_array_equal(back["b"], tensors["b"].astype(np.float32))
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="offset"):
        load_tensors(tmp_path / "t.bin")
