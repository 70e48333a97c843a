"""Dual-view SET encoder (meta-path view + network-schema view) and its training.

Batches of SETs are encoded together: every meta-path subgraph of every SET
in the batch goes into one block-diagonal sparse adjacency, and the
schema-view attentions are computed with segment softmaxes, so one forward
pass serves a whole accumulation window.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import sparse

from .graph import EdgeKind, MemoryStore, NodeKind, SetSubgraph
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.checkpoint import load_tensors, save_tensors
from .nn.layers import GCN, MLP, Linear, Module, glorot, param
from .nn.losses import triplet_loss
from .nn.optim import Adam

NEG_INF = -1e9
KIND_ORDER = {k: i for i, k in enumerate(NodeKind)}


class InsufficientDataError(ValueError):
    pass


class DegenerateSetError(ValueError):
    pass


# -- meta-paths ----------------------------------------------------------------------
@dataclass(frozen=True)
class MetaPath:
    """Typed hop sequence starting at the Set node.

    Each hop is (edge kind, traverse forward?, target kind or None for any).
    """
    name: str
    hops: tuple[tuple[EdgeKind, bool, NodeKind | None], ...]

    def validate(self, schema) -> None:
        cur = {NodeKind.SET}
        for edge, forward, target in self.hops:
            nxt = set()
            for src, e, dst in schema:
                a, b = (src, dst) if forward else (dst, src)
                if e is edge and a in cur and (target is None or b is target):
                    nxt.add(b)
            if not nxt:
                raise ValueError(f"meta-path {self.name}: hop {edge.value} not schema-valid")
            cur = nxt


SET_ST_OBJ_INTER_AFF = MetaPath("SET-St-Obj-Inter-Aff", (
    (EdgeKind.HAS_STATE, True, NodeKind.STATE),
    (EdgeKind.HAS_OBJECT, True, NodeKind.OBJECT),
    (EdgeKind.DEPENDS_ON, False, NodeKind.INTERACTION),
    (EdgeKind.EMERGES_FROM, False, NodeKind.AFFORDANCE),
))
SET_ST_AFF_ST = MetaPath("SET-St-Aff-St", (
    (EdgeKind.HAS_STATE, True, NodeKind.STATE),
    (EdgeKind.OUTCOME, True, NodeKind.AFFORDANCE),
    (EdgeKind.INFLUENCES, True, NodeKind.STATE),
))
SET_MEMBER = MetaPath("SET-Member", ((EdgeKind.CONTAINS, True, None),))
DEFAULT_METAPATHS = (SET_ST_OBJ_INTER_AFF, SET_ST_AFF_ST)
FLAT_METAPATHS = (SET_MEMBER,)

# schema view: neighbour kind -> hop depth around the Set node
SCHEMA_HOPS = ((NodeKind.STATE, 1), (NodeKind.AFFORDANCE, 2), (NodeKind.OBJECT, 2), (NodeKind.INTERACTION, 3))


def _step(store: MemoryStore, node: int, hop, members: set[int]) -> list[int]:
    edge, forward, target = hop
    links = store.out_edges(node) if forward else store.in_edges(node)
    return [nb for k, nb in links
            if k is edge and nb in members and (target is None or store.kind(nb) is target)]


def _layers(store: MemoryStore, sub: SetSubgraph, path: MetaPath) -> list[set[int]]:
    """Per-hop node sets lying on at least one complete instance."""
    members = set(sub.node_ids)
    layers = [{sub.set_id}]
    for hop in path.hops:
        layers.append({nb for n in layers[-1] for nb in _step(store, n, hop, members)})
    valid = [set() for _ in layers]
    valid[-1] = layers[-1]
    for i in range(len(path.hops) - 1, -1, -1):
        valid[i] = {n for n in layers[i]
                    if any(nb in valid[i + 1] for nb in _step(store, n, path.hops[i], members))}
    return valid


def iter_metapath_instances(store: MemoryStore, sub: SetSubgraph, path: MetaPath) -> Iterator[tuple[int, ...]]:
    members = set(sub.node_ids)

    def walk(prefix):
        if len(prefix) == len(path.hops) + 1:
            yield tuple(prefix)
            return
        for nb in sorted(_step(store, prefix[-1], path.hops[len(prefix) - 1], members)):
            yield from walk(prefix + [nb])

    yield from walk([sub.set_id])


def count_metapath_instances(store: MemoryStore, sub: SetSubgraph, path: MetaPath) -> int:
    members = set(sub.node_ids)
    counts = {sub.set_id: 1}
    for hop in path.hops:
        nxt: dict[int, int] = {}
        for n, c in counts.items():
            for nb in _step(store, n, hop, members):
                nxt[nb] = nxt.get(nb, 0) + c
        counts = nxt
    return sum(counts.values())


def order_key(store: MemoryStore, nid: int):
    """Content-based ordering so encodings do not depend on id allocation."""
    n = store.nodes[nid]
    return (KIND_ORDER[n.kind], n.meta.get("t", -1), n.feature.tobytes(), nid)


def induced_adjacency(store: MemoryStore, node_ids: Sequence[int]) -> sparse.csr_matrix:
    """Symmetric normalized adjacency D^-1/2 (A + I) D^-1/2 over the induced subgraph."""
    index = {n: i for i, n in enumerate(node_ids)}
    rows, cols = [], []
    for n in node_ids:
        for _, nb in store.out_edges(n):
            j = index.get(nb)
            if j is not None and j != index[n]:
                rows += [index[n], j]
                cols += [j, index[n]]
    m = len(node_ids)
    a = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m)).tocsr()
    a.data[:] = 1.0  # collapse parallel edges
    a = a + sparse.identity(m, format="csr")
    d = np.asarray(a.sum(axis=1)).ravel()
    dinv = sparse.diags(1.0 / np.sqrt(d))
    return (dinv @ a @ dinv).tocsr()


def metapath_instances(store: MemoryStore, sub: SetSubgraph, path: MetaPath, limit: int | None = None
                       ) -> tuple[list[tuple[int, ...]], list[int], sparse.csr_matrix]:
    """Instances (up to ``limit``), visited nodes in canonical order, and their normalized adjacency."""
    instances = []
    for inst in iter_metapath_instances(store, sub, path):
        instances.append(inst)
        if limit is not None and len(instances) >= limit:
            break
    nodes = sorted(set().union(*_layers(store, sub, path)) if instances else set(),
                   key=lambda n: order_key(store, n))
    return instances, nodes, induced_adjacency(store, nodes)


# -- prepared (structure-only) SETs ----------------------------------------------------
@dataclass
class PreparedSet:
    set_id: int
    task: str
    label: str
    path_nodes: list[list[int]]                # per meta-path, canonical order, Set first if present
    path_adj: list[sparse.csr_matrix | None]
    schema_nodes: dict[NodeKind, list[int]]
    store: MemoryStore = field(repr=False, default=None)
    plans: dict = field(repr=False, default_factory=dict)

    def plan(self, tables: "EmbeddingTables", key) -> "LookupPlan":
        ck = (id(tables), tables.version, key)
        if ck not in self.plans:
            if key == "set":
                ids = [self.set_id]
            elif isinstance(key, int):
                ids = self.path_nodes[key]
            else:
                ids = self.schema_nodes[key]
            self.plans = {k: v for k, v in self.plans.items() if k[:2] == ck[:2]}
            self.plans[ck] = tables.plan(self.store, ids)
        return self.plans[ck]


def prepare_set(store: MemoryStore, set_id: int, metapaths: Sequence[MetaPath]) -> PreparedSet:
    sub = store.get_set_subgraph(set_id)
    nodes, adjs = [], []
    for path in metapaths:
        layers = _layers(store, sub, path)
        if not layers[-1]:
            nodes.append([])
            adjs.append(None)
            continue
        ids = sorted(set().union(*layers), key=lambda n: order_key(store, n))
        nodes.append(ids)
        adjs.append(induced_adjacency(store, ids))
    if all(not n for n in nodes):
        raise DegenerateSetError(f"SET {set_id} has no instance of any meta-path")
    schema_nodes = {}
    for kind, hops in SCHEMA_HOPS:
        ids = store.typed_neighbors(set_id, kind, hops, set_id=set_id)
        schema_nodes[kind] = sorted(ids, key=lambda n: order_key(store, n))
    return PreparedSet(set_id, sub.task, sub.label, nodes, adjs, schema_nodes, store)


# -- model -----------------------------------------------------------------------------
@dataclass
class EncoderConfig:
    d_in: int = 16
    hidden_dim: int = 64
    layers: int = 3
    heads: int = 8
    key_dim: int = 64
    metapaths: tuple[MetaPath, ...] = DEFAULT_METAPATHS
    lam: float = 0.5
    margin: float = 1.0
    temperature: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-4
    accumulation: int = 20
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.2
    trainable_kinds: tuple[NodeKind, ...] = (NodeKind.OBJECT, NodeKind.INTERACTION)
    seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "hidden_dim", "layers", "heads", "key_dim", "accumulation", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.margin < 0 or self.temperature <= 0:
            raise ValueError("margin must be >= 0 and temperature > 0")
        self.trainable_kinds = tuple(NodeKind(k) for k in self.trainable_kinds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metapaths"] = [p.name for p in self.metapaths]
        d["trainable_kinds"] = [k.value for k in self.trainable_kinds]
        return d


METAPATHS_BY_NAME = {p.name: p for p in (SET_ST_OBJ_INTER_AFF, SET_ST_AFF_ST, SET_MEMBER)}


def config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    if "metapaths" in d:
        d["metapaths"] = tuple(METAPATHS_BY_NAME[n] for n in d["metapaths"])
    if "trainable_kinds" in d:
        d["trainable_kinds"] = tuple(NodeKind(k) for k in d["trainable_kinds"])
    return EncoderConfig(**d)


@dataclass
class SetEmbedding:
    set_id: int
    z: np.ndarray
    z_mp: np.ndarray
    z_sc: np.ndarray


class EmbeddingTables(Module):
    """One table per node kind. Rows start as a fixed random projection of the
    node feature; rows of trainable kinds are parameters, other kinds (and ids
    not yet in a table) use the projection directly."""

    def __init__(self, d_in: int, d: int, trainable: Sequence[NodeKind], rng: np.random.Generator):
        self.proj = {k: glorot(rng, d_in, d) for k in NodeKind}
        self.trainable = tuple(trainable)
        self.tables = {k: param(np.zeros((0, d)), f"table.{k.value}") for k in self.trainable}
        self.index: dict[NodeKind, dict[int, int]] = {k: {} for k in self.trainable}
        self.d = d
        self.version = 0

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{t.name}": t for t in self.tables.values()}

    def project(self, store: MemoryStore, nid: int) -> np.ndarray:
        node = store.nodes[nid]
        return node.feature.astype(np.float64) @ self.proj[node.kind]

    def register(self, store: MemoryStore, ids: Sequence[int]) -> None:
        for kind in self.trainable:
            new = [n for n in ids if store.kind(n) is kind and n not in self.index[kind]]
            if not new:
                continue
            t = self.tables[kind]
            start = t.data.shape[0]
            rows = np.stack([self.project(store, n) for n in new])
            t.data = np.concatenate([t.data, rows]) if start else rows
            t.zero_grad()
            for i, n in enumerate(new):
                self.index[kind][n] = start + i
            self.version += 1

    def plan(self, store: MemoryStore, ids: Sequence[int]) -> "LookupPlan":
        n = len(ids)
        const = np.zeros((n, self.d))
        parts = {k: ([], []) for k in self.trainable}
        for i, nid in enumerate(ids):
            kind = store.kind(nid)
            row = self.index.get(kind, {}).get(nid)
            if row is None:
                const[i] = self.project(store, nid)
            else:
                parts[kind][0].append(i)
                parts[kind][1].append(row)
        return LookupPlan(const, {k: (np.asarray(p, dtype=np.int64), np.asarray(r, dtype=np.int64))
                                  for k, (p, r) in parts.items() if p})

    def gather(self, plan: "LookupPlan") -> Tensor:
        out = ad.Tensor(plan.const)
        n = plan.const.shape[0]
        for kind, (pos, rows) in plan.parts.items():
            sel = sparse.csr_matrix((np.ones(len(pos)), (pos, np.arange(len(pos)))), shape=(n, len(pos)))
            out = out + ad.sparse_matmul(sel, ad.take_rows(self.tables[kind], rows))
        return out

    def lookup(self, store: MemoryStore, ids: Sequence[int]) -> Tensor:
        """Stacked embeddings (len(ids) x d); trainable rows stay differentiable."""
        return self.gather(self.plan(store, ids))


@dataclass
class LookupPlan:
    const: np.ndarray                                      # rows not backed by a table
    parts: dict[NodeKind, tuple[np.ndarray, np.ndarray]]   # kind -> (positions, table rows)

    @staticmethod
    def concat(plans: Sequence["LookupPlan"]) -> "LookupPlan":
        const = np.concatenate([p.const for p in plans])
        parts: dict[NodeKind, tuple[list, list]] = {}
        offset = 0
        for p in plans:
            for k, (pos, rows) in p.parts.items():
                acc = parts.setdefault(k, ([], []))
                acc[0].append(pos + offset)
                acc[1].append(rows)
            offset += p.const.shape[0]
        return LookupPlan(const, {k: (np.concatenate(a), np.concatenate(b)) for k, (a, b) in parts.items()})


class EncoderState(Module):
    """All trainable encoder parameters."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        d, h, dk = config.hidden_dim, config.heads, config.key_dim
        self.config = config
        self.tables = EmbeddingTables(config.d_in, d, config.trainable_kinds, rng)
        self.gcns = [GCN([d] * (config.layers + 1), rng, name=f"mp{i}") for i in range(len(config.metapaths))]
        self.sem = Linear(d, d, rng, name="sem")
        self.sem_q = param(glorot(rng, d, 1).ravel(), "sem.q")
        self.sc_wq = param(glorot(rng, d, h * dk), "sc.wq")
        self.sc_wk = param(glorot(rng, d, h * dk), "sc.wk")
        self.sc_kind = Linear(d, d, rng, name="sc.kind")
        self.sc_kind_q = param(glorot(rng, d, 1).ravel(), "sc.kind.q")
        self.proj = MLP(d, d, d, rng, name="proj")

    # -- batched forward -------------------------------------------------------------
    def forward(self, batch: Sequence[PreparedSet]) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Returns (z, z_mp, z_sc, semantic attention) for the batch, each B x d (attention B x M)."""
        z_mp, sem = self.metapath_view(batch)
        z_sc = self.schema_view(batch)
        z = ad.l2_normalize(self.proj(z_mp))
        return z, z_mp, z_sc, sem

    def metapath_view(self, batch: Sequence[PreparedSet]) -> tuple[Tensor, Tensor]:
        B, d = len(batch), self.config.hidden_dim
        readouts, masks = [], []
        for p, gcn in enumerate(self.gcns):
            ids, blocks, set_pos, owners = [], [], [], []
            for b, ps in enumerate(batch):
                nodes = ps.path_nodes[p]
                if not nodes:
                    continue
                set_pos.append(len(ids) + nodes.index(ps.set_id))
                owners.append(b)
                ids.extend(nodes)
                blocks.append(ps.path_adj[p])
            mask = np.zeros(B, dtype=bool)
            mask[owners] = True
            masks.append(mask)
            if not ids:
                readouts.append(ad.Tensor(np.zeros((B, d))))
                continue
            h = self.tables.gather(LookupPlan.concat([ps.plan(self.tables, p) for ps in batch if ps.path_nodes[p]]))
            a = sparse.block_diag(blocks, format="csr")
            out = ad.take_rows(gcn(h, a), set_pos)
            if len(owners) < B:
                sel = sparse.csr_matrix((np.ones(len(owners)), (owners, np.arange(len(owners)))),
                                        shape=(B, len(owners)))
                out = ad.sparse_matmul(sel, out)
            readouts.append(out)
        # semantic attention over meta-paths, one probability vector per SET
        logits = ad.stack([ad.matmul(ad.tanh(self.sem(r)), self.sem_q) for r in readouts], axis=1)
        mask = np.stack(masks, axis=1)
        if not mask.any(axis=1).all():
            raise DegenerateSetError("a SET has no meta-path instances")
        beta = ad.softmax(logits + np.where(mask, 0.0, NEG_INF), axis=1)
        z = None
        for p, r in enumerate(readouts):
            term = r * ad.reshape(beta[:, p], (B, 1))
            z = term if z is None else z + term
        return z, beta

    def schema_view(self, batch: Sequence[PreparedSet]) -> Tensor:
        cfg = self.config
        B, d, H, dk = len(batch), cfg.hidden_dim, cfg.heads, cfg.key_dim
        e_set = self.tables.gather(LookupPlan.concat([ps.plan(self.tables, "set") for ps in batch]))
        q = ad.reshape(ad.matmul(e_set, self.sc_wq), (B, 1, H, dk))
        wk = ad.reshape(self.sc_wk, (1, d, H, dk))
        # fold keys into the query: logits[n, h] = sum_i e[n, i] * r[b(n), i, h]
        r = ad.tsum(wk * q, axis=3)  # B x d x H
        kind_vecs, kind_logits, kind_mask = [], [], []
        for kind, _ in SCHEMA_HOPS:
            ids, seg = [], []
            for b, ps in enumerate(batch):
                ids.extend(ps.schema_nodes[kind])
                seg.extend([b] * len(ps.schema_nodes[kind]))
            present = np.zeros(B, dtype=bool)
            present[seg] = True
            kind_mask.append(present)
            if not ids:
                kind_vecs.append(ad.Tensor(np.zeros((B, H, d))))
                kind_logits.append(ad.Tensor(np.zeros((B, H))))
                continue
            n = len(ids)
            seg = np.asarray(seg)
            e = self.tables.gather(LookupPlan.concat([ps.plan(self.tables, kind) for ps in batch]))
            logits = ad.segment_bilinear(e, r, seg) * (1.0 / math.sqrt(dk))
            seg_max = np.full((B, H), -np.inf)
            np.maximum.at(seg_max, seg, logits.data)
            ex = ad.exp(logits - seg_max[seg])
            s = sparse.csr_matrix((np.ones(n), (seg, np.arange(n))), shape=(B, n))
            w = ex / ad.take_rows(ad.sparse_matmul(s, ex), seg)
            v = ad.segment_weighted_sum(w, e, seg, B)
            kind_vecs.append(v)
            u = ad.tanh(self.sc_kind(ad.reshape(v, (B * H, d))))
            kind_logits.append(ad.reshape(ad.matmul(u, self.sc_kind_q), (B, H)))
        mask = np.stack(kind_mask, axis=1)  # B x kinds
        logits = ad.stack(kind_logits, axis=2) + np.where(mask, 0.0, NEG_INF)[:, None, :]
        beta = ad.softmax(logits, axis=2)
        z = None
        for k, v in enumerate(kind_vecs):
            term = v * ad.reshape(beta[:, :, k], (B, H, 1))
            z = term if z is None else z + term
        return ad.mean(z, axis=1)

    # -- persistence -----------------------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters().items()}
        for k, m in self.tables.proj.items():
            out[f"proj.{k.value}"] = m
        return out

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"config": self.config.to_dict(),
                "index": {k.value: {str(n): r for n, r in idx.items()} for k, idx in self.tables.index.items()}}
        meta.update(extra_meta or {})
        save_tensors(path, self.state_tensors(), meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["EncoderState", dict]:
        tensors, meta = load_tensors(path)
        state = cls(config_from_dict(meta["config"]))
        for name, p in state.named_parameters().items():
            p.data = tensors[name].copy()
        for k in state.tables.proj:
            state.tables.proj[k] = tensors[f"proj.{k.value}"]
        state.tables.index = {NodeKind(k): {int(n): r for n, r in idx.items()} for k, idx in meta["index"].items()}
        return state, meta

    def checksum(self) -> float:
        return float(sum(np.abs(p.data).sum() + p.data.sum() for p in self.parameters()))


# -- encoding helpers -----------------------------------------------------------------
def encode_prepared(state: EncoderState, prepared: Sequence[PreparedSet], chunk: int = 64) -> list[SetEmbedding]:
    out = []
    with ad.no_grad():
        for i in range(0, len(prepared), chunk):
            part = prepared[i:i + chunk]
            z, z_mp, z_sc, _ = state.forward(part)
            for j, ps in enumerate(part):
                out.append(SetEmbedding(ps.set_id, z.data[j].copy(), z_mp.data[j].copy(), z_sc.data[j].copy()))
    return out


def encode_set(store: MemoryStore, set_id: int, state: EncoderState) -> SetEmbedding:
    return encode_prepared(state, [prepare_set(store, set_id, state.config.metapaths)])[0]


def encode_store(store: MemoryStore, state: EncoderState, set_ids: Sequence[int] | None = None
                 ) -> list[SetEmbedding]:
    ids = store.set_ids() if set_ids is None else list(set_ids)
    return encode_prepared(state, [prepare_set(store, s, state.config.metapaths) for s in ids])


# -- losses and sampling --------------------------------------------------------------
def hybrid_loss(z_a: Tensor, z_p: Tensor, z_n: Tensor, mp: Tensor, sc: Tensor,
                lam: float, margin: float, temperature: float) -> Tensor:
    """lam * triplet + (1 - lam) * mean cross-view info-NCE over the batch rows of mp/sc."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    trip = triplet_loss(ad.euclidean(z_a, z_p), ad.euclidean(z_a, z_n), margin)
    sims = ad.matmul(ad.l2_normalize(mp), ad.transpose(ad.l2_normalize(sc)))
    logits = sims * (1.0 / temperature)
    n = mp.shape[0]
    diag = ad.tsum(logits * np.eye(n), axis=1)
    nce = ad.mean(ad.logsumexp(logits, axis=1) - diag)
    return trip * lam + nce * (1.0 - lam)


@dataclass
class SetInfo:
    set_id: int
    task: str
    label: str


def set_infos(store: MemoryStore, ids: Sequence[int] | None = None) -> list[SetInfo]:
    ids = store.set_ids() if ids is None else ids
    return [SetInfo(s, str(store.nodes[s].meta.get("task", "")), str(store.nodes[s].meta.get("label", "")))
            for s in ids]


def sample_triplets(infos: Sequence[SetInfo], batch: int, rng: np.random.Generator,
                    anchors: Sequence[int] | None = None) -> list[tuple[int, int, int]]:
    """(anchor, positive, negative) set ids; negatives split evenly between
    same-task failures and other-task SETs when both pools exist."""
    succ: dict[str, list[int]] = {}
    fail: dict[str, list[int]] = {}
    for i in infos:
        (succ if i.label == "Success" else fail).setdefault(i.task, []).append(i.set_id)
    tasks = sorted(t for t, ids in succ.items() if len(ids) >= 2)
    if not tasks:
        raise InsufficientDataError("positive pool empty: no task has two successful SETs")
    all_ids = [i.set_id for i in infos]
    task_of = {i.set_id: i.task for i in infos}
    if anchors is None:
        pool = [s for t in tasks for s in succ[t]]
        anchors = [pool[int(j)] for j in rng.integers(0, len(pool), size=batch)]
    out = []
    for a in anchors:
        t = task_of[a]
        if t not in tasks:
            raise InsufficientDataError(f"positive pool empty for task {t!r}")
        pos_pool = [s for s in succ[t] if s != a]
        p = pos_pool[int(rng.integers(len(pos_pool)))]
        same_fail = fail.get(t, [])
        other = [s for s in all_ids if task_of[s] != t]
        pools = [x for x in (same_fail, other) if x]
        if not pools:
            raise InsufficientDataError(f"negative pools empty for task {t!r}: "
                                        "no same-task failures and no other-task SETs")
        neg_pool = pools[int(rng.integers(len(pools)))]
        out.append((a, p, neg_pool[int(rng.integers(len(neg_pool)))]))
    return out


def stratified_split(infos: Sequence[SetInfo], val_fraction: float, rng: np.random.Generator
                     ) -> tuple[list[SetInfo], list[SetInfo]]:
    groups: dict[tuple[str, str], list[SetInfo]] = {}
    for i in infos:
        groups.setdefault((i.task, i.label), []).append(i)
    train, val = [], []
    for key in sorted(groups):
        g = groups[key]
        order = rng.permutation(len(g))
        n_val = int(round(val_fraction * len(g)))
        val += [g[j] for j in order[:n_val]]
        train += [g[j] for j in order[n_val:]]
    return sorted(train, key=lambda i: i.set_id), sorted(val, key=lambda i: i.set_id)


# -- training -------------------------------------------------------------------------
@dataclass
class TrainResult:
    state: EncoderState
    log: list[dict]
    best_epoch: int
    train_ids: list[int]
    val_ids: list[int]


def triplet_batch_loss(z: Tensor, z_mp: Tensor, z_sc: Tensor, idx: np.ndarray,
                       lam: float, margin: float, temperature: float) -> Tensor:
    """Mean of :func:`hybrid_loss` over triplets given as row indices (T x 3)."""
    idx = np.asarray(idx, dtype=np.int64)
    T, d = idx.shape[0], z.shape[1]
    za, zp, zn = (ad.take_rows(z, idx[:, j]) for j in range(3))
    d_ap = ad.sqrt(ad.tsum((za - zp) * (za - zp), axis=1) + 1e-12)
    d_an = ad.sqrt(ad.tsum((za - zn) * (za - zn), axis=1) + 1e-12)
    trip = triplet_loss(d_ap, d_an, margin)
    mp = ad.l2_normalize(ad.reshape(ad.take_rows(z_mp, idx.ravel()), (T, 3, d)))
    sc = ad.l2_normalize(ad.reshape(ad.take_rows(z_sc, idx.ravel()), (T, 3, d)))
    logits = ad.tsum(ad.reshape(mp, (T, 3, 1, d)) * ad.reshape(sc, (T, 1, 3, d)), axis=3) * (1.0 / temperature)
    diag = ad.tsum(logits * np.eye(3), axis=2)
    nce = ad.mean(ad.logsumexp(logits, axis=2) - diag, axis=1)
    return ad.mean(trip * lam + nce * (1.0 - lam))


def batch_loss(state: EncoderState, prepared: dict[int, PreparedSet], triplets: Sequence[tuple[int, int, int]]
               ) -> Tensor:
    """Mean hybrid loss over ``triplets``, encoding each distinct SET once."""
    cfg = state.config
    uniq = sorted({s for t in triplets for s in t})
    pos = {s: i for i, s in enumerate(uniq)}
    z, z_mp, z_sc, _ = state.forward([prepared[s] for s in uniq])
    idx = np.array([[pos[a], pos[p], pos[n]] for a, p, n in triplets])
    return triplet_batch_loss(z, z_mp, z_sc, idx, cfg.lam, cfg.margin, cfg.temperature)


def train_encoder(store: MemoryStore, config: EncoderConfig, log_path: str | Path | None = None,
                  checkpoint_path: str | Path | None = None, state: EncoderState | None = None,
                  set_ids: Sequence[int] | None = None, verbose: bool = False) -> TrainResult:
    """Hybrid-loss training with a stratified train/validation split and early stopping.

    Each epoch uses every training success once as an anchor. Gradients of a
    window of ``accumulation`` triplets are averaged before each Adam update.
    The parameters of the best validation epoch are restored at the end.
    """
    rng = np.random.default_rng(config.seed)
    state = state or EncoderState(config, np.random.default_rng(config.seed))
    infos = set_infos(store, set_ids)
    train, val = stratified_split(infos, config.val_fraction, rng)
    # fail early on insufficient data, listing the empty pool
    sample_triplets(train, 1, np.random.default_rng(0))
    sample_triplets(val, 1, np.random.default_rng(0))
    prepared = {i.set_id: prepare_set(store, i.set_id, config.metapaths) for i in infos}
    for ps in prepared.values():
        for nodes in ps.path_nodes:
            state.tables.register(store, nodes)
        for nodes in ps.schema_nodes.values():
            state.tables.register(store, nodes)
    params = state.named_parameters()
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay, accumulation_window=1,
               sparse=tuple(n for n in params if n.startswith("tables.")))
    val_succ = [i.set_id for i in val if i.label == "Success"]
    val_triplets = sample_triplets(val, len(val_succ), np.random.default_rng(config.seed + 7919),
                                   anchors=val_succ)
    train_succ = [i.set_id for i in train if i.label == "Success"]

    def evaluate(triplets) -> float:
        with ad.no_grad():
            vals = [batch_loss(state, prepared, triplets[i:i + 64]).item() * len(triplets[i:i + 64])
                    for i in range(0, len(triplets), 64)]
        return float(sum(vals) / len(triplets))

    log, best, best_epoch, best_params, stale = [], math.inf, 0, None, 0
    for epoch in range(1, config.max_epochs + 1):
        anchors = [train_succ[j] for j in rng.permutation(len(train_succ))]
        triplets = sample_triplets(train, len(anchors), rng, anchors=anchors)
        losses = []
        for i in range(0, len(triplets), config.accumulation):
            window = triplets[i:i + config.accumulation]
            opt.zero_grad()
            loss = batch_loss(state, prepared, window)
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(window))
        train_loss = float(sum(losses) / len(triplets))
        val_loss = evaluate(val_triplets)
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lambda": config.lam,
                    "margin": config.margin, "temperature": config.temperature, "seed": config.seed})
        if verbose:
            print(f"epoch {epoch:3d} train {train_loss:.4f} val {val_loss:.4f}")
        if val_loss < best - 1e-12:
            best, best_epoch, stale = val_loss, epoch, 0
            best_params = {n: p.data.copy() for n, p in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_params is not None:
        for n, p in params.items():
            p.data = best_params[n]
    if log_path is not None:
        write_training_log(log_path, log)
    if checkpoint_path is not None:
        state.save(checkpoint_path, {"best_epoch": best_epoch})
    return TrainResult(state, log, best_epoch, [i.set_id for i in train], [i.set_id for i in val])


LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lambda", "margin", "temperature", "seed")


def write_training_log(path: str | Path, log: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in log:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})
