"""Long-term memory matching and working-memory enrichment.

Pipeline per agent step: encode the partial window -> penalized top-K match
against encoded long-term SETs -> collect Object/Affordance/Interaction
candidates missing from working memory -> attention over candidates ->
inject the top-N into working memory (tagged ``source=setle``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import (DegenerateSetError, EncoderState, SetEmbedding, encode_prepared, prepare_set)
from .graph import EdgeKind, MemoryStore, NodeKind, SetSubgraph
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import Module, glorot, param

CANDIDATE_KINDS = (NodeKind.OBJECT, NodeKind.INTERACTION, NodeKind.AFFORDANCE)
SOURCE_TAG = "setle"


@dataclass
class EnrichmentConfig:
    top_k: int = 5
    n_inject: int = 5
    window: int = 4
    penalty: float = 0.9
    tau_attn: float = 1.0

    def __post_init__(self):
        if self.top_k < 1 or self.n_inject < 0 or self.window < 1:
            raise ValueError("top_k and window must be >= 1, n_inject >= 0")
        if not 0.0 < self.penalty <= 1.0:
            raise ValueError("penalty must lie in (0, 1]")
        if self.tau_attn <= 0:
            raise ValueError("tau_attn must be positive")


@dataclass
class LtmEntry:
    set_id: int
    z: np.ndarray
    label: str
    task: str


@dataclass
class LtmIndex:
    entries: list[LtmEntry] = field(default_factory=list)
    match_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self._refresh()

    def _refresh(self) -> None:
        if self.entries:
            z = np.stack([e.z for e in self.entries])
            self._unit = z / np.linalg.norm(z, axis=1, keepdims=True)
        else:
            self._unit = np.zeros((0, 0))
        self._ids = np.array([e.set_id for e in self.entries], dtype=np.int64)

    @classmethod
    def from_embeddings(cls, store: MemoryStore, embeddings: Sequence[SetEmbedding],
                        labels: Sequence[str] | None = None) -> "LtmIndex":
        entries = []
        for e in embeddings:
            meta = store.nodes[e.set_id].meta
            if labels is not None and meta.get("label") not in labels:
                continue
            z = e.z / np.linalg.norm(e.z)
            entries.append(LtmEntry(e.set_id, z, str(meta.get("label", "")), str(meta.get("task", ""))))
        entries.sort(key=lambda e: e.set_id)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def reset_counts(self) -> None:
        self.match_counts.clear()


def match_topk(z_query, index: LtmIndex, k: int, penalty: float) -> list[tuple[int, float]]:
    """Top-k entries by cos(z_query, z_i) * penalty**count_i; ties -> lower set id.

    Increments the match count of every returned entry.
    """
    if len(index) == 0:
        raise ValueError("LTM index is empty")
    if not 0.0 < penalty <= 1.0:
        raise ValueError("penalty must lie in (0, 1]")
    q = np.asarray(z_query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    cos = index._unit @ q
    counts = np.array([index.match_counts.get(int(s), 0) for s in index._ids])
    score = cos * penalty ** counts
    order = np.lexsort((index._ids, -score))[:k]
    out = [(int(index._ids[i]), float(score[i])) for i in order]
    for sid, _ in out:
        index.match_counts[sid] = index.match_counts.get(sid, 0) + 1
    return out


def extract_candidates(ltm: MemoryStore, matched: Sequence[int], wm: MemoryStore,
                       tau_sim: float | None = None) -> list[int]:
    """Object/Interaction/Affordance members of the matched SETs absent from ``wm``.

    Objects are also treated as present when a WM object is at least
    ``tau_sim``-similar. Order: node kind, then id.
    """
    tau = ltm.tau_sim if tau_sim is None else tau_sim
    seen: set[int] = set()
    for sid in matched:
        for nid in ltm.set_index[sid]:
            if ltm.kind(nid) in CANDIDATE_KINDS and nid not in wm.nodes:
                seen.add(nid)
    out = []
    for nid in seen:
        node = ltm.nodes[nid]
        if node.kind is NodeKind.OBJECT:
            _, sim = wm.most_similar(NodeKind.OBJECT, node.feature)
            if sim >= tau:
                continue
        out.append(nid)
    order = {k: i for i, k in enumerate(CANDIDATE_KINDS)}
    return sorted(out, key=lambda n: (order[ltm.kind(n)], n))


def attention_scores(z_query, candidates, w_q, w_k, tau_attn: float = 1.0) -> Tensor:
    """softmax_i(<W_q z, W_k c_i> / tau) over the rows of ``candidates``."""
    cands = ad.as_tensor(candidates)
    if cands.data.ndim != 2 or cands.shape[0] == 0:
        raise ValueError("attention needs a non-empty 2-D candidate matrix")
    if tau_attn <= 0:
        raise ValueError("tau_attn must be positive")
    q = ad.matmul(w_q, z_query)                 # d_attn
    keys = ad.matmul(cands, ad.transpose(w_k))  # n x d_attn
    return ad.softmax(ad.matmul(keys, q) * (1.0 / tau_attn))


class RetrievalAttention(Module):
    def __init__(self, d: int, rng: np.random.Generator, d_attn: int | None = None):
        d_attn = d_attn or d
        self.w_q = param(glorot(rng, d_attn, d), "retrieval.w_q")
        self.w_k = param(glorot(rng, d_attn, d), "retrieval.w_k")

    def __call__(self, z_query, candidates, tau_attn: float = 1.0) -> Tensor:
        return attention_scores(z_query, candidates, self.w_q, self.w_k, tau_attn)


@dataclass
class InjectedNode:
    node_id: int
    attached_at: int
    score: float
    source: str = SOURCE_TAG


@dataclass
class EnrichResult:
    wm: MemoryStore
    window_set: int
    z_query: np.ndarray | None
    matched: list[tuple[int, float]] = field(default_factory=list)
    candidates: list[int] = field(default_factory=list)
    weights: np.ndarray | None = None
    injected: list[InjectedNode] = field(default_factory=list)

    def report(self, t: int | None = None) -> dict:
        return {
            "t": t,
            "query_norm": None if self.z_query is None else float(np.linalg.norm(self.z_query)),
            "topk": [[sid, round(s, 10)] for sid, s in self.matched],
            "n_candidates": len(self.candidates),
            "injected": [[n.node_id, round(n.score, 10)] for n in self.injected],
        }


def _inject(wm: MemoryStore, ltm: MemoryStore, window_set: int, state: int, nid: int, score: float) -> bool:
    """Copy one LTM node into WM attached to ``state``; False if it cannot be attached."""
    node = ltm.nodes[nid]
    edges = []
    if node.kind is NodeKind.OBJECT:
        edges.append((state, EdgeKind.HAS_OBJECT, nid))
    elif node.kind is NodeKind.AFFORDANCE:
        edges.append((nid, EdgeKind.INFLUENCES, state))
    # carry over LTM edges whose other endpoint is already in working memory
    for k, dst in ltm.out_edges(nid):
        if dst in wm.nodes and (node.kind, k, wm.kind(dst)) in wm.schema:
            edges.append((nid, k, dst))
    for k, src in ltm.in_edges(nid):
        if src in wm.nodes and (wm.kind(src), k, node.kind) in wm.schema and k is not EdgeKind.HAS_OBJECT:
            edges.append((src, k, nid))
    if node.kind is NodeKind.INTERACTION and not any(k is EdgeKind.DEPENDS_ON for _, k, _ in edges):
        return False
    wm.import_node(node, {"source": SOURCE_TAG, "attached_at": state, "attention": float(score)})
    wm.add_member(window_set, nid)
    for src, k, dst in edges:
        wm.add_edge(src, k, dst)
    return True


def enrich(wm: MemoryStore, window: SetSubgraph, index: LtmIndex, ltm: MemoryStore, encoder: EncoderState,
           attention: RetrievalAttention, config: EnrichmentConfig, z_query: np.ndarray | None = None
           ) -> EnrichResult:
    """Match the window against LTM and inject the top-N candidates into ``wm`` (in place)."""
    res = EnrichResult(wm, window.set_id, z_query)
    if len(index) == 0 or config.n_inject == 0:
        return res
    if z_query is None:
        try:
            z_query = encode_prepared(encoder, [prepare_set(wm, window.set_id, encoder.config.metapaths)])[0].z
        except DegenerateSetError:
            return res
    res.z_query = z_query
    res.matched = match_topk(z_query, index, config.top_k, config.penalty)
    res.candidates = extract_candidates(ltm, [s for s, _ in res.matched], wm)
    if not res.candidates:
        return res
    with ad.no_grad():
        cand = encoder.tables.lookup(ltm, res.candidates)
        w = attention(ad.Tensor(z_query), cand, config.tau_attn).data
    res.weights = w
    top = sorted(np.lexsort((np.arange(len(w)), -w))[:config.n_inject].tolist())
    state = window.state_ids[-1]
    # objects first so interactions can attach to freshly injected objects
    for i in sorted(top, key=lambda i: CANDIDATE_KINDS.index(ltm.kind(res.candidates[i]))):
        nid = res.candidates[i]
        if _inject(wm, ltm, window.set_id, state, nid, float(w[i])):
            res.injected.append(InjectedNode(nid, state, float(w[i])))
    return res


def injected_readout(encoder: EncoderState, attention: RetrievalAttention, ltm: MemoryStore,
                     z_query, candidates: Sequence[int], injected: Sequence[int], tau_attn: float) -> Tensor:
    """Attention-weighted sum of injected-node embeddings (differentiable in W_q, W_k and tables)."""
    cand = encoder.tables.lookup(ltm, list(candidates))
    w = attention(z_query, cand, tau_attn)
    pos = [list(candidates).index(n) for n in injected]
    return ad.matmul(w[pos], ad.take_rows(cand, pos))


def adapter_forward(z, adapter) -> Tensor:
    return adapter(z)


class EnrichmentLog:
    """JSON-lines writer for per-step enrichment reports."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8", newline="\n")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    def close(self) -> None:
        self.fh.close()
