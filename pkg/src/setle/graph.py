"""Typed heterogeneous graph store holding SET subgraphs with shared nodes.

Node ids come from a monotone per-store counter. Object and Interaction nodes
may be members of many SETs; every other node belongs to exactly one.
"""
from __future__ import annotations

import base64
import copy
import enum
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

FORMAT_VERSION = "1"
FILE_SUFFIX = ".setlegraph.jsonl"


class NodeKind(str, enum.Enum):
    OBJECT = "Object"
    INTERACTION = "Interaction"
    STATE = "State"
    AFFORDANCE = "Affordance"
    SET = "Set"


class EdgeKind(str, enum.Enum):
    HAS_STATE = "HasState"
    HAS_OBJECT = "HasObject"
    DEPENDS_ON = "DependsOn"
    EMERGES_FROM = "EmergesFrom"
    INFLUENCES = "Influences"
    OUTCOME = "Outcome"
    PRECEDES = "Precedes"
    # single generic relation used only by flattened (ablated) stores
    CONTAINS = "Contains"


K, E = NodeKind, EdgeKind

HIERARCHICAL_SCHEMA: frozenset[tuple[NodeKind, EdgeKind, NodeKind]] = frozenset({
    (K.SET, E.HAS_STATE, K.STATE),
    (K.STATE, E.HAS_OBJECT, K.OBJECT),
    (K.INTERACTION, E.DEPENDS_ON, K.OBJECT),
    (K.AFFORDANCE, E.EMERGES_FROM, K.INTERACTION),
    (K.AFFORDANCE, E.INFLUENCES, K.STATE),
    (K.STATE, E.OUTCOME, K.AFFORDANCE),
    (K.STATE, E.PRECEDES, K.STATE),
})

FLAT_SCHEMA: frozenset[tuple[NodeKind, EdgeKind, NodeKind]] = frozenset(
    (K.SET, E.CONTAINS, k) for k in (K.STATE, K.OBJECT, K.INTERACTION, K.AFFORDANCE))

SHARED_KINDS = (K.OBJECT, K.INTERACTION)


class GraphError(ValueError):
    pass


class SchemaError(GraphError):
    pass


class GraphFormatError(GraphError):
    pass


@dataclass
class Node:
    id: int
    kind: NodeKind
    feature: np.ndarray  # float32
    meta: dict[str, Any] = field(default_factory=dict)


@dataclass
class SetSubgraph:
    set_id: int
    state_ids: list[int]
    label: str
    task: str
    node_ids: list[int] = field(default_factory=list)
    edges: list[tuple[int, EdgeKind, int]] = field(default_factory=list)

    def kind_counts(self, store: "MemoryStore") -> dict[NodeKind, int]:
        counts = {k: 0 for k in NodeKind}
        for nid in self.node_ids:
            counts[store.nodes[nid].kind] += 1
        return counts

    def edge_counts(self) -> dict[EdgeKind, int]:
        counts: dict[EdgeKind, int] = {}
        for _, kind, _ in self.edges:
            counts[kind] = counts.get(kind, 0) + 1
        return counts


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


class MemoryStore:
    """Hierarchical memory: nodes, typed edges, and a SET membership index."""

    def __init__(self, d_in: int | Mapping[NodeKind, int] = 16, tau_sim: float = 0.95,
                 schema: Iterable[tuple[NodeKind, EdgeKind, NodeKind]] = HIERARCHICAL_SCHEMA,
                 id_start: int = 0):
        if isinstance(d_in, int):
            d_in = {k: d_in for k in NodeKind}
        self.d_in: dict[NodeKind, int] = {NodeKind(k): int(v) for k, v in d_in.items()}
        self.tau_sim = float(tau_sim)
        self.schema = frozenset((NodeKind(a), EdgeKind(b), NodeKind(c)) for a, b, c in schema)
        self.id_start = int(id_start)
        self.next_id = int(id_start)
        self.nodes: dict[int, Node] = {}
        self.edges: list[tuple[int, EdgeKind, int]] = []
        self.set_index: dict[int, list[int]] = {}
        self.frozen = False
        self._edge_set: set[tuple[int, EdgeKind, int]] = set()
        self._out: dict[int, list[tuple[EdgeKind, int]]] = {}
        self._in: dict[int, list[tuple[EdgeKind, int]]] = {}
        self._membership: dict[int, set[int]] = {}
        self._kind_cache: dict[NodeKind, tuple[np.ndarray, np.ndarray]] = {}

    # -- mutation -----------------------------------------------------------------
    def _check_writable(self) -> None:
        if self.frozen:
            raise GraphError("store snapshot is read-only")

    def add_node(self, kind: NodeKind, feature, meta: Mapping[str, Any] | None = None,
                 node_id: int | None = None) -> int:
        self._check_writable()
        kind = NodeKind(kind)
        feat = np.asarray(feature, dtype=np.float32).reshape(-1)
        if feat.shape[0] != self.d_in[kind]:
            raise GraphError(f"{kind.value} feature has dimension {feat.shape[0]}, "
                             f"store expects {self.d_in[kind]}")
        if node_id is None:
            node_id = self.next_id
        elif node_id in self.nodes:
            raise GraphError(f"node id {node_id} already exists")
        self.next_id = max(self.next_id, node_id + 1)
        self.nodes[node_id] = Node(node_id, kind, feat.copy(), dict(meta or {}))
        self._out[node_id] = []
        self._in[node_id] = []
        self._membership[node_id] = set()
        self._kind_cache.pop(kind, None)
        return node_id

    def import_node(self, node: Node, meta_update: Mapping[str, Any] | None = None) -> int:
        """Copy a node from another store keeping its id."""
        meta = dict(node.meta)
        meta.update(meta_update or {})
        return self.add_node(node.kind, node.feature, meta, node_id=node.id)

    def add_edge(self, src: int, kind: EdgeKind, dst: int) -> None:
        self._check_writable()
        kind = EdgeKind(kind)
        for nid in (src, dst):
            if nid not in self.nodes:
                raise GraphError(f"dangling edge endpoint {nid}")
        row = (self.nodes[src].kind, kind, self.nodes[dst].kind)
        if row not in self.schema:
            raise SchemaError(f"edge {row[0].value} -{kind.value}-> {row[2].value} not in schema")
        key = (src, kind, dst)
        if key in self._edge_set:
            return
        if kind is EdgeKind.PRECEDES:
            self._check_precedes(src, dst)
        self._edge_set.add(key)
        self.edges.append(key)
        self._out[src].append((kind, dst))
        self._in[dst].append((kind, src))

    def _check_precedes(self, src: int, dst: int) -> None:
        if src == dst:
            raise SchemaError("Precedes self-loop")
        if any(k is EdgeKind.PRECEDES for k, _ in self._out[src]):
            raise SchemaError(f"state {src} already has a successor")
        if any(k is EdgeKind.PRECEDES for k, _ in self._in[dst]):
            raise SchemaError(f"state {dst} already has a predecessor")
        cur = dst
        while True:
            nxt = [d for k, d in self._out[cur] if k is EdgeKind.PRECEDES]
            if not nxt:
                break
            cur = nxt[0]
            if cur == src:
                raise SchemaError("Precedes edge would close a cycle")

    def remove_edge(self, src: int, kind: EdgeKind, dst: int) -> None:
        self._check_writable()
        key = (src, EdgeKind(kind), dst)
        if key not in self._edge_set:
            return
        self._edge_set.discard(key)
        self.edges.remove(key)
        self._out[src].remove((key[1], dst))
        self._in[dst].remove((key[1], src))

    def remove_node(self, nid: int) -> None:
        self._check_writable()
        for kind, dst in list(self._out[nid]):
            self.remove_edge(nid, kind, dst)
        for kind, src in list(self._in[nid]):
            self.remove_edge(src, kind, nid)
        for sid in list(self._membership[nid]):
            if sid in self.set_index and nid in self.set_index[sid]:   # a Set is not in its own list
                self.set_index[sid].remove(nid)
        kind = self.nodes[nid].kind
        del self.nodes[nid], self._out[nid], self._in[nid], self._membership[nid]
        self.set_index.pop(nid, None)
        self._kind_cache.pop(kind, None)

    def create_set(self, feature, meta: Mapping[str, Any] | None = None) -> int:
        sid = self.add_node(NodeKind.SET, feature, meta)
        self.set_index[sid] = []
        self._membership[sid].add(sid)
        return sid

    def register_set(self, set_id: int) -> None:
        """Index an existing Set node (used when copying stores)."""
        if self.nodes[set_id].kind is not NodeKind.SET:
            raise GraphError(f"node {set_id} is not a Set node")
        self.set_index.setdefault(set_id, [])
        self._membership[set_id].add(set_id)

    def remove_member(self, set_id: int, node_id: int) -> None:
        """Drop a membership; the node is deleted once no SET references it."""
        self._check_writable()
        if set_id in self._membership.get(node_id, ()):
            self.set_index[set_id].remove(node_id)
            self._membership[node_id].discard(set_id)
        if not self._membership[node_id]:
            self.remove_node(node_id)

    def add_member(self, set_id: int, node_id: int) -> None:
        self._check_writable()
        if set_id not in self.set_index:
            raise GraphError(f"{set_id} is not a Set node")
        if node_id not in self.nodes:
            raise GraphError(f"unknown node {node_id}")
        if set_id in self._membership[node_id]:
            return
        kind = self.nodes[node_id].kind
        if kind not in SHARED_KINDS and self._membership[node_id]:
            raise GraphError(f"{kind.value} node {node_id} already belongs to a SET")
        self.set_index[set_id].append(node_id)
        self._membership[node_id].add(set_id)

    def delete_set(self, set_id: int) -> None:
        """Drop a SET; shared nodes still referenced elsewhere survive."""
        self._check_writable()
        if set_id not in self.set_index:
            raise GraphError(f"{set_id} is not a Set node")
        members = list(self.set_index[set_id])
        for nid in members:
            self._membership[nid].discard(set_id)
        for nid in members:
            if not self._membership[nid]:
                self.remove_node(nid)
        self.remove_node(set_id)

    # -- queries ------------------------------------------------------------------
    def kind(self, nid: int) -> NodeKind:
        return self.nodes[nid].kind

    def out_edges(self, nid: int) -> list[tuple[EdgeKind, int]]:
        return self._out[nid]

    def in_edges(self, nid: int) -> list[tuple[EdgeKind, int]]:
        return self._in[nid]

    def sets_of(self, nid: int) -> set[int]:
        return set(self._membership.get(nid, ()))

    def set_ids(self) -> list[int]:
        return sorted(self.set_index)

    def members(self, set_id: int) -> set[int]:
        return set(self.set_index[set_id]) | {set_id}

    def ids_of_kind(self, kind: NodeKind) -> list[int]:
        return sorted(n.id for n in self.nodes.values() if n.kind is kind)

    def get_set_subgraph(self, set_id: int) -> SetSubgraph:
        if set_id not in self.nodes:
            raise GraphError(f"unknown node {set_id}")
        if self.nodes[set_id].kind is not NodeKind.SET or set_id not in self.set_index:
            raise GraphError(f"node {set_id} is not a Set node")
        members = self.members(set_id)
        edges = sorted(((s, k, d) for s in members for k, d in self._out[s] if d in members),
                       key=lambda e: (e[0], e[1].value, e[2]))
        states = [n for n in members if self.nodes[n].kind is NodeKind.STATE]
        states.sort(key=lambda n: (self.nodes[n].meta.get("t", 0), n))
        meta = self.nodes[set_id].meta
        return SetSubgraph(set_id=set_id, state_ids=states, label=str(meta.get("label", "")),
                           task=str(meta.get("task", "")), node_ids=sorted(members), edges=edges)

    def typed_neighbors(self, node: int, kind: NodeKind, max_hops: int,
                        set_id: int | None = None) -> list[int]:
        """Nodes of ``kind`` within ``max_hops`` undirected hops, restricted to one SET.

        The SET is ``set_id`` if given, the node itself if it is a Set, otherwise
        the lowest-id SET containing the node.
        """
        if node not in self.nodes:
            raise GraphError(f"unknown node {node}")
        if max_hops < 1:
            raise GraphError("max_hops must be >= 1")
        if set_id is None:
            if node in self.set_index:
                set_id = node
            else:
                owners = self._membership[node]
                if not owners:
                    raise GraphError(f"node {node} belongs to no SET")
                set_id = min(owners)
        members = self.members(set_id)
        kind = NodeKind(kind)
        dist = {node: 0}
        queue = deque([node])
        while queue:
            cur = queue.popleft()
            if dist[cur] == max_hops:
                continue
            for _, nb in self._out[cur] + self._in[cur]:
                if nb in members and nb not in dist:
                    dist[nb] = dist[cur] + 1
                    queue.append(nb)
        return sorted(n for n in dist if n != node and self.nodes[n].kind is kind)

    def most_similar(self, kind: NodeKind, feature) -> tuple[int | None, float]:
        """Id and cosine of the closest stored node of ``kind``; ties -> lowest id."""
        kind = NodeKind(kind)
        if kind not in self._kind_cache:
            ids = np.array(self.ids_of_kind(kind), dtype=np.int64)
            feats = np.array([self.nodes[i].feature for i in ids], dtype=np.float64).reshape(
                len(ids), self.d_in[kind])
            norms = np.linalg.norm(feats, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            self._kind_cache[kind] = (ids, feats / norms)
        ids, unit = self._kind_cache[kind]
        if ids.size == 0:
            return None, -1.0
        f = np.asarray(feature, dtype=np.float64)
        sims = unit @ (f / np.linalg.norm(f))
        best = int(np.argmax(sims))  # argmax returns the first maximum -> lowest id
        return int(ids[best]), float(sims[best])

    # -- validation ---------------------------------------------------------------
    def schema_violations(self) -> list[tuple[int, EdgeKind, int]]:
        bad = []
        for s, k, d in self.edges:
            if s not in self.nodes or d not in self.nodes:
                bad.append((s, k, d))
            elif (self.nodes[s].kind, k, self.nodes[d].kind) not in self.schema:
                bad.append((s, k, d))
        return bad

    def is_weakly_connected(self, set_id: int) -> bool:
        members = self.members(set_id)
        seen = {set_id}
        queue = deque([set_id])
        while queue:
            cur = queue.popleft()
            for _, nb in self._out[cur] + self._in[cur]:
                if nb in members and nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        return seen == members

    def max_pairwise_similarity(self, kind: NodeKind = NodeKind.OBJECT) -> float:
        ids = self.ids_of_kind(kind)
        if len(ids) < 2:
            return -1.0
        f = np.array([self.nodes[i].feature for i in ids], dtype=np.float64)
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        sims = f @ f.T
        np.fill_diagonal(sims, -np.inf)
        return float(sims.max())

    def validate(self) -> None:
        bad = self.schema_violations()
        if bad:
            raise SchemaError(f"{len(bad)} edges violate the schema, first: {bad[0]}")
        for sid in self.set_index:
            if not self.is_weakly_connected(sid):
                raise GraphError(f"SET {sid} is not weakly connected")

    # -- copies -------------------------------------------------------------------
    def copy(self) -> "MemoryStore":
        other = copy.deepcopy(self)
        other.frozen = False
        return other

    def snapshot(self) -> "MemoryStore":
        """Immutable copy for concurrent readers."""
        other = copy.deepcopy(self)
        other.frozen = True
        return other

    # -- persistence --------------------------------------------------------------
    def persist(self, path: str | Path) -> None:
        lines = [{
            "record": "header", "format": "setlegraph", "version": FORMAT_VERSION,
            "d_in": {k.value: v for k, v in sorted(self.d_in.items(), key=lambda kv: kv[0].value)},
            "tau_sim": self.tau_sim, "id_start": self.id_start, "next_id": self.next_id,
            "schema": sorted([a.value, b.value, c.value] for a, b, c in self.schema),
        }]
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            lines.append({"record": "node", "id": nid, "kind": n.kind.value,
                          "feature": base64.b64encode(n.feature.astype("<f4").tobytes()).decode("ascii"),
                          "meta": n.meta})
        for s, k, d in self.edges:
            lines.append({"record": "edge", "src": s, "kind": k.value, "dst": d})
        for sid in sorted(self.set_index):
            lines.append({"record": "set", "id": sid, "members": list(self.set_index[sid])})
        lines.append({"record": "end", "nodes": len(self.nodes), "edges": len(self.edges),
                      "sets": len(self.set_index)})
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in lines:
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MemoryStore":
        raw = Path(path).read_bytes()
        store: MemoryStore | None = None
        offset = 0
        finished = False
        for lineno, line in enumerate(raw.split(b"\n"), start=1):
            start = offset
            offset += len(line) + 1
            if not line.strip():
                continue
            if finished:
                raise GraphFormatError(f"{path}:{lineno}: data after end record (offset {start})")
            try:
                rec = json.loads(line)
                kind = rec["record"]
            except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
                raise GraphFormatError(f"{path}:{lineno}: malformed record at offset {start}") from exc
            try:
                if store is None:
                    if kind != "header" or rec.get("format") != "setlegraph":
                        raise GraphFormatError(f"{path}:{lineno}: missing header at offset {start}")
                    if rec.get("version") != FORMAT_VERSION:
                        raise GraphFormatError(
                            f"{path}:{lineno}: unsupported version {rec.get('version')!r}, "
                            f"expected {FORMAT_VERSION!r}")
                    store = cls(d_in={NodeKind(k): v for k, v in rec["d_in"].items()},
                                tau_sim=rec["tau_sim"],
                                schema=[tuple(r) for r in rec["schema"]], id_start=rec["id_start"])
                    store._declared_next = rec["next_id"]
                elif kind == "node":
                    feat = np.frombuffer(base64.b64decode(rec["feature"], validate=True), dtype="<f4")
                    store.add_node(NodeKind(rec["kind"]), feat, rec["meta"], node_id=rec["id"])
                elif kind == "edge":
                    store.add_edge(rec["src"], EdgeKind(rec["kind"]), rec["dst"])
                elif kind == "set":
                    sid = rec["id"]
                    store.register_set(sid)
                    for m in rec["members"]:
                        store.add_member(sid, m)
                elif kind == "end":
                    got = (len(store.nodes), len(store.edges), len(store.set_index))
                    want = (rec["nodes"], rec["edges"], rec["sets"])
                    if got != want:
                        raise GraphFormatError(f"{path}:{lineno}: record counts {got} != declared {want}")
                    finished = True
                else:
                    raise GraphFormatError(f"{path}:{lineno}: unknown record {kind!r} at offset {start}")
            except GraphFormatError:
                raise
            except (GraphError, KeyError, ValueError, TypeError) as exc:
                raise GraphFormatError(f"{path}:{lineno}: invalid {kind} record at offset {start}: {exc}") from exc
        if store is None:
            raise GraphFormatError(f"{path}: empty file")
        if not finished:
            raise GraphFormatError(f"{path}: truncated, no end record (file ends at offset {len(raw)})")
        store.next_id = max(store.next_id, store._declared_next)
        del store._declared_next
        return store
