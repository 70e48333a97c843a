"""Turn episode traces into SET subgraphs inside a MemoryStore."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .envsim import DIRS, Action
from .features import SymbolicFeatures
from .graph import EdgeKind, MemoryStore, NodeKind, SetSubgraph
from .trace import EpisodeTrace

WM_ID_START = 2 ** 40  # working-memory ids never collide with long-term ids


class Label(str, enum.Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"


@dataclass
class AffordanceRecord:
    node_id: int
    state_before: int
    action_id: int
    state_after: int
    reward: float


def label_episode(trace: EpisodeTrace, step_cap: int | None = None) -> Label:
    if step_cap is not None and len(trace.steps) > step_cap:
        return Label.FAILURE
    return Label.SUCCESS if trace.goal_reached else Label.FAILURE


def dedup_node(kind: NodeKind, feature, store: MemoryStore, tau_sim: float | None = None,
               meta: dict | None = None, ltm: MemoryStore | None = None) -> tuple[int, bool]:
    """Reuse the most similar node of ``kind`` if cosine >= tau_sim, else insert.

    With ``ltm`` given, long-term nodes are preferred and copied into ``store``
    under their long-term id.
    """
    f = np.asarray(feature, dtype=np.float64)
    if not np.any(f):
        raise ValueError("cannot deduplicate a zero feature vector")
    tau = store.tau_sim if tau_sim is None else tau_sim
    if ltm is not None:
        nid, sim = ltm.most_similar(kind, f)
        if nid is not None and sim >= tau:
            if nid not in store.nodes:
                store.import_node(ltm.nodes[nid])
            return nid, True
    nid, sim = store.most_similar(kind, f)
    if nid is not None and sim >= tau:
        return nid, True
    return store.add_node(kind, f, meta), False


def dedup_object(feature, store: MemoryStore, tau_sim: float | None = None) -> tuple[int, bool]:
    return dedup_node(NodeKind.OBJECT, feature, store, tau_sim)


def contact_target(obs: dict, action: int) -> dict | None:
    """Object touched by ``action`` from ``obs`` (None for turns / empty cells)."""
    action = Action(action)
    if action is Action.DROP:
        return {"kind": obs["carrying"]} if obs["carrying"] else None
    if action in (Action.TURN_LEFT, Action.TURN_RIGHT):
        return None
    dx, dy = DIRS[obs["heading"]]
    front = [obs["agent"][0] + dx, obs["agent"][1] + dy]
    return next((o for o in obs["objects"] if o["pos"] == front), None)


@dataclass
class SetBuilder:
    features: SymbolicFeatures
    interactions: bool = True

    def _objects(self, obs: dict) -> list[dict]:
        objs = list(obs["objects"])
        if obs.get("carrying"):
            objs.append({"kind": obs["carrying"]})
        return objs

    def _build(self, store: MemoryStore, observations: list[dict], transitions: list[tuple[int, float]],
               set_meta: dict, t0: int = 0, ltm: MemoryStore | None = None
               ) -> tuple[SetSubgraph, list[AffordanceRecord]]:
        feats = self.features
        sid = store.create_set(feats.set_root(), set_meta)
        key = set_meta.get("key", "")
        states = []
        for i, obs in enumerate(observations):
            t = t0 + i
            st = store.add_node(NodeKind.STATE, feats.state(obs),
                                {"t": t, "task": obs["task"], "key": f"{key}/s{t}"})
            store.add_member(sid, st)
            store.add_edge(sid, EdgeKind.HAS_STATE, st)
            for obj in self._objects(obs):
                oid, _ = dedup_node(NodeKind.OBJECT, feats.object(obj), store,
                                    meta={"kind": obj["kind"]}, ltm=ltm)
                store.add_member(sid, oid)
                store.add_edge(st, EdgeKind.HAS_OBJECT, oid)
            if states:
                store.add_edge(states[-1], EdgeKind.PRECEDES, st)
            states.append(st)
        records = []
        for i, (action, reward) in enumerate(transitions):
            t = t0 + i
            before, after = observations[i], observations[i + 1]
            aff = store.add_node(NodeKind.AFFORDANCE, feats.affordance(before, action, reward, after),
                                 {"t": t, "action": int(action), "reward": float(reward),
                                  "key": f"{key}/a{t}"})
            store.add_member(sid, aff)
            store.add_edge(states[i], EdgeKind.OUTCOME, aff)
            store.add_edge(aff, EdgeKind.INFLUENCES, states[i + 1])
            target = contact_target(before, action) if self.interactions else None
            if target is not None:
                oid, _ = dedup_node(NodeKind.OBJECT, feats.object(target), store,
                                    meta={"kind": target["kind"]}, ltm=ltm)
                iid, _ = dedup_node(NodeKind.INTERACTION, feats.interaction(action, target["kind"]), store,
                                    meta={"action": int(action), "target": target["kind"]}, ltm=ltm)
                store.add_member(sid, oid)
                store.add_member(sid, iid)
                store.add_edge(iid, EdgeKind.DEPENDS_ON, oid)
                store.add_edge(aff, EdgeKind.EMERGES_FROM, iid)
            records.append(AffordanceRecord(aff, states[i], int(action), states[i + 1], float(reward)))
        return store.get_set_subgraph(sid), records

    def build_set(self, trace: EpisodeTrace, store: MemoryStore, step_cap: int | None = None
                  ) -> tuple[SetSubgraph, list[AffordanceRecord]]:
        """One SET per episode: T+1 states (terminal included), T affordances."""
        label = label_episode(trace, step_cap)
        meta = {"task": trace.task, "label": label.value, "seed": trace.seed,
                "episode": trace.episode, "n_steps": len(trace.steps),
                "key": f"{trace.task}/{trace.seed}/{trace.episode}"}
        transitions = [(s.action, s.reward) for s in trace.steps]
        return self._build(store, trace.observations(), transitions, meta)

    def build_window(self, observations: list[dict], actions: list[int], rewards: list[float],
                     t: int, k: int, store: MemoryStore | None = None,
                     ltm: MemoryStore | None = None) -> tuple[MemoryStore, SetSubgraph]:
        """Partial SET over states max(0, t-k+1)..t under a temporary Set root.

        ``observations[i]`` is s_i, ``actions[i]``/``rewards[i]`` the transition
        s_i -> s_{i+1}. A fresh working-memory store is created unless given.
        """
        if t < 0 or k < 1:
            raise ValueError("need t >= 0 and k >= 1")
        if len(observations) <= t or len(actions) < t or len(rewards) < t:
            raise ValueError(f"history too short for t={t}")
        if store is None:
            d_in = ltm.d_in if ltm is not None else self.features.d_in
            tau = ltm.tau_sim if ltm is not None else 0.95
            store = MemoryStore(d_in, tau, id_start=WM_ID_START)
        lo = max(0, t - k + 1)
        obs = observations[lo:t + 1]
        transitions = list(zip(actions[lo:t], rewards[lo:t]))
        task = obs[-1]["task"]
        meta = {"task": task, "label": "", "temporary": True, "key": f"window/{task}/{lo}-{t}"}
        sub, _ = self._build(store, obs, transitions, meta, t0=lo, ltm=ltm)
        return store, sub


def build_memory(traces, builder: SetBuilder | None = None, d_in: int = 16, tau_sim: float = 0.95,
                 step_caps: dict[str, int] | None = None) -> MemoryStore:
    """Build every trace into one store (failed episodes are kept, labelled)."""
    builder = builder or SetBuilder(SymbolicFeatures(d_in))
    store = MemoryStore(d_in, tau_sim)
    for tr in traces:
        cap = (step_caps or {}).get(tr.task)
        builder.build_set(tr, store, step_cap=cap)
    return store
