"""Embedding-space analysis: k-means, cluster-quality indices, PCA, and graph ablations."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .graph import FLAT_SCHEMA, EdgeKind, MemoryStore, NodeKind

log = logging.getLogger(__name__)


class ClusteringError(ValueError):
    pass


# -- clustering -----------------------------------------------------------------------
def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def kmeans_objective(points, assignments, centroids) -> float:
    x = _as_points(points)
    return float(((x - np.asarray(centroids)[np.asarray(assignments)]) ** 2).sum())


def _kmeans_once(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int):
    n = x.shape[0]
    centroids = [x[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = cdist(x, np.array(centroids), "sqeuclidean").min(axis=1)
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centroids.append(x[idx])
    c = np.array(centroids)
    assign = None
    for _ in range(max_iter):
        new = cdist(x, c, "sqeuclidean").argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = x[assign == j]
            if len(members):
                c[j] = members.mean(axis=0)
            else:  # re-seed an empty cluster at the worst-fit point
                far = int(((x - c[assign]) ** 2).sum(axis=1).argmax())
                c[j] = x[far]
                assign[far] = j
    return assign, c


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 10):
    """k-means++ seeding + Lloyd iterations; best of ``n_init`` restarts.

    Returns (assignments, centroids).
    """
    x = _as_points(points)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ClusteringError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        assign, c = _kmeans_once(x, k, rng, max_iter)
        obj = kmeans_objective(x, assign, c)
        if best is None or obj < best[0] - 1e-12:
            best = (obj, assign, c)
    return best[1], best[2]


def _labels(assignments) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(assignments)
    uniq, inv = np.unique(a, return_inverse=True)
    return uniq, inv


def silhouette(points, assignments) -> float:
    """Mean silhouette; points in singleton clusters score 0."""
    x = _as_points(points)
    uniq, lab = _labels(assignments)
    if len(uniq) < 2:
        raise ClusteringError("silhouette needs at least two clusters")
    d = cdist(x, x)
    scores = np.zeros(len(x))
    for i in range(len(x)):
        own = lab == lab[i]
        if own.sum() == 1:
            continue
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, lab == j].mean() for j in range(len(uniq)) if j != lab[i])
        m = max(a, b)
        scores[i] = (b - a) / m if m > 0 else 0.0
    return float(scores.mean())


def davies_bouldin(points, assignments) -> float:
    x = _as_points(points)
    uniq, lab = _labels(assignments)
    if len(uniq) < 2:
        raise ClusteringError("Davies-Bouldin needs at least two clusters")
    cents = np.array([x[lab == j].mean(axis=0) for j in range(len(uniq))])
    spread = np.array([np.linalg.norm(x[lab == j] - cents[j], axis=1).mean() for j in range(len(uniq))])
    m = cdist(cents, cents)
    total = 0.0
    for i in range(len(uniq)):
        ratios = []
        for j in range(len(uniq)):
            if i == j:
                continue
            if m[i, j] == 0:
                raise ClusteringError(f"clusters {uniq[i]} and {uniq[j]} have coincident centroids")
            ratios.append((spread[i] + spread[j]) / m[i, j])
        total += max(ratios)
    return float(total / len(uniq))


def dunn(points, assignments) -> float:
    x = _as_points(points)
    uniq, lab = _labels(assignments)
    if len(uniq) < 2:
        raise ClusteringError("Dunn index needs at least two clusters")
    d = cdist(x, x)
    same = lab[:, None] == lab[None, :]
    diameter = d[same].max()
    if diameter == 0:
        raise ClusteringError("Dunn index undefined: every cluster has zero diameter")
    return float(d[~same].min() / diameter)


def pca2(points) -> tuple[np.ndarray, np.ndarray]:
    """Projection on the top two principal components and their variance fractions.

    Each component's sign is fixed so its first nonzero loading is positive.
    """
    x = _as_points(points)
    if x.shape[0] < 2:
        raise ClusteringError("PCA needs at least two points")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    total = vals.sum()
    if total <= 0:
        raise ClusteringError("PCA of rank-0 data")
    comps = np.zeros((x.shape[1], 2))
    fracs = np.zeros(2)
    for j in range(min(2, x.shape[1])):
        v = vecs[:, j]
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        comps[:, j] = v
        fracs[j] = vals[j] / total
    return xc @ comps, fracs


# -- reports --------------------------------------------------------------------------
@dataclass
class ClusterReport:
    margin: float
    seed: int
    silhouette: dict[str, float] = field(default_factory=dict)   # keyed by "Success"/"Failure"
    dbi: dict[str, float] = field(default_factory=dict)
    dunn: dict[str, float] = field(default_factory=dict)
    assignments: dict[str, list[int]] = field(default_factory=dict)
    n_points: dict[str, int] = field(default_factory=dict)


def cluster_report(z: np.ndarray, tasks: Sequence[str], labels: Sequence[str], margin: float = float("nan"),
                   seed: int = 0) -> ClusterReport:
    """Per outcome label: restrict to those points, k-means with k = number of tasks, score."""
    z = np.asarray(z, dtype=np.float64)
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    rep = ClusterReport(margin=margin, seed=seed)
    for lab in ("Success", "Failure"):
        idx = [i for i, l in enumerate(labels) if l == lab]
        k = len({tasks[i] for i in idx})
        rep.n_points[lab] = len(idx)
        if k < 2 or len(idx) <= k:
            rep.silhouette[lab] = rep.dbi[lab] = rep.dunn[lab] = float("nan")
            continue
        assign, _ = kmeans(z[idx], k, seed)
        rep.assignments[lab] = [int(a) for a in assign]
        rep.silhouette[lab] = silhouette(z[idx], assign) if len(set(assign)) > 1 else float("nan")
        for name, fn in (("dbi", davies_bouldin), ("dunn", dunn)):
            try:
                getattr(rep, name)[lab] = fn(z[idx], assign)
            except ClusteringError:
                getattr(rep, name)[lab] = float("nan")
    return rep


REPORT_FIELDS = ("margin", "seed", "silhouette_success", "silhouette_failure", "dbi_success",
                 "dbi_failure", "dunn_success", "dunn_failure")


def report_row(rep: ClusterReport) -> dict:
    row = {"margin": rep.margin, "seed": rep.seed}
    for name in ("silhouette", "dbi", "dunn"):
        for lab in ("Success", "Failure"):
            row[f"{name}_{lab.lower()}"] = getattr(rep, name).get(lab, float("nan"))
    return row


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else v


def write_csv(path: str | Path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in fields})


def write_projection(path: str | Path, z: np.ndarray, tasks: Sequence[str], labels: Sequence[str]) -> None:
    xy, _ = pca2(z)
    rows = [{"x": float(a), "y": float(b), "task": t, "outcome": l} for (a, b), t, l in zip(xy, tasks, labels)]
    write_csv(path, rows, ("x", "y", "task", "outcome"))


# -- ablations ------------------------------------------------------------------------
def _states(store: MemoryStore, sid: int) -> list[int]:
    return store.get_set_subgraph(sid).state_ids


def _outgoing_affordance(store: MemoryStore, st: int) -> int | None:
    return next((d for k, d in store.out_edges(st) if k is EdgeKind.OUTCOME), None)


def _drop_orphans(store: MemoryStore, sid: int) -> None:
    """Shared members left without any edge inside the SET lose their membership."""
    members = store.members(sid)
    for nid in list(members):
        if store.kind(nid) not in (NodeKind.OBJECT, NodeKind.INTERACTION):
            continue
        linked = any(nb in members for _, nb in store.out_edges(nid) + store.in_edges(nid))
        if not linked:
            store.remove_member(sid, nid)


def remove_states(store: MemoryStore, fraction: float, seed: int = 0) -> MemoryStore:
    """Delete round(fraction * n) random states per SET with their outgoing affordances;
    Precedes and Influences are re-chained across the gaps."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    out = store.copy()
    rng = np.random.default_rng(seed)
    for sid in out.set_ids():
        states = _states(out, sid)
        r = int(round(fraction * len(states)))
        if r == 0:
            continue
        if r >= len(states):
            log.warning("SET %d: removing %d of %d states would empty it; skipped", sid, r, len(states))
            continue
        drop = set(int(states[i]) for i in rng.choice(len(states), size=r, replace=False))
        keep = [s for s in states if s not in drop]
        incoming = {}
        for st in states:
            for k, src in out.in_edges(st):
                if k is EdgeKind.INFLUENCES:
                    incoming[st] = src
        for st in states:
            if st in drop:
                aff = _outgoing_affordance(out, st)
                if aff is not None:
                    out.remove_node(aff)
        for a, b in zip(states[:-1], states[1:]):
            out.remove_edge(a, EdgeKind.PRECEDES, b)
        # re-target affordances that pointed into a removed state
        for st in states:
            if st in drop and st in incoming and incoming[st] in out.nodes:
                later = [s for s in keep if states.index(s) > states.index(st)]
                if later:
                    out.add_edge(incoming[st], EdgeKind.INFLUENCES, later[0])
        for st in drop:
            out.remove_node(st)
        for a, b in zip(keep[:-1], keep[1:]):
            out.add_edge(a, EdgeKind.PRECEDES, b)
        _drop_orphans(out, sid)
    return out


def shuffle_states(store: MemoryStore, seed: int = 0) -> MemoryStore:
    """Permute the temporal order of states per SET; affordances follow the new order."""
    out = store.copy()
    rng = np.random.default_rng(seed)
    for sid in out.set_ids():
        states = _states(out, sid)
        if len(states) < 2:
            continue
        affs = []
        for st in states[:-1]:
            affs.append(_outgoing_affordance(out, st))
        for a, b in zip(states[:-1], states[1:]):
            out.remove_edge(a, EdgeKind.PRECEDES, b)
        for st, aff in zip(states[:-1], affs):
            if aff is None:
                continue
            out.remove_edge(st, EdgeKind.OUTCOME, aff)
            for k, d in list(out.out_edges(aff)):
                if k is EdgeKind.INFLUENCES:
                    out.remove_edge(aff, k, d)
        order = [states[i] for i in rng.permutation(len(states))]
        for t, st in enumerate(order):
            out.nodes[st].meta["t"] = t
        for a, b in zip(order[:-1], order[1:]):
            out.add_edge(a, EdgeKind.PRECEDES, b)
        for j, aff in enumerate(affs):
            if aff is not None:
                out.add_edge(order[j], EdgeKind.OUTCOME, aff)
                out.add_edge(aff, EdgeKind.INFLUENCES, order[j + 1])
    return out


def flatten(store: MemoryStore) -> MemoryStore:
    """Single-level copy: every Set links to each member via Contains; features unchanged."""
    out = MemoryStore(store.d_in, store.tau_sim, schema=FLAT_SCHEMA, id_start=store.id_start)
    for nid in sorted(store.nodes):
        out.import_node(store.nodes[nid])
    for sid in store.set_ids():
        out.register_set(sid)
        for m in store.set_index[sid]:
            out.add_member(sid, m)
            out.add_edge(sid, EdgeKind.CONTAINS, m)
    out.next_id = store.next_id
    return out


def ablate(store: MemoryStore, mode: str, fraction: float = 0.4, seed: int = 0) -> MemoryStore:
    if mode == "remove":
        return remove_states(store, fraction, seed)
    if mode == "shuffle":
        return shuffle_states(store, seed)
    if mode == "flatten":
        return flatten(store)
    raise ValueError(f"unknown ablation {mode!r} (remove | shuffle | flatten)")


def summarize(values: Sequence[float]) -> str:
    v = [x for x in values if not math.isnan(x)]
    return f"{np.mean(v):.4f}±{np.std(v):.4f}" if v else "nan"
