"""End-to-end experiment pipelines shared by the CLI, the scripts and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .agent import AgentConfig, MemoryContext, RunLog, Strategy, run_metrics, run_training
from .builder import Label, build_memory
from .encoder import (FLAT_METAPATHS, EncoderConfig, EncoderState, TrainResult, encode_store, set_infos,
                      train_encoder)
from .envsim import random_rollout
from .evaluation import ClusterReport, ablate, cluster_report
from .graph import MemoryStore
from .retrieval import EnrichmentConfig, LtmIndex, RetrievalAttention
from .trace import EpisodeTrace

# Random-policy step caps per task: successes must be reachable but not the norm.
COLLECTION_CAPS = {"Empty-5": 20, "Empty-6": 40, "DoorKey-5": 80, "DoorKey-6": 100}
TASKS = tuple(COLLECTION_CAPS)


def collect_balanced(n_success: int, n_failure: int, seed: int = 0, tasks: Sequence[str] = TASKS,
                     caps: dict[str, int] | None = None, max_episodes: int = 200_000) -> list[EpisodeTrace]:
    """Random rollouts per task until ``n_success`` successes and ``n_failure`` failures are kept."""
    caps = caps or COLLECTION_CAPS
    out = []
    for task in tasks:
        cap = caps[task]
        s = f = ep = 0
        while s < n_success or f < n_failure:
            if ep >= max_episodes:
                raise RuntimeError(f"{task}: only {s} successes / {f} failures after {ep} episodes")
            tr = random_rollout(task, seed, cap, ep)
            ep += 1
            if tr.goal_reached and s < n_success:
                out.append(tr)
                s += 1
            elif not tr.goal_reached and f < n_failure:
                out.append(tr)
                f += 1
    return out


def held_out_split(store: MemoryStore, n_train: int) -> tuple[list[int], list[int]]:
    """First ``n_train`` SETs (by id) of every (task, label) group train; the rest are held out."""
    groups: dict[tuple[str, str], list[int]] = {}
    for info in set_infos(store):
        groups.setdefault((info.task, info.label), []).append(info.set_id)
    train, test = [], []
    for key in sorted(groups):
        ids = sorted(groups[key])
        train += ids[:n_train]
        test += ids[n_train:]
    return sorted(train), sorted(test)


def evaluate(store: MemoryStore, state: EncoderState, set_ids: Sequence[int], margin: float = float("nan"),
             seed: int = 0) -> ClusterReport:
    emb = encode_store(store, state, list(set_ids))
    infos = {i.set_id: i for i in set_infos(store, list(set_ids))}
    z = np.stack([e.z for e in emb])
    return cluster_report(z, [infos[e.set_id].task for e in emb], [infos[e.set_id].label for e in emb],
                          margin, seed)


@dataclass
class ClusteringRun:
    seed: int
    margin: float
    report: ClusterReport
    result: TrainResult
    seconds: float


@dataclass
class ClusteringData:
    seed: int
    store: MemoryStore
    train_ids: list[int]
    test_ids: list[int]


def clustering_data(seed: int, n_per_label: int = 40, n_train: int = 30) -> ClusteringData:
    traces = collect_balanced(n_per_label, n_per_label, seed)
    store = build_memory(traces, step_caps=COLLECTION_CAPS)
    train, test = held_out_split(store, n_train)
    return ClusteringData(seed, store, train, test)


def clustering_run(data: ClusteringData, margin: float, base: EncoderConfig | None = None) -> ClusteringRun:
    cfg = replace(base or EncoderConfig(), margin=margin, seed=data.seed)
    t0 = time.perf_counter()
    res = train_encoder(data.store, cfg, set_ids=data.train_ids)
    rep = evaluate(data.store, res.state, data.test_ids, margin, data.seed)
    return ClusteringRun(data.seed, margin, rep, res, time.perf_counter() - t0)


@dataclass
class AblationRun:
    seed: int
    reports: dict[str, ClusterReport] = field(default_factory=dict)   # "complete", "remove", "shuffle", "flatten"


def ablation_run(data: ClusteringData, complete: ClusteringRun, fraction: float = 0.4,
                 base: EncoderConfig | None = None) -> AblationRun:
    """Remove/shuffle: encode the modified held-out SETs with the complete-graph encoder.

    Flatten changes the schema, so a fresh encoder is trained on flattened SETs
    with the flat meta-paths and otherwise identical settings.
    """
    out = AblationRun(data.seed, {"complete": complete.report})
    for mode in ("remove", "shuffle"):
        mod = ablate(data.store, mode, fraction, data.seed)
        out.reports[mode] = evaluate(mod, complete.result.state, data.test_ids, complete.margin, data.seed)
    flat = ablate(data.store, "flatten")
    cfg = replace(base or EncoderConfig(), margin=complete.margin, seed=data.seed, metapaths=FLAT_METAPATHS)
    res = train_encoder(flat, cfg, set_ids=data.train_ids)
    out.reports["flatten"] = evaluate(flat, res.state, data.test_ids, complete.margin, data.seed)
    return out


# -- agent ----------------------------------------------------------------------------
def agent_memory(task: str = "Empty-5", seed: int = 0, n_per_label: int = 40, margin: float = 1.5,
                 encoder: EncoderConfig | None = None, enrichment: EnrichmentConfig | None = None
                 ) -> MemoryContext:
    """Long-term memory for one task: random-policy SETs, a trained encoder, a Success-only index."""
    traces = collect_balanced(n_per_label, n_per_label, seed, tasks=[task])
    store = build_memory(traces, step_caps=COLLECTION_CAPS)
    cfg = replace(encoder or EncoderConfig(), margin=margin, seed=seed)
    res = train_encoder(store, cfg)
    index = LtmIndex.from_embeddings(store, encode_store(store, res.state), labels=[Label.SUCCESS.value])
    attention = RetrievalAttention(cfg.hidden_dim, np.random.default_rng([seed, 2]))
    return MemoryContext(store, index, res.state, attention, enrichment or EnrichmentConfig())


def agent_run(task: str, strategy: Strategy | str, seed: int, episodes: int = 2000,
              memory: MemoryContext | None = None, **overrides) -> tuple[dict, RunLog]:
    cfg = AgentConfig(strategy=Strategy(strategy), episodes=episodes, seed=seed, **overrides)
    log, _ = run_training(task, cfg, memory if cfg.strategy.enriched else None)
    return run_metrics(log), log
