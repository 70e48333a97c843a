import numpy as np
import pytest
from hypothesis import settings

from setle.builder import SetBuilder, build_memory
from setle.envsim import random_rollout
from setle.features import SymbolicFeatures
from setle.graph import EdgeKind, MemoryStore, NodeKind

settings.register_profile("setle", deadline=None, max_examples=40)
settings.load_profile("setle")


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def small_traces(n=4, seed=0, tasks=("Empty-5", "DoorKey-5"), cap=40):
    out = []
    for task in tasks:
        s = f = ep = 0
        while s < n or f < n:
            tr = random_rollout(task, seed, cap, ep)
            ep += 1
            if tr.goal_reached and s < n:
                out.append(tr)
                s += 1
            elif not tr.goal_reached and f < n:
                out.append(tr)
                f += 1
    return out


def toy_set(store, n_states=1, interaction=True, obj=(1.0, 0, 0, 0), task="A", label="Success", shared=None):
    """Hand-built SET: a state chain, one object seen by every state, affordances between states."""
    rng = np.random.default_rng(len(store.nodes))
    sid = store.create_set(rng.normal(size=4), {"task": task, "label": label})
    o = shared if shared is not None else store.add_node(NodeKind.OBJECT, obj)
    store.add_member(sid, o)
    states = []
    for i in range(n_states):
        s = store.add_node(NodeKind.STATE, rng.normal(size=4), {"t": i})
        store.add_member(sid, s)
        store.add_edge(sid, EdgeKind.HAS_STATE, s)
        store.add_edge(s, EdgeKind.HAS_OBJECT, o)
        if states:
            store.add_edge(states[-1], EdgeKind.PRECEDES, s)
        states.append(s)
    inter = None
    if interaction:
        inter = store.add_node(NodeKind.INTERACTION, [0, 1.0, 0, 0])
        store.add_member(sid, inter)
        store.add_edge(inter, EdgeKind.DEPENDS_ON, o)
    n_aff = max(1, n_states - 1)
    for i in range(n_aff):
        a = store.add_node(NodeKind.AFFORDANCE, rng.normal(size=4))
        store.add_member(sid, a)
        store.add_edge(states[i], EdgeKind.OUTCOME, a)
        if i + 1 < n_states:
            store.add_edge(a, EdgeKind.INFLUENCES, states[i + 1])
        if inter is not None:
            store.add_edge(a, EdgeKind.EMERGES_FROM, inter)
    return sid


@pytest.fixture(scope="session")
def traces():
    return small_traces()


@pytest.fixture(scope="session")
def memory(traces):
    return build_memory(traces, SetBuilder(SymbolicFeatures(16)))


@pytest.fixture
def store():
    return MemoryStore(d_in=4, tau_sim=0.95)


def cli_pipeline(root, seed=0):
    """Run every CLI command once on a tiny problem; returns {command: output dir}."""
    from setle.cli import main

    tiny = ["--hidden-dim", "8", "--heads", "2", "--key-dim", "4", "--layers", "2", "--max-epochs", "2",
            "--val-fraction", "0.5", "--accumulation", "4"]
    d = {c: root / c for c in ("collect", "build-memory", "train-encoder", "eval-embeddings", "ablate",
                               "train-agent", "train-agent-enriched")}
    s = ["--seed", str(seed)]
    steps = [
        ["collect", "--task", "Empty-5", "DoorKey-5", "--balanced", "4", "--out", d["collect"]] + s,
        ["build-memory", "--traces", d["collect"] / "traces.jsonl", "--out", d["build-memory"]] + s,
        ["train-encoder", "--memory", d["build-memory"] / "memory.jsonl", "--out", d["train-encoder"]] + tiny + s,
        ["eval-embeddings", "--memory", d["build-memory"] / "memory.jsonl", "--checkpoint",
         d["train-encoder"] / "encoder.npz", "--out", d["eval-embeddings"]] + s,
        ["ablate", "--memory", d["build-memory"] / "memory.jsonl", "--checkpoint", d["train-encoder"] / "encoder.npz",
         "--modes", "remove", "shuffle", "--out", d["ablate"]] + s,
        ["train-agent", "--strategy", "Baseline", "--seeds", "0", "1", "--episodes", "2",
         "--agent", '{"max_steps": 15, "learn_start": 8}', "--out", d["train-agent"]] + s,
        ["train-agent", "--strategy", "ActionSelectionOnly", "--seeds", "0", "--episodes", "1", "--step-log",
         "--memory", d["build-memory"] / "memory.jsonl", "--checkpoint", d["train-encoder"] / "encoder.npz",
         "--agent", '{"max_steps": 10, "learn_start": 4}', "--out", d["train-agent-enriched"]] + s,
    ]
    for argv in steps:
        code = main([str(a) for a in argv])
        assert code == 0, argv
    return d


def output_bytes(dirs):
    """Contents of every CSV/JSONL output (config.json holds the output path, so it is excluded)."""
    out = {}
    for name, d in dirs.items():
        for f in sorted(d.rglob("*")):
            if f.suffix in (".csv", ".jsonl"):
                out[f"{name}/{f.relative_to(d)}"] = f.read_bytes()
    return out


# acceptance results: criterion number -> (passed, detail); printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
