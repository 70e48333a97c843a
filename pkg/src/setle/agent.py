"""Double-DQN agent for the gridworld, with optional memory enrichment of its state."""
from __future__ import annotations

import copy
import csv
import enum
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .builder import SetBuilder
from .encoder import DegenerateSetError, EncoderState, LookupPlan, PreparedSet, encode_prepared, prepare_set
from .envsim import N_ACTIONS, GridWorld, Task, episode_rng
from .features import SymbolicFeatures
from .graph import MemoryStore
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import Adapter, Linear, Module
from .nn.optim import Adam, hard_update, polyak_update
from .retrieval import EnrichmentConfig, EnrichmentLog, LtmIndex, RetrievalAttention, enrich, injected_readout


class Strategy(str, enum.Enum):
    BASELINE = "Baseline"
    ACTION_SELECTION_ONLY = "ActionSelectionOnly"
    ACTION_AND_OPTIMISATION = "ActionAndOptimisation"
    ADAPTER_PENALTY = "AdapterPenalty"
    ADAPTER_PENALTY_SOFT_UPDATE = "AdapterPenaltySoftUpdate"

    @property
    def enriched(self) -> bool:
        return self is not Strategy.BASELINE

    @property
    def uses_adapter(self) -> bool:
        return self in (Strategy.ADAPTER_PENALTY, Strategy.ADAPTER_PENALTY_SOFT_UPDATE)


class ConfigError(ValueError):
    pass


@dataclass
class AgentConfig:
    strategy: Strategy = Strategy.BASELINE
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.1
    decay_rate: float = 1e4
    buffer_capacity: int = 10_000
    batch_size: int = 32
    target_update: str | None = None  # "hard" | "soft"; None picks the strategy's default
    target_period: int = 200
    tau_soft: float = 0.005
    lr: float = 1e-3
    hidden: int = 64
    learn_start: int = 32
    episodes: int = 2000
    max_steps: int | None = None
    encoder_batch: int = 8
    encoder_lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.eps_end > self.eps_start:
            raise ConfigError("eps_end must not exceed eps_start")
        wants_soft = self.strategy is Strategy.ADAPTER_PENALTY_SOFT_UPDATE
        if self.target_update is None:
            self.target_update = "soft" if wants_soft else "hard"
        if self.target_update not in ("hard", "soft"):
            raise ConfigError(f"target_update must be 'hard' or 'soft', got {self.target_update!r}")
        if wants_soft and self.target_update != "soft":
            raise ConfigError(f"{self.strategy.value} needs soft target updates")
        if not wants_soft and self.target_update == "soft":
            raise ConfigError(f"{self.strategy.value} uses hard target updates; soft requested")
        if not 0.0 < self.tau_soft <= 1.0 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise ConfigError("invalid tau_soft, batch_size or buffer_capacity")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d


def epsilon(t: int, cfg: AgentConfig | None = None, eps_start: float = 1.0, eps_end: float = 0.1,
            decay_rate: float = 1e4) -> float:
    if cfg is not None:
        eps_start, eps_end, decay_rate = cfg.eps_start, cfg.eps_end, cfg.decay_rate
    if t < 0:
        raise ValueError("t must be >= 0")
    return eps_end + (eps_start - eps_end) * math.exp(-t / decay_rate)


def greedy(q: np.ndarray) -> int:
    """argmax with ties broken by the lowest index."""
    return int(np.argmax(q))


def select_action(q_values: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    if rng.random() < eps:
        return int(rng.integers(len(q_values)))
    return greedy(q_values)


# -- networks -------------------------------------------------------------------------
class QNet(Module):
    def __init__(self, d_in: int, hidden: int, n_actions: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng, name="q.fc1")
        self.fc2 = Linear(hidden, hidden, rng, name="q.fc2")
        self.out = Linear(hidden, n_actions, rng, name="q.out")

    def __call__(self, x) -> Tensor:
        return self.out(ad.relu(self.fc2(ad.relu(self.fc1(x)))))


class PolicyHead(Module):
    """Q-network with an optional adapter applied to the memory part of the input."""

    def __init__(self, d_raw: int, d_mem: int, hidden: int, n_actions: int, rng: np.random.Generator,
                 adapter: bool = False):
        self.d_mem = d_mem
        self.adapter = Adapter(d_mem, rng) if adapter and d_mem else None
        self.q = QNet(d_raw + d_mem, hidden, n_actions, rng)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if self.adapter is None:
            return self.q(x)
        mem = self.adapter(x[:, :self.d_mem])
        return self.q(ad.concat([mem, x[:, self.d_mem:]], axis=1))


def double_dqn_target(reward: float, done: bool, gamma: float, q_online_next: np.ndarray,
                      q_target_next: np.ndarray) -> float:
    if done:
        return float(reward)
    return float(reward + gamma * q_target_next[greedy(q_online_next)])


def double_dqn_targets(rewards, dones, gamma: float, q_online_next: np.ndarray, q_target_next: np.ndarray
                       ) -> np.ndarray:
    best = np.argmax(q_online_next, axis=1)
    boot = q_target_next[np.arange(len(best)), best]
    return np.asarray(rewards) + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * boot


# -- replay ---------------------------------------------------------------------------
@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    enriched: bool = False
    graph: object = None       # enriched window of `state` (only kept when the encoder trains)
    next_graph: object = None


class ReplayBuffer:
    """FIFO ring buffer."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.items)

    def push(self, tr: Transition) -> None:
        if not math.isfinite(tr.reward):
            raise ValueError("non-finite reward")
        if tr.state.shape != tr.next_state.shape:
            raise ValueError("state and next state differ in dimension")
        self.items.append(tr)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(0, len(self.items), size=n)
        return [self.items[int(i)] for i in idx]


class DoubleDQN:
    """Online/target Q-networks with Huber loss and hard or Polyak target updates."""

    def __init__(self, head: PolicyHead, cfg: AgentConfig):
        self.cfg = cfg
        self.online = head
        self.target = copy.deepcopy(head)
        self.opt = Adam(self.online.named_parameters(), lr=cfg.lr, weight_decay=0.0)
        self.updates = 0

    def q_values(self, x: np.ndarray, target: bool = False) -> np.ndarray:
        net = self.target if target else self.online
        with ad.no_grad():
            return net(np.atleast_2d(x)).data

    def loss(self, states: Tensor | np.ndarray, actions, targets: np.ndarray) -> tuple[Tensor, np.ndarray]:
        q = self.online(states)
        onehot = np.eye(q.shape[1])[np.asarray(actions)]
        chosen = ad.tsum(q * onehot, axis=1)
        return ad.mean(ad.huber(chosen - targets)), q.data

    def sync_target(self) -> None:
        self.updates += 1
        if self.cfg.target_update == "soft":
            polyak_update(self.target.named_parameters(), self.online.named_parameters(), self.cfg.tau_soft)
        elif self.updates % self.cfg.target_period == 0:
            hard_update(self.target.named_parameters(), self.online.named_parameters())

    def update(self, batch: Sequence[Transition], states: Tensor | None = None) -> tuple[float, np.ndarray]:
        nxt = np.stack([t.next_state for t in batch])
        targets = double_dqn_targets([t.reward for t in batch], [t.done for t in batch], self.cfg.gamma,
                                     self.q_values(nxt), self.q_values(nxt, target=True))
        if states is None:
            states = np.stack([t.state for t in batch])
        self.opt.zero_grad()
        loss, q = self.loss(states, [t.action for t in batch], targets)
        loss.backward()
        self.opt.step()
        self.sync_target()
        return loss.item(), q


# -- state representations ------------------------------------------------------------
def raw_state(obs: dict) -> np.ndarray:
    """One-hot x, one-hot y, one-hot heading, carrying flag, door-open flag."""
    n = obs["size"]
    v = np.zeros(2 * n + 6)
    v[obs["agent"][0]] = 1.0
    v[n + obs["agent"][1]] = 1.0
    v[2 * n + obs["heading"]] = 1.0
    v[2 * n + 4] = float(obs["carrying"] is not None)
    door = next((o for o in obs["objects"] if o["kind"] == "Door"), None)
    v[2 * n + 5] = float(door["open"]) if door else 0.0
    return v


@dataclass
class MemoryContext:
    """Everything the enriched strategies need from long-term memory."""
    ltm: MemoryStore
    index: LtmIndex
    encoder: EncoderState
    attention: RetrievalAttention
    enrichment: EnrichmentConfig = field(default_factory=EnrichmentConfig)
    builder: SetBuilder | None = None

    def __post_init__(self):
        if self.builder is None:
            self.builder = SetBuilder(SymbolicFeatures(self.ltm.d_in[next(iter(self.ltm.d_in))]))


@dataclass
class EnrichedView:
    z: np.ndarray
    prepared: PreparedSet | None = None
    z_query: np.ndarray | None = None
    candidates: list[int] = field(default_factory=list)
    injected: list[int] = field(default_factory=list)
    report: dict | None = None


class Enricher:
    """Per-step window construction + enrichment + re-encoding."""

    def __init__(self, mem: MemoryContext, penalty: float, keep_graph: bool, cache: bool):
        self.mem = mem
        self.cfg = EnrichmentConfig(mem.enrichment.top_k, mem.enrichment.n_inject, mem.enrichment.window,
                                    penalty, mem.enrichment.tau_attn)
        self.keep_graph = keep_graph
        self.cache: dict | None = {} if cache else None
        self.calls = 0
        self.d = mem.encoder.config.hidden_dim

    def view(self, observations, actions, rewards, t: int) -> EnrichedView:
        self.calls += 1
        key = None
        if self.cache is not None:
            lo = max(0, t - self.cfg.window + 1)
            key = json.dumps([observations[lo:t + 1], actions[lo:t], rewards[lo:t]], sort_keys=True)
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        m = self.mem
        wm, window = m.builder.build_window(observations, actions, rewards, t, self.cfg.window, ltm=m.ltm)
        res = enrich(wm, window, m.index, m.ltm, m.encoder, m.attention, self.cfg)
        try:
            prepared = prepare_set(wm, window.set_id, m.encoder.config.metapaths)
            z = encode_prepared(m.encoder, [prepared])[0].z
        except DegenerateSetError:
            prepared, z = None, np.zeros(self.d)
        injected = [n.node_id for n in res.injected]
        if injected:
            with ad.no_grad():
                z = z + injected_readout(m.encoder, m.attention, m.ltm, ad.Tensor(res.z_query),
                                         res.candidates, injected, self.cfg.tau_attn).data
        out = EnrichedView(z, prepared if self.keep_graph else None, res.z_query, res.candidates, injected,
                           res.report(t))
        if key is not None:
            self.cache[key] = out
        return out

    def differentiable(self, views: Sequence[EnrichedView]) -> Tensor:
        """Recompute z for ``views`` with gradients into encoder tables, GCNs and attention."""
        m = self.mem
        rows = []
        for v in views:
            if v.prepared is None:
                rows.append(ad.Tensor(np.zeros(self.d)))
                continue
            z, _, _, _ = m.encoder.forward([v.prepared])
            z = z[0]
            if v.injected:
                z = z + injected_readout(m.encoder, m.attention, m.ltm, ad.Tensor(v.z_query),
                                         v.candidates, v.injected, self.cfg.tau_attn)
            rows.append(z)
        return ad.stack(rows)


# -- training loop --------------------------------------------------------------------
@dataclass
class RunLog:
    strategy: str
    seed: int
    task: str
    episodes: list[dict] = field(default_factory=list)
    total_steps: int = 0
    reward_events: int = 0
    enrich_calls: int = 0


EPISODE_FIELDS = ("episode", "return", "success", "steps", "q_mean", "q_var", "loss_mean", "epsilon", "injected")


def run_training(task: Task | str, cfg: AgentConfig, memory: MemoryContext | None = None,
                 step_log: str | Path | None = None) -> tuple[RunLog, DoubleDQN]:
    task = Task.parse(task) if isinstance(task, str) else task
    strategy = cfg.strategy
    if strategy.enriched and memory is None:
        raise ConfigError(f"{strategy.value} needs long-term memory and an encoder")
    rng = np.random.default_rng(cfg.seed)
    init_rng = np.random.default_rng([cfg.seed, 1])
    d_raw = 2 * task.size + 6
    d_mem = memory.encoder.config.hidden_dim if strategy.enriched else 0
    head = PolicyHead(d_raw, d_mem, cfg.hidden, N_ACTIONS, init_rng, adapter=strategy.uses_adapter)
    dqn = DoubleDQN(head, cfg)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    train_encoder = strategy is Strategy.ACTION_AND_OPTIMISATION
    enricher = None
    enc_opt = None
    if strategy.enriched:
        penalty = memory.enrichment.penalty if strategy.uses_adapter else 1.0
        enricher = Enricher(memory, penalty, keep_graph=train_encoder,
                            cache=not train_encoder and penalty == 1.0)
        if train_encoder:
            params = {**memory.encoder.named_parameters(), **memory.attention.named_parameters()}
            enc_opt = Adam(params, lr=cfg.encoder_lr, weight_decay=0.0,
                           sparse=tuple(n for n in params if n.startswith("tables.")))
    steps_log = EnrichmentLog(step_log) if step_log is not None else None
    log = RunLog(strategy.value, cfg.seed, task.name)
    t_global = 0
    for ep in range(cfg.episodes):
        env = GridWorld.reset(task, cfg.seed, ep)
        if cfg.max_steps is not None:
            env.max_steps = cfg.max_steps
        if enricher is not None:
            memory.index.reset_counts()
            if enricher.cache is not None and len(enricher.cache) > 200_000:
                enricher.cache.clear()
        obs_hist, act_hist, rew_hist = [env.observation()], [], []

        def represent(t: int):
            raw = raw_state(obs_hist[t])
            if enricher is None:
                return raw, None
            view = enricher.view(obs_hist, act_hist, rew_hist, t)
            if steps_log is not None and view.report is not None:
                steps_log.write({"episode": ep, **view.report})
            return np.concatenate([view.z, raw]), view

        state, view = represent(0)
        ret, losses, qs, injected = 0.0, [], [], 0
        done = False
        eps = epsilon(t_global, cfg)
        while not done:
            eps = epsilon(t_global, cfg)
            a = select_action(dqn.q_values(state)[0], eps, rng)
            obs, r, done = env.step(a)
            obs_hist.append(obs)
            act_hist.append(a)
            rew_hist.append(r)
            nxt, nview = represent(len(act_hist))
            if nview is not None:
                injected += len(nview.injected)
            # only reaching the goal is terminal; running out of steps is a truncation
            buffer.push(Transition(state, a, r, nxt, bool(r > 0),
                                   enriched=enricher is not None, graph=view, next_graph=nview))
            ret += r
            log.total_steps += 1
            log.reward_events += int(r > 0)
            t_global += 1
            if len(buffer) >= max(cfg.learn_start, cfg.batch_size):
                batch = buffer.sample(cfg.batch_size, rng)
                states = None
                if train_encoder:
                    k = min(cfg.encoder_batch, len(batch))
                    enc_part = enricher.differentiable([b.graph for b in batch[:k]])
                    rest = np.stack([b.state[d_mem:] for b in batch])
                    mem_part = ad.concat([enc_part, ad.Tensor(np.stack([b.state[:d_mem] for b in batch[k:]])
                                                              .reshape(len(batch) - k, d_mem))], axis=0)
                    states = ad.concat([mem_part, ad.Tensor(rest)], axis=1)
                    enc_opt.zero_grad()
                loss, q = dqn.update(batch, states)
                if train_encoder:
                    enc_opt.step()
                losses.append(loss)
                qs.append(float(q.mean()))
            state, view = nxt, nview
        log.episodes.append({
            "episode": ep, "return": ret, "success": int(ret > 0), "steps": env.step_count,
            "q_mean": float(np.mean(qs)) if qs else float("nan"),
            "q_var": float(np.var(qs)) if qs else float("nan"),
            "loss_mean": float(np.mean(losses)) if losses else float("nan"),
            "epsilon": eps, "injected": injected,
        })
    log.enrich_calls = enricher.calls if enricher is not None else 0
    if steps_log is not None:
        steps_log.close()
    return log, dqn


def run_metrics(log: RunLog, last: int = 100) -> dict:
    eps = log.episodes
    if not eps:
        raise ValueError("empty run log")
    succ = np.array([e["success"] for e in eps], dtype=np.float64)
    qm = np.array([e["q_mean"] for e in eps if not math.isnan(e["q_mean"])])
    losses = np.array([e["loss_mean"] for e in eps if not math.isnan(e["loss_mean"])])
    return {
        "strategy": log.strategy, "seed": log.seed, "task": log.task, "episodes": len(eps),
        "success_rate": float(succ.mean()),
        "success_rate_last": float(succ[-last:].mean()),
        "reward_frequency": log.reward_events / log.total_steps if log.total_steps else 0.0,
        "total_steps": log.total_steps,
        "q_mean": float(qm.mean()) if qm.size else float("nan"),
        "q_var": float(qm.var()) if qm.size else float("nan"),
        "loss_mean": float(losses.mean()) if losses.size else float("nan"),
        "loss_std": float(losses.std()) if losses.size else float("nan"),
        "enrich_calls": log.enrich_calls,
    }


SUMMARY_FIELDS = ("strategy", "seed", "task", "episodes", "success_rate", "success_rate_last", "reward_frequency",
                  "total_steps", "q_mean", "q_var", "loss_mean", "loss_std", "enrich_calls")


def write_episode_log(path: str | Path, log: RunLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPISODE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in log.episodes:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in EPISODE_FIELDS})
