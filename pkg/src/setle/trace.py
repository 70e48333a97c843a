"""Episode traces and their JSON-lines representation.

A trace file holds one or more episodes. Each episode starts with an
``episode`` record followed by one ``step`` record per transition::

    {"record": "episode", "task": "Empty-5", "seed": 0, "episode": 3, "goal_reached": true, "n_steps": 7}
    {"record": "step", "t": 0, "obs": {...}, "action": 2, "reward": 0.0, "next_obs": {...}, "done": false}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable


class TraceFormatError(ValueError):
    pass


@dataclass
class Step:
    obs: dict
    action: int
    reward: float
    next_obs: dict
    done: bool = False


@dataclass
class EpisodeTrace:
    steps: list[Step]
    task: str
    seed: int
    goal_reached: bool
    episode: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.steps:
            raise ValueError("trace must contain at least one step")
        for i, s in enumerate(self.steps):
            if not math.isfinite(s.reward):
                raise ValueError(f"non-finite reward at step {i}")

    def __len__(self) -> int:
        return len(self.steps)

    def observations(self) -> list[dict]:
        """s_0 .. s_T, including the terminal observation."""
        return [s.obs for s in self.steps] + [self.steps[-1].next_obs]


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_traces(path: str | Path, traces: Iterable[EpisodeTrace]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tr in traces:
            fh.write(_dumps({"record": "episode", "task": tr.task, "seed": tr.seed,
                             "episode": tr.episode, "goal_reached": tr.goal_reached,
                             "n_steps": len(tr.steps)}) + "\n")
            for t, s in enumerate(tr.steps):
                fh.write(_dumps({"record": "step", "t": t, "obs": s.obs, "action": s.action,
                                 "reward": s.reward, "next_obs": s.next_obs, "done": s.done}) + "\n")


def read_traces(path: str | Path) -> list[EpisodeTrace]:
    traces: list[EpisodeTrace] = []
    header: dict | None = None
    steps: list[Step] = []

    def flush(lineno: int) -> None:
        if header is None:
            return
        if len(steps) != header["n_steps"]:
            raise TraceFormatError(f"{path}:{lineno}: episode {header['episode']} declares "
                                   f"{header['n_steps']} steps, found {len(steps)}")
        try:
            traces.append(EpisodeTrace(steps=list(steps), task=header["task"], seed=header["seed"],
                                       goal_reached=bool(header["goal_reached"]),
                                       episode=header["episode"]))
        except ValueError as exc:
            raise TraceFormatError(f"{path}:{lineno}: {exc}") from exc

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["record"]
                if kind == "episode":
                    flush(lineno)
                    header = {k: rec[k] for k in ("task", "seed", "episode", "goal_reached", "n_steps")}
                    steps = []
                elif kind == "step":
                    if header is None:
                        raise TraceFormatError(f"{path}:{lineno}: step before any episode record")
                    if rec["t"] != len(steps):
                        raise TraceFormatError(f"{path}:{lineno}: expected t={len(steps)}, got {rec['t']}")
                    steps.append(Step(obs=rec["obs"], action=int(rec["action"]),
                                      reward=float(rec["reward"]), next_obs=rec["next_obs"],
                                      done=bool(rec["done"])))
                else:
                    raise TraceFormatError(f"{path}:{lineno}: unknown record kind {kind!r}")
            except TraceFormatError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TraceFormatError(f"{path}:{lineno}: malformed trace record ({exc})") from exc
        flush(lineno)
    return traces
