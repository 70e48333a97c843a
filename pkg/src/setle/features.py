"""Deterministic synthetic feature providers for symbolic observations.

These stand in for a perception stack: every node kind gets a fixed-width
real vector computed from the symbolic observation alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envsim import N_ACTIONS

OBJECT_KINDS = ("Key", "Door", "Goal", "Wall")


class FeatureError(ValueError):
    pass


def _pad(vals, d: int) -> np.ndarray:
    v = np.asarray(vals, dtype=np.float64)
    if v.size > d:
        raise FeatureError(f"feature needs {v.size} dims but d_in={d}")
    out = np.zeros(d)
    out[:v.size] = v
    return out


def _door(obs: dict) -> dict | None:
    return next((o for o in obs["objects"] if o["kind"] == "Door"), None)


@dataclass
class SymbolicFeatures:
    """Feature provider for gridworld observations. All kinds share ``d_in``."""

    d_in: int = 16

    def object(self, obj: dict) -> np.ndarray:
        # concept-level: kind and state flags, no position, so the same
        # concept is shared by every episode that sees it
        if obj["kind"] not in OBJECT_KINDS:
            raise FeatureError(f"unknown object kind {obj['kind']!r}")
        onehot = [1.0 if obj["kind"] == k else 0.0 for k in OBJECT_KINDS]
        return _pad(onehot + [float(obj.get("open", False)), float(obj.get("locked", False))], self.d_in)

    def state(self, obs: dict) -> np.ndarray:
        n = obs["size"]
        scale = float(n - 1)
        x, y = obs["agent"]
        heading = [1.0 if obs["heading"] == h else 0.0 for h in range(4)]
        door = _door(obs)
        goal = next((o for o in obs["objects"] if o["kind"] == "Goal"), None)
        key = next((o for o in obs["objects"] if o["kind"] == "Key"), None)
        kdx, kdy = ((key["pos"][0] - x) / scale, (key["pos"][1] - y) / scale) if key else (0.0, 0.0)
        vals = [x / scale, y / scale, *heading,
                float(obs["carrying"] is not None),
                float(door["open"]) if door else 0.0,
                1.0 if door else 0.0,
                n / 10.0,
                (goal["pos"][0] - x) / scale if goal else 0.0, (goal["pos"][1] - y) / scale if goal else 0.0,
                kdx, kdy, 1.0]
        return _pad(vals, self.d_in)

    def affordance(self, obs: dict, action: int, reward: float, next_obs: dict) -> np.ndarray:
        scale = float(obs["size"] - 1)
        onehot = [1.0 if action == a else 0.0 for a in range(N_ACTIONS)]
        dx = (next_obs["agent"][0] - obs["agent"][0]) / scale
        dy = (next_obs["agent"][1] - obs["agent"][1]) / scale
        turn = ((next_obs["heading"] - obs["heading"] + 2) % 4 - 2) / 2.0
        dcarry = float(next_obs["carrying"] is not None) - float(obs["carrying"] is not None)
        d0, d1 = _door(obs), _door(next_obs)
        ddoor = (float(d1["open"]) - float(d0["open"])) if d0 and d1 else 0.0
        moved = float(next_obs["agent"] != obs["agent"])
        return _pad(onehot + [reward, dx, dy, turn, dcarry, ddoor, moved, 1.0], self.d_in)

    def interaction(self, action: int, target_kind: str) -> np.ndarray:
        if target_kind not in OBJECT_KINDS:
            raise FeatureError(f"unknown object kind {target_kind!r}")
        onehot = [1.0 if action == a else 0.0 for a in range(N_ACTIONS)]
        kind = [1.0 if target_kind == k else 0.0 for k in OBJECT_KINDS]
        return _pad(onehot + kind, self.d_in)

    def set_root(self) -> np.ndarray:
        return np.full(self.d_in, 1.0 / np.sqrt(self.d_in))
