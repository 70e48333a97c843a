"""Small deterministic symbolic gridworld in the MiniGrid style.

Two task families: ``Empty-n`` (fixed start, goal in the far corner) and
``DoorKey-n`` (a wall column splits the room; a locked door must be opened
with the key). The grid is n x n including the outer wall ring.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .trace import EpisodeTrace, Step

# heading index -> (dx, dy); 0 = East, 1 = South, 2 = West, 3 = North (y grows downward)
DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))
HEADING_NAMES = ("E", "S", "W", "N")


class Action(enum.IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    FORWARD = 2
    PICKUP = 3
    DROP = 4
    TOGGLE = 5


N_ACTIONS = len(Action)


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class Task:
    family: str
    size: int

    def __post_init__(self):
        if self.family not in ("Empty", "DoorKey"):
            raise ValueError(f"unknown task family {self.family!r}")
        if self.size < (5 if self.family == "DoorKey" else 3):
            raise ValueError(f"grid size {self.size} too small for {self.family}")

    @property
    def name(self) -> str:
        return f"{self.family}-{self.size}"

    @property
    def max_steps(self) -> int:
        return 4 * self.size * self.size

    @classmethod
    def parse(cls, name: str) -> "Task":
        try:
            family, size = name.rsplit("-", 1)
            return cls(family, int(size))
        except ValueError as exc:
            raise ValueError(f"bad task name {name!r} (expected e.g. 'Empty-5'): {exc}") from None


def episode_rng(seed: int, episode: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, episode); steps advance its position."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(episode)])))


@dataclass
class WorldObject:
    kind: str          # Key | Door | Goal | Wall
    pos: tuple[int, int]
    is_open: bool = False
    is_locked: bool = False


@dataclass
class GridWorld:
    task: Task
    agent: tuple[int, int] = (1, 1)
    heading: int = 0
    objects: list[WorldObject] = field(default_factory=list)
    carrying: WorldObject | None = None
    step_count: int = 0
    done: bool = False
    max_steps: int = 0

    # -- construction -------------------------------------------------------------
    @classmethod
    def reset(cls, task: Task | str, seed: int = 0, episode: int = 0) -> "GridWorld":
        if isinstance(task, str):
            task = Task.parse(task)
        n = task.size
        world = cls(task=task, max_steps=task.max_steps)
        if task.family == "Empty":
            world.agent, world.heading = (1, 1), 0
            world.objects = [WorldObject("Goal", (n - 2, n - 2))]
            return world
        rng = episode_rng(seed, episode)
        split = int(rng.integers(2, n - 2))
        door_y = int(rng.integers(1, n - 1))
        objs = [WorldObject("Wall", (split, y)) for y in range(1, n - 1) if y != door_y]
        objs.append(WorldObject("Door", (split, door_y), is_locked=True))
        objs.append(WorldObject("Goal", (n - 2, n - 2)))
        left = [(x, y) for x in range(1, split) for y in range(1, n - 1)]
        ai, ki = rng.choice(len(left), size=2, replace=False)
        objs.append(WorldObject("Key", left[int(ki)]))
        world.objects = objs
        world.agent = left[int(ai)]
        world.heading = int(rng.integers(0, 4))
        return world

    def clone(self) -> "GridWorld":
        objs = [WorldObject(o.kind, o.pos, o.is_open, o.is_locked) for o in self.objects]
        carry = None
        if self.carrying is not None:
            c = self.carrying
            carry = WorldObject(c.kind, c.pos, c.is_open, c.is_locked)
        return GridWorld(self.task, self.agent, self.heading, objs, carry,
                         self.step_count, self.done, self.max_steps)

    # -- queries ------------------------------------------------------------------
    def object_at(self, pos: tuple[int, int]) -> WorldObject | None:
        for o in self.objects:
            if o.pos == pos:
                return o
        return None

    def is_boundary(self, pos: tuple[int, int]) -> bool:
        n = self.task.size
        x, y = pos
        return x <= 0 or y <= 0 or x >= n - 1 or y >= n - 1

    def front(self) -> tuple[int, int]:
        dx, dy = DIRS[self.heading]
        return self.agent[0] + dx, self.agent[1] + dy

    def passable(self, pos: tuple[int, int]) -> bool:
        if self.is_boundary(pos):
            return False
        o = self.object_at(pos)
        if o is None or o.kind == "Goal":
            return True
        return o.kind == "Door" and o.is_open

    def observation(self) -> dict:
        """Full symbolic observation (JSON-friendly)."""
        objs = sorted(({"kind": o.kind, "pos": list(o.pos), "open": o.is_open, "locked": o.is_locked}
                       for o in self.objects), key=lambda d: (d["kind"], d["pos"]))
        return {"task": self.task.name, "size": self.task.size, "agent": list(self.agent),
                "heading": self.heading, "carrying": self.carrying.kind if self.carrying else None,
                "objects": objs, "step": self.step_count}

    def state_key(self) -> tuple:
        door = next((o for o in self.objects if o.kind == "Door"), None)
        key = next((o.pos for o in self.objects if o.kind == "Key"), None)
        return (self.agent, self.heading, self.carrying is not None,
                door.is_open if door else None, key)

    # -- dynamics -----------------------------------------------------------------
    def step(self, action: int) -> tuple[dict, float, bool]:
        if self.done:
            raise EpisodeDone("step() called after the episode finished")
        action = Action(int(action))
        self.step_count += 1
        reward = 0.0
        ahead = self.front()
        target = self.object_at(ahead)
        if action is Action.TURN_LEFT:
            self.heading = (self.heading - 1) % 4
        elif action is Action.TURN_RIGHT:
            self.heading = (self.heading + 1) % 4
        elif action is Action.FORWARD:
            if self.passable(ahead):
                self.agent = ahead
                if target is not None and target.kind == "Goal":
                    reward = 1.0 - 0.9 * (self.step_count / self.max_steps)
                    self.done = True
        elif action is Action.PICKUP:
            if target is not None and target.kind == "Key" and self.carrying is None:
                self.objects.remove(target)
                self.carrying = target
        elif action is Action.DROP:
            if self.carrying is not None and target is None and not self.is_boundary(ahead):
                self.carrying.pos = ahead
                self.objects.append(self.carrying)
                self.carrying = None
        elif action is Action.TOGGLE:
            if target is not None and target.kind == "Door":
                if target.is_locked:
                    if self.carrying is not None and self.carrying.kind == "Key":
                        target.is_locked = False
                        target.is_open = True
                else:
                    target.is_open = not target.is_open
        if self.step_count >= self.max_steps:
            self.done = True
        return self.observation(), reward, self.done


def random_rollout(task: Task | str, seed: int, step_cap: int, episode: int = 0) -> EpisodeTrace:
    """Uniform-random policy until the goal, the env limit, or ``step_cap`` steps."""
    if step_cap < 1:
        raise ValueError("step_cap must be >= 1")
    env = GridWorld.reset(task, seed, episode)
    # the layout consumes the (seed, episode) stream; actions use a sibling stream
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(episode), 1])))
    obs = env.observation()
    steps: list[Step] = []
    reached = False
    while len(steps) < step_cap and not env.done:
        a = int(rng.integers(0, N_ACTIONS))
        nxt, r, done = env.step(a)
        steps.append(Step(obs=obs, action=a, reward=r, next_obs=nxt, done=done))
        reached = reached or r > 0
        obs = nxt
    return EpisodeTrace(steps=steps, task=env.task.name, seed=int(seed), goal_reached=reached,
                        episode=int(episode))


def shortest_solution(task: Task | str, seed: int = 0, episode: int = 0) -> int | None:
    """Minimal number of actions to reach the goal (BFS over world states)."""
    start = GridWorld.reset(task, seed, episode)
    seen = {start.state_key()}
    queue = deque([(start, 0)])
    while queue:
        env, depth = queue.popleft()
        for a in Action:
            nxt = env.clone()
            _, r, done = nxt.step(a)
            if r > 0:
                return depth + 1
            if done:
                continue
            key = nxt.state_key()
            if key not in seen:
                seen.add(key)
                queue.append((nxt, depth + 1))
    return None
