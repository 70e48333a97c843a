"""Adam with decoupled weight decay and gradient accumulation; Polyak averaging."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accumulation_window: int = 1
    step_counter: int = 0      # optimizer updates applied
    micro_steps: int = 0       # backward passes seen in the current window
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    accumulated: dict[str, np.ndarray] = field(default_factory=dict)
    # parameter -> update counter (row-sparse tables keep one counter per row)
    row_steps: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.accumulation_window < 1:
            raise ValueError("accumulation_window must be >= 1")


class Adam:
    """Adam (bias-corrected) with decoupled weight decay.

    Call :meth:`step` after every backward pass. Gradients are summed over
    ``accumulation_window`` calls, averaged, and only then applied. Parameters
    listed in ``sparse`` are embedding tables: only rows that received a
    nonzero gradient in the window are touched (moments, decay and value), so
    rows of nodes absent from the window stay bit-identical.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, weight_decay: float = 1e-4,
                 accumulation_window: int = 1, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, sparse: tuple[str, ...] = ()):
        self.params = dict(params)
        self.sparse = set(sparse)
        self.state = OptimizerState(learning_rate=lr, weight_decay=weight_decay, beta1=betas[0],
                                    beta2=betas[1], eps=eps, accumulation_window=accumulation_window)
        for name, p in self.params.items():
            self._ensure(name, p)

    def _ensure(self, name: str, p: Tensor) -> None:
        st = self.state
        if name not in st.first_moment or st.first_moment[name].shape != p.data.shape:
            old_m = st.first_moment.get(name)
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            acc = np.zeros_like(p.data)
            rows = np.zeros(p.data.shape[0] if p.data.ndim else 1, dtype=np.int64)
            if old_m is not None and name in self.sparse and p.data.ndim == 2:
                # embedding tables grow by appending rows
                k = old_m.shape[0]
                m[:k], v[:k] = old_m, st.second_moment[name]
                acc[:k] = st.accumulated[name]
                rows[:k] = st.row_steps[name]
            st.first_moment[name], st.second_moment[name] = m, v
            st.accumulated[name], st.row_steps[name] = acc, rows

    def register(self, name: str, p: Tensor, sparse: bool = False) -> None:
        self.params[name] = p
        if sparse:
            self.sparse.add(name)
        self._ensure(name, p)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> bool:
        """Accumulate current grads; apply an update at window boundaries.

        Returns True when parameters were updated.
        """
        st = self.state
        for name, p in self.params.items():
            self._ensure(name, p)
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            st.accumulated[name] += p.grad
            p.zero_grad()
        st.micro_steps += 1
        if st.micro_steps < st.accumulation_window:
            return False
        self._apply(1.0 / st.micro_steps)
        st.micro_steps = 0
        return True

    def _apply(self, scale: float) -> None:
        st = self.state
        st.step_counter += 1
        b1, b2, lr = st.beta1, st.beta2, st.learning_rate
        for name, p in self.params.items():
            g = st.accumulated[name] * scale
            m, v = st.first_moment[name], st.second_moment[name]
            if name in self.sparse:
                rows = np.flatnonzero(np.any(g != 0.0, axis=1))
                if rows.size == 0:
                    continue
                st.row_steps[name][rows] += 1
                t = st.row_steps[name][rows][:, None]
                m[rows] = b1 * m[rows] + (1 - b1) * g[rows]
                v[rows] = b2 * v[rows] + (1 - b2) * g[rows] ** 2
                m_hat = m[rows] / (1 - b1 ** t)
                v_hat = v[rows] / (1 - b2 ** t)
                p.data[rows] -= lr * st.weight_decay * p.data[rows]
                p.data[rows] -= lr * m_hat / (np.sqrt(v_hat) + st.eps)
            else:
                t = st.step_counter
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                m_hat = m / (1 - b1 ** t)
                v_hat = v / (1 - b2 ** t)
                if st.weight_decay:
                    p.data -= lr * st.weight_decay * p.data
                p.data -= lr * m_hat / (np.sqrt(v_hat) + st.eps)
            st.accumulated[name][...] = 0.0


def polyak_update(target: Mapping[str, Tensor], online: Mapping[str, Tensor], tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if set(target) != set(online):
        raise ValueError("target and online parameter names differ")
    for name, t in target.items():
        o = online[name]
        if t.data.shape != o.data.shape:
            raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {o.data.shape}")
    for name, t in target.items():
        t.data[...] = tau * online[name].data + (1.0 - tau) * t.data


def hard_update(target: Mapping[str, Tensor], online: Mapping[str, Tensor]) -> None:
    polyak_update(target, online, 1.0)
