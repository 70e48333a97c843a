"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .autodiff import Tensor


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
               eps: float = 1e-4, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Relative error per entry is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    ``max_entries`` caps how many coordinates per parameter are probed (sampled
    with ``rng``); the default probes every coordinate.
    """
    items = list(params.items()) if isinstance(params, Mapping) else [
        (p.name or str(i), p) for i, p in enumerate(params)]
    for _, p in items:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("objective is not finite at the check point")
    out.backward()
    analytic = {name: p.grad.copy() for name, p in items}
    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        g_ad = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"objective not finite while probing {name}[{i}]")
            g_fd = (up - down) / (2 * eps)
            err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_ad[i]), abs(g_fd))
            worst = max(worst, err)
    for _, p in items:
        p.zero_grad()
    return worst
