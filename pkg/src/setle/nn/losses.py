"""Triplet and info-NCE losses, plus plain-float reference forms."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def triplet_loss(d_ap, d_an, margin: float) -> Tensor:
    """max(0, d_ap - d_an + margin); gradient 0 at the hinge."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    return ad.hinge(ad.sub(d_ap, d_an) + margin)


def triplet_value(d_ap: float, d_an: float, margin: float) -> float:
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    return max(0.0, d_ap - d_an + margin)


def info_nce(sim_pos_index: int, sims_all, temperature: float) -> Tensor:
    """-log softmax(sims_all / temperature)[sim_pos_index], max-shifted.

    ``sims_all`` is a 1-D tensor (or list of scalar tensors) containing the
    positive similarity at ``sim_pos_index``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if isinstance(sims_all, (list, tuple)):
        if not sims_all:
            raise ValueError("info_nce needs at least one similarity")
        sims_all = ad.stack(sims_all)
    sims_all = ad.as_tensor(sims_all)
    if sims_all.data.size == 0:
        raise ValueError("info_nce needs at least one similarity")
    logits = sims_all * (1.0 / temperature)
    return ad.logsumexp(logits) - logits[sim_pos_index]


def info_nce_value(sim_pos: float, sims_all: Sequence[float], temperature: float) -> float:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if len(sims_all) == 0:
        raise ValueError("info_nce needs at least one similarity")
    logits = np.asarray(sims_all, dtype=np.float64) / temperature
    m = logits.max()
    return float(m + math.log(np.exp(logits - m).sum()) - sim_pos / temperature)
