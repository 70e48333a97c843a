"""Differentiable building blocks: linear maps, GCN layers, attention, MLP adapter."""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "elu": ad.elu,
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": ad.identity,
}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Holds named parameters and child modules; names are dotted paths."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 name: str = "linear"):
        self.weight = param(glorot(rng, d_in, d_out), f"{name}.weight")
        self.bias = param(np.zeros(d_out), f"{name}.bias") if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 for a symmetric 0/1 adjacency matrix."""
    a = np.asarray(adj, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    a_tilde = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def gcn_layer(h, a_norm, w, activation: str | Callable = "elu") -> Tensor:
    """sigma(A_norm @ H @ W)."""
    h, w = ad.as_tensor(h), ad.as_tensor(w)
    if isinstance(a_norm, Tensor):
        a_norm = a_norm.data
    if not sparse.issparse(a_norm):
        a_norm = np.asarray(a_norm)
    if a_norm.shape[0] != a_norm.shape[1] or a_norm.shape[1] != h.shape[0]:
        raise ValueError(f"adjacency {a_norm.shape} does not match features {h.shape}")
    if h.shape[-1] != w.shape[0]:
        raise ValueError(f"features {h.shape} do not match weight {w.shape}")
    sigma = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    return sigma(ad.sparse_matmul(a_norm, ad.matmul(h, w)))


class GCN(Module):
    """A stack of GCN layers sharing one normalized adjacency per forward call."""

    def __init__(self, dims: list[int], rng: np.random.Generator, activation: str = "elu",
                 name: str = "gcn"):
        self.weights = [param(glorot(rng, a, b), f"{name}.w{i}")
                        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.activation = activation

    def __call__(self, h, a_norm) -> Tensor:
        for w in self.weights:
            h = gcn_layer(h, a_norm, w, self.activation)
        return h


def attention_pool(query: Tensor, keys: Tensor, values: Tensor, scale: float) -> tuple[Tensor, Tensor]:
    """Single-query scaled dot-product attention. Returns (pooled, weights)."""
    logits = ad.matmul(keys, query) * scale
    weights = ad.softmax(logits)
    return ad.matmul(weights, values), weights


class MLP(Module):
    """Two affine layers with an ELU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 name: str = "mlp"):
        self.fc1 = Linear(d_in, d_hidden, rng, name=f"{name}.fc1")
        self.fc2 = Linear(d_hidden, d_out, rng, name=f"{name}.fc2")

    def __call__(self, x) -> Tensor:
        return self.fc2(ad.elu(self.fc1(x)))


class Adapter(Module):
    """Projection of enriched embeddings ahead of the Q-network.

    ``init="identity"`` sets both weights to the identity, biases to zero and the
    inner activation to the identity, so the adapter starts as an exact pass-through.
    """

    def __init__(self, d: int, rng: np.random.Generator, init: str = "glorot",
                 activation: str | None = None, name: str = "adapter"):
        self.fc1 = Linear(d, d, rng, name=f"{name}.fc1")
        self.fc2 = Linear(d, d, rng, name=f"{name}.fc2")
        if activation is None:
            activation = "identity" if init == "identity" else "elu"
        self.activation = activation
        if init == "identity":
            self.fc1.weight.data[...] = np.eye(d)
            self.fc2.weight.data[...] = np.eye(d)
        elif init == "zeros":
            self.fc1.weight.data[...] = 0.0
            self.fc2.weight.data[...] = 0.0
        elif init != "glorot":
            raise ValueError(f"unknown adapter init {init!r}")

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.fc1.weight.shape[0]:
            raise ValueError(f"adapter expects width {self.fc1.weight.shape[0]}, got {x.shape}")
        return self.fc2(ACTIVATIONS[self.activation](self.fc1(x)))
