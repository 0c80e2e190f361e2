"""Parameter containers shared by the attention, detection, and fusion stacks."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, matmul, relu, take


class Module:
    """Minimal parameter tree: tensors and submodules found by attribute walk."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            yield from _walk(full, value)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name!r} shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()


def _walk(name, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


def parameter(data):
    return Tensor(data, requires_grad=True)


def xavier_uniform(rng, n_in, n_out):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, init="xavier"):
        if init == "xavier":
            w = xavier_uniform(rng, n_in, n_out)
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        out = matmul(x, self.weight)
        return out if self.bias is None else add(out, self.bias)


class MLP(Module):
    """Affine stack with ReLU between layers; the final layer is linear."""

    def __init__(self, dims, rng, final_init="xavier"):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, init=final_init if i == len(dims) - 2 else "xavier")
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class Norm(Module):
    """Learned affine layer-normalization parameters for the last axis."""

    def __init__(self, dim, eps=1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        from .tensor import layer_norm

        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, count, dim, rng, scale=0.02):
        self.table = parameter(rng.normal(0.0, scale, size=(count, dim)))

    def __call__(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.data.shape[0]):
            raise ValueError(f"embedding id out of range [0, {self.table.data.shape[0]})")
        return take(self.table, ids)
