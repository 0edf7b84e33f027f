"""Small layers and an AdamW optimiser built on :mod:`eawm.autodiff`."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Container that discovers parameters and sub-modules by attribute."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero=False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class NormLayer(Module):
    """Linear -> LayerNorm (with affine scale/shift) -> SiLU."""

    def __init__(self, n_in, n_out, rng):
        self.linear = Linear(n_in, n_out, rng, bias=False)
        self.scale = Tensor(np.ones(n_out), requires_grad=True)
        self.shift = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return ad.norm_silu(x, self.linear.weight, self.scale, self.shift, eps=1e-3)


class MLP(Module):
    """``layers`` NormLayers followed by a plain linear output."""

    def __init__(self, n_in, n_hidden, n_out, rng, layers=1, zero_out=False):
        dims = [n_in] + [n_hidden] * layers
        self.hidden = [NormLayer(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], n_out, rng, zero=zero_out)

    def __call__(self, x):
        for layer in self.hidden:
            x = layer(x)
        return self.out(x)


class GRUCell(Module):
    """Layer-normalised GRU in the style used by recurrent state-space models.

    ``update = sigmoid(u - 1)`` biases the cell towards keeping its state.
    """

    def __init__(self, n_in, n_hidden, rng):
        self.n_hidden = n_hidden
        self.linear = Linear(n_in + n_hidden, 3 * n_hidden, rng, bias=False)
        self.scale = Tensor(np.ones(3 * n_hidden), requires_grad=True)
        self.shift = Tensor(np.zeros(3 * n_hidden), requires_grad=True)

    def __call__(self, x, h):
        return ad.gru_cell(x, h, self.linear.weight, self.scale, self.shift, eps=1e-3)


def global_norm(params):
    return float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params])))


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = global_norm(params)
    if np.isfinite(norm) and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * factor
    return norm


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m.{i}"]
            self.v[i][...] = arrays[f"v.{i}"]
