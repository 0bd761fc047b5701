"""Small neural-net building blocks on top of the autodiff tensor."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class: collects Parameters (requires_grad tensors) recursively.

    Parameter order follows attribute insertion order, which is fixed by
    construction, so checkpoints and optimizer state line up run to run.
    """

    def parameters(self):
        """Flat name -> Tensor dict over this module and its children."""
        out = {}
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, t in value.parameters().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, t in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = t
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def load_values(self, arrays):
        """Overwrite parameter values in place from a name -> array dict."""
        params = self.parameters()
        for name, arr in arrays.items():
            p = params[name]
            if p.shape != arr.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.values = np.asarray(arr, dtype=p.values.dtype)


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, zero_init=False, bias_init=0.0):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = glorot(rng, in_dim, out_dim, (in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(out_dim, float(bias_init)), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Plain relu MLP; the head layer is linear (activations applied by callers)."""

    def __init__(self, in_dim, hidden, depth, out_dim, rng, zero_init_head=False, head_bias=0.0):
        layers = []
        d = in_dim
        for _ in range(depth):
            layers.append(Linear(d, hidden, rng))
            d = hidden
        self.layers = layers
        self.head = Linear(d, out_dim, rng, zero_init=zero_init_head, bias_init=head_bias)

    def __call__(self, x):
        for layer in self.layers:
            x = ad.relu(layer(x))
        return self.head(x)


class Conv2dLayer(Module):
    def __init__(self, in_ch, out_ch, rng, kernel=3, stride=1, padding=1):
        fan_in = kernel * kernel * in_ch
        self.weight = Tensor(
            glorot(rng, fan_in, out_ch, (kernel, kernel, in_ch, out_ch)), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding) + self.bias


class Conv3dLayer(Module):
    def __init__(self, in_ch, out_ch, rng, kernel=3, stride=1, padding=1):
        fan_in = kernel ** 3 * in_ch
        self.weight = Tensor(
            glorot(rng, fan_in, out_ch, (kernel, kernel, kernel, in_ch, out_ch)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv3d(x, self.weight, stride=self.stride, padding=self.padding) + self.bias


class PositionalEncoding:
    """NeRF-style Fourier features: [x, sin(2^k pi x), cos(2^k pi x)].

    Output dimension is 3 * 2 * num_frequencies + 3 for 3-vector inputs
    with include_input on.
    """

    def __init__(self, num_frequencies=6, include_input=True):
        self.num_frequencies = num_frequencies
        self.include_input = include_input
        self.freqs = (2.0 ** np.arange(num_frequencies)) * np.pi

    def out_dim(self, in_dim=3):
        return in_dim * 2 * self.num_frequencies + (in_dim if self.include_input else 0)

    def __call__(self, x):
        parts = [x] if self.include_input else []
        for f in self.freqs:
            scaled = x * f
            parts.append(ad.sin(scaled))
            parts.append(ad.cos(scaled))
        return ad.concat(parts, axis=-1)
