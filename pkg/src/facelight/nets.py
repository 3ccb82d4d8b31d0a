"""Fully-connected field networks shared by the material and geometry modules.

An :class:`MLP` owns references to leaf Tensors registered on a ParamTape (or
plain ndarrays once frozen).  Forward evaluation is written against the
generic tape ops, so it is differentiable with respect to the weights and,
when the input is a Tensor, with respect to the input as well.

For scalar-output networks, :meth:`MLP.input_gradient` returns the exact
spatial gradient as a composition of tape ops (a reverse sweep through the
stored pre-activations), which keeps d(gradient)/d(weights) available to the
optimizer without any nested tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class MLPSpec:
    """Architecture descriptor; serialized into weight-blob sidecars."""

    in_dim: int
    hidden: list[int]
    out_dim: int
    activation: str = "softplus"  # sine | softplus | tanh
    w0: float = 30.0              # sine frequency scale
    softplus_beta: float = 100.0
    final_zero: bool = False      # zero-init the output layer
    final_bias: list[float] | None = None

    def layer_dims(self):
        dims = [self.in_dim] + list(self.hidden) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_json(self) -> dict:
        d = {"in_dim": self.in_dim, "hidden": list(self.hidden),
             "out_dim": self.out_dim, "activation": self.activation,
             "w0": self.w0, "softplus_beta": self.softplus_beta,
             "final_zero": self.final_zero}
        if self.final_bias is not None:
            d["final_bias"] = list(map(float, self.final_bias))
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "MLPSpec":
        return cls(**obj)


class MLP:
    """Feed-forward network; hidden layers share one activation, output is linear."""

    def __init__(self, spec: MLPSpec, weights, biases):
        self.spec = spec
        self.weights = weights  # list of (in, out) Tensors/arrays
        self.biases = biases    # list of (out,) Tensors/arrays

    @classmethod
    def create(cls, tape, name: str, spec: MLPSpec, gen: np.random.Generator,
               group: str = "default") -> "MLP":
        """Initialize and register parameters on `tape`.

        Sine networks use the sinusoidal-network initialization (uniform
        1/fan_in on the first layer, sqrt(6/fan_in)/w0 after); other
        activations use Xavier-uniform.
        """
        weights, biases = [], []
        dims = spec.layer_dims()
        n_layers = len(dims)
        for i, (fan_in, fan_out) in enumerate(dims):
            last = i == n_layers - 1
            if spec.activation == "sine":
                if i == 0:
                    bound = 1.0 / fan_in
                else:
                    bound = np.sqrt(6.0 / fan_in) / spec.w0
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = gen.uniform(-bound, bound, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if last:
                if spec.final_zero:
                    w = np.zeros_like(w)
                if spec.final_bias is not None:
                    if len(spec.final_bias) != fan_out:
                        raise ValueError("final_bias length mismatch")
                    b = np.asarray(spec.final_bias, dtype=np.float64)
            weights.append(tape.add(f"{name}.w{i}", w, group=group))
            biases.append(tape.add(f"{name}.b{i}", b, group=group))
        return cls(spec, weights, biases)

    @classmethod
    def frozen(cls, spec: MLPSpec, arrays: dict) -> "MLP":
        """Build from saved arrays (w0, b0, w1, ...) without a tape."""
        n = len(spec.layer_dims())
        weights = [np.asarray(arrays[f"w{i}"], dtype=np.float64) for i in range(n)]
        biases = [np.asarray(arrays[f"b{i}"], dtype=np.float64) for i in range(n)]
        return cls(spec, weights, biases)

    def param_arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = ad.value_of(w)
            out[f"b{i}"] = ad.value_of(b)
        return out

    # -- activation helpers ---------------------------------------------------
    def _act(self, z):
        a = self.spec.activation
        if a == "sine":
            return ad.sin(self.spec.w0 * z)
        if a == "softplus":
            return ad.softplus(z, beta=self.spec.softplus_beta)
        if a == "tanh":
            return ad.tanh(z)
        raise ValueError(f"unknown activation {a!r}")

    def _act_deriv(self, z):
        a = self.spec.activation
        if a == "sine":
            return self.spec.w0 * ad.cos(self.spec.w0 * z)
        if a == "softplus":
            return ad.sigmoid(self.spec.softplus_beta * z)
        if a == "tanh":
            t = ad.tanh(z)
            return 1.0 - t * t
        raise ValueError(f"unknown activation {a!r}")

    # -- evaluation -------------------------------------------------------------
    def forward(self, x, keep_pre=False):
        """Evaluate on (N, in_dim) input; returns (N, out_dim).

        keep_pre additionally returns the per-layer pre-activations needed by
        :meth:`input_gradient`.
        """
        pre = []
        h = x
        n_layers = len(self.weights)
        for i in range(n_layers):
            z = ad.matmul(h, self.weights[i]) + self.biases[i]
            if i < n_layers - 1:
                pre.append(z)
                h = self._act(z)
            else:
                h = z
        return (h, pre) if keep_pre else h

    def input_gradient(self, x, pre=None):
        """d(out)/d(x) for scalar-output networks, shape (N, in_dim).

        The sweep multiplies transposed layer Jacobians, expressed in tape
        ops, so the result remains differentiable with respect to weights.
        """
        if self.spec.out_dim != 1:
            raise ValueError("input_gradient requires a scalar output")
        if pre is None:
            _, pre = self.forward(x, keep_pre=True)
        # u starts as the output layer weight row, broadcast per sample
        n_layers = len(self.weights)
        w_last = self.weights[-1]  # (hidden_last, 1)
        u = ad.transpose(w_last)   # (1, hidden_last)
        # walk hidden layers backwards
        for i in range(n_layers - 2, -1, -1):
            u = self._act_deriv(pre[i]) * u          # (N, hidden_i)
            u = ad.matmul(u, ad.transpose(self.weights[i]))  # (N, in_{i})
        return u
