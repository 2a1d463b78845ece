"""Neural building blocks: FC layers, GRU cells, attention pooling,
diagonal-Gaussian heads and reparameterized sampling.

All blocks accept either a single vector (d,) or a batch (B, d); batched
inputs are processed in one tape node per operation. Parameters are
float64 tensors registered with ``requires_grad=True`` and initialized
uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with zero biases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


def _init_matrix(rng: np.random.Generator, out_dim: int, in_dim: int) -> Tensor:
    bound = 1.0 / np.sqrt(in_dim)
    return Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)), requires_grad=True)


def _zeros(dim: int) -> Tensor:
    return Tensor(np.zeros(dim), requires_grad=True)


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a vector x, or x @ weight.T + bias for a batch."""
    if x.ndim == 1:
        return T.matmul(weight, x) + bias
    return T.matmul(x, T.transpose(weight)) + bias


@dataclass
class GaussianParams:
    """Diagonal Gaussian over a latent vector: mean and log-variance."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(
                f"mean {self.mean.shape} vs log_var {self.log_var.shape}"
            )


class FcLayer:
    """Fully connected layer with optional tanh/softmax activation."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "none",
                 rng: np.random.Generator | None = None):
        if activation not in ("none", "tanh", "softmax"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = _init_matrix(rng, out_dim, in_dim)
        self.bias = _zeros(out_dim)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"fc expects last dim {self.in_dim}, got {x.shape}")
        y = _linear(x, self.weight, self.bias)
        if self.activation == "tanh":
            return T.tanh(y)
        if self.activation == "softmax":
            return T.softmax_lastdim(y)
        return y

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class GruCell:
    """Standard GRU recurrence shared across time steps.

    z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
    n = tanh(Wn x + Un (r*h) + bn), h' = (1-z)*n + z*h.
    """

    def __init__(self, input_dim: int, hidden_dim: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_z = _init_matrix(rng, hidden_dim, input_dim)
        self.u_z = _init_matrix(rng, hidden_dim, hidden_dim)
        self.b_z = _zeros(hidden_dim)
        self.w_r = _init_matrix(rng, hidden_dim, input_dim)
        self.u_r = _init_matrix(rng, hidden_dim, hidden_dim)
        self.b_r = _zeros(hidden_dim)
        self.w_n = _init_matrix(rng, hidden_dim, input_dim)
        self.u_n = _init_matrix(rng, hidden_dim, hidden_dim)
        self.b_n = _zeros(hidden_dim)

    def step(self, x: Tensor, h_prev: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim or h_prev.shape[-1] != self.hidden_dim:
            raise DimensionError(
                f"gru expects input {self.input_dim}/hidden {self.hidden_dim}, "
                f"got {x.shape}/{h_prev.shape}"
            )
        z = T.sigmoid(_linear(x, self.w_z, self.b_z) + _matvec(self.u_z, h_prev))
        r = T.sigmoid(_linear(x, self.w_r, self.b_r) + _matvec(self.u_r, h_prev))
        n = T.tanh(_linear(x, self.w_n, self.b_n) + _matvec(self.u_n, r * h_prev))
        return (1.0 - z) * n + z * h_prev

    def parameters(self):
        return [
            ("w_z", self.w_z), ("u_z", self.u_z), ("b_z", self.b_z),
            ("w_r", self.w_r), ("u_r", self.u_r), ("b_r", self.b_r),
            ("w_n", self.w_n), ("u_n", self.u_n), ("b_n", self.b_n),
        ]


def _matvec(weight: Tensor, h: Tensor) -> Tensor:
    if h.ndim == 1:
        return T.matmul(weight, h)
    return T.matmul(h, T.transpose(weight))


class AttentionPool:
    """Single-head scaled dot-product attention over a window of vectors.

    The query is projected from the consumer's previous hidden state, keys
    and values from the window entries; the pooled output is the
    softmax-weighted sum of projected values.
    """

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.query_dim = query_dim
        self.key_dim = key_dim
        self.attn_dim = attn_dim
        self.q_proj = _init_matrix(rng, attn_dim, query_dim)
        self.k_proj = _init_matrix(rng, attn_dim, key_dim)
        self.v_proj = _init_matrix(rng, attn_dim, key_dim)

    def pool(self, window: list[Tensor], query_state: Tensor,
             return_weights: bool = False):
        if not window:
            raise ContractError("attention over an empty window")
        q = _matvec(self.q_proj, query_state)
        keys = [_matvec(self.k_proj, w) for w in window]
        values = [_matvec(self.v_proj, w) for w in window]
        scale = 1.0 / np.sqrt(self.attn_dim)
        scores = [T.sum_lastdim(q * k, keepdims=True) * scale for k in keys]
        weights = T.softmax_lastdim(T.concat_lastdim(scores))  # (B, k) or (k,)
        out = None
        for j, v in enumerate(values):
            term = T.slice_lastdim(weights, j, j + 1) * v
            out = term if out is None else out + term
        if return_weights:
            return out, weights
        return out

    def __call__(self, window, query_state):
        return self.pool(window, query_state)

    def parameters(self):
        return [("q_proj", self.q_proj), ("k_proj", self.k_proj),
                ("v_proj", self.v_proj)]


def gaussian_head(mean_layer: FcLayer, logvar_layer: FcLayer,
                  features: Tensor) -> GaussianParams:
    """Two FC heads producing a diagonal Gaussian; log-variance clamped."""
    mean = mean_layer(features)
    log_var = T.clamp(logvar_layer(features), LOG_VAR_MIN, LOG_VAR_MAX)
    return GaussianParams(mean=mean, log_var=log_var)


def reparam_sample(g: GaussianParams, noise: Tensor) -> Tensor:
    """mean + exp(log_var / 2) * noise; differentiable in mean and log_var."""
    if noise.shape != g.mean.shape:
        raise DimensionError(f"noise {noise.shape} vs mean {g.mean.shape}")
    return g.mean + T.exp(0.5 * g.log_var) * noise
