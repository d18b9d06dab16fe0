"""Graph convolution layers over a K-support set.

Both layers compute ``Z = sum_k S_k X Theta_k + b``.  In the node-adaptive
layer ``Theta`` and ``b`` are generated per node from the node embedding and
a shared weight/bias pool; in the classic layer they are shared by all nodes.
"""
from __future__ import annotations

import math

import numpy as np

from .graph import SupportSet
from .numerics import Parameter, ShapeError, Tensor, as_tensor, matmul, permute, pool_contract, reshape


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _stacked(supports) -> Tensor:
    if isinstance(supports, SupportSet):
        return supports.stacked()
    s = as_tensor(supports)
    if s.ndim != 3 or s.shape[1] != s.shape[2]:
        raise ShapeError(f"stacked supports must be K x N x N, got {s.shape}")
    return s


def propagate(x, supports) -> Tensor:
    """Apply every support to ``x`` (B x N x C) giving B x K x N x C."""
    s = _stacked(supports)
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != s.shape[2]:
        raise ShapeError(f"input {x.shape} does not match supports {s.shape}")
    b, n, c = x.shape
    return matmul(s, reshape(x, (b, 1, n, c)))


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeeze else out


def node_params(emb, wp, bp) -> tuple[Tensor, Tensor]:
    """Per-node weights (N x K x Cin x Cout) and biases (N x Cout)."""
    wp, bp = as_tensor(wp), as_tensor(bp)
    if bp.ndim != 2 or bp.shape[0] != wp.shape[0] or bp.shape[1] != wp.shape[3]:
        raise ShapeError(f"bias pool {bp.shape} does not match weight pool {wp.shape}")
    return pool_contract(emb, wp), matmul(as_tensor(emb), bp)


def napl_apply(xg: Tensor, theta: Tensor, bias: Tensor) -> Tensor:
    """Contract propagated features (B x K x N x Cin) with per-node weights."""
    if xg.shape[1:] != theta.shape[1:2] + theta.shape[0:1] + theta.shape[2:3]:
        raise ShapeError(f"propagated input {xg.shape} vs node weights {theta.shape}")
    b, k, n, c = xg.shape
    # per-node matmul: (N, B, K*Cin) @ (N, K*Cin, Cout)
    xn = reshape(permute(xg, (2, 0, 1, 3)), (n, b, k * c))
    out = matmul(xn, reshape(theta, (n, k * c, theta.shape[3])))
    return permute(out, (1, 0, 2)) + bias


def napl_gcn(x, supports, emb, wp, bp) -> Tensor:
    """Node-adaptive graph convolution.

    ``x`` is N x Cin (or B x N x Cin), ``emb`` N x d, ``wp`` d x K x Cin x Cout
    and ``bp`` d x Cout.
    """
    s = _stacked(supports)
    wp = as_tensor(wp)
    if wp.ndim != 4 or wp.shape[1] != s.shape[0]:
        raise ShapeError(f"weight pool {wp.shape} does not match {s.shape[0]} supports")
    xb, squeeze = _batched(x)
    theta, bias = node_params(emb, wp, bp)
    return _unbatch(napl_apply(propagate(xb, s), theta, bias), squeeze)


def shared_apply(xg: Tensor, theta: Tensor, bias: Tensor) -> Tensor:
    if xg.shape[1] != theta.shape[0] or xg.shape[3] != theta.shape[1]:
        raise ShapeError(f"propagated input {xg.shape} vs shared weights {theta.shape}")
    b, k, n, c = xg.shape
    xn = reshape(permute(xg, (0, 2, 1, 3)), (b, n, k * c))
    return matmul(xn, reshape(theta, (k * c, theta.shape[2]))) + bias


def shared_gcn(x, supports, theta, bias) -> Tensor:
    """Classic GCN with weights ``theta`` (K x Cin x Cout) shared by all nodes."""
    s = _stacked(supports)
    theta = as_tensor(theta)
    if theta.ndim != 3 or theta.shape[0] != s.shape[0]:
        raise ShapeError(f"shared weights {theta.shape} do not match {s.shape[0]} supports")
    xb, squeeze = _batched(x)
    return _unbatch(shared_apply(propagate(xb, s), theta, as_tensor(bias)), squeeze)


class NAPLGraphConv:
    """Weight pool ``d x K x Cin x Cout`` plus bias pool ``d x Cout``."""

    def __init__(self, name: str, embed_dim: int, k: int, c_in: int, c_out: int,
                 rng: np.random.Generator):
        bound = glorot_bound(k * c_in, c_out)
        self.weights = Parameter(rng.uniform(-bound, bound, (embed_dim, k, c_in, c_out)),
                                 f"{name}.weight_pool")
        self.bias = Parameter(np.zeros((embed_dim, c_out)), f"{name}.bias_pool")

    def parameters(self) -> list[Parameter]:
        return [self.weights, self.bias]

    def bind(self, emb):
        """Generate node parameters once; returns ``f(xg) -> output``.

        Used by the recurrent cell so the per-node weights are formed once per
        sequence rather than once per step.
        """
        theta, bias = node_params(emb, self.weights, self.bias)
        return lambda xg: napl_apply(xg, theta, bias)

    def __call__(self, x, supports, emb) -> Tensor:
        return napl_gcn(x, supports, emb, self.weights, self.bias)


class SharedGraphConv:
    """Shared ``K x Cin x Cout`` weights and a ``Cout`` bias."""

    def __init__(self, name: str, k: int, c_in: int, c_out: int, rng: np.random.Generator):
        bound = glorot_bound(k * c_in, c_out)
        self.weights = Parameter(rng.uniform(-bound, bound, (k, c_in, c_out)), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.weights, self.bias]

    def bind(self, emb=None):
        return lambda xg: shared_apply(xg, self.weights, self.bias)

    def __call__(self, x, supports, emb=None) -> Tensor:
        return shared_gcn(x, supports, self.weights, self.bias)
