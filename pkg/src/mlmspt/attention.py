"""Point self-attention (single head) and multi-head self-attention.

Both add the input back onto the attention output, so the output shape
always equals the input shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, add, concat, matmul, scale, softmax_rows, transpose


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class PSAWeights:
    W_q: Tensor  # D x D'
    W_k: Tensor  # D x D'
    W_v: Tensor  # D x D

    def __post_init__(self):
        d, dp = self.W_q.shape
        if self.W_k.shape != (d, dp) or self.W_v.shape != (d, d):
            raise ShapeError(
                f"PSA weights inconsistent: W_q {self.W_q.shape}, W_k {self.W_k.shape}, W_v {self.W_v.shape}"
            )

    @classmethod
    def init(cls, rng, d: int, d_proj: int, dtype=np.float32) -> "PSAWeights":
        return cls(
            Tensor(xavier_uniform(rng, d, d_proj, dtype), requires_grad=True),
            Tensor(xavier_uniform(rng, d, d_proj, dtype), requires_grad=True),
            Tensor(xavier_uniform(rng, d, d, dtype), requires_grad=True),
        )


@dataclass
class MultiHeadWeights:
    heads: list  # per head: (W_Q, W_K, W_V), each Din x Din/M

    def __post_init__(self):
        if not self.heads:
            raise ContractError("multi-head attention needs at least one head")
        din = self.heads[0][0].shape[0]
        m = len(self.heads)
        if din % m:
            raise ContractError(f"head count {m} does not divide input width {din}")
        for h, ws in enumerate(self.heads):
            for w in ws:
                if w.shape != (din, din // m):
                    raise ShapeError(f"head {h} weight has shape {w.shape}, expected {(din, din // m)}")

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def in_dim(self) -> int:
        return self.heads[0][0].shape[0]

    @classmethod
    def init(cls, rng, din: int, m: int, dtype=np.float32) -> "MultiHeadWeights":
        if din % m:
            raise ContractError(f"head count {m} does not divide input width {din}")
        dh = din // m
        return cls([
            tuple(Tensor(xavier_uniform(rng, din, dh, dtype), requires_grad=True) for _ in range(3))
            for _ in range(m)
        ])


def attention_map(q: Tensor, k: Tensor, denom: float) -> Tensor:
    """softmax(q k^T / denom), row-stochastic."""
    return softmax_rows(scale(matmul(q, transpose(k)), 1.0 / denom))


def psa_forward(F: Tensor, w: PSAWeights, scale_by: str = "D", return_attention: bool = False):
    """softmax((F W_q)(F W_k)^T / sqrt(D)) (F W_v) + F.

    ``scale_by="Dproj"`` divides by sqrt(D') instead of sqrt(D).
    """
    d = w.W_v.shape[0]
    if F.shape[1] != d:
        raise ShapeError(f"psa_forward: features {F.shape} do not match weights for D={d}")
    if scale_by == "D":
        denom = math.sqrt(d)
    elif scale_by == "Dproj":
        denom = math.sqrt(w.W_q.shape[1])
    else:
        raise ContractError(f"unknown scale rule {scale_by!r}")
    a = attention_map(matmul(F, w.W_q), matmul(F, w.W_k), denom)
    out = add(matmul(a, matmul(F, w.W_v)), F)
    return (out, a) if return_attention else out


def multihead_forward(F: Tensor, w: MultiHeadWeights, return_attention: bool = False):
    """concat_m softmax(Q_m K_m^T / sqrt(Din/M)) V_m  +  F, no output projection."""
    din, m = w.in_dim, w.num_heads
    if F.shape[1] != din:
        raise ShapeError(f"multihead_forward: features {F.shape} do not match weights for Din={din}")
    denom = math.sqrt(din / m)
    outs, maps = [], []
    for wq, wk, wv in w.heads:
        a = attention_map(matmul(F, wq), matmul(F, wk), denom)
        outs.append(matmul(a, matmul(F, wv)))
        maps.append(a)
    out = add(concat(outs) if m > 1 else outs[0], F)
    return (out, maps) if return_attention else out
