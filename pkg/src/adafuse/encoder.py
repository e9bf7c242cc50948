"""Per-modality sequence encoder.

Shapes are batch-first and time-major, ``[B, T, d]``, with a boolean
``mask[B, T]`` marking real (non-padding) timesteps.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .layers import BatchNorm, LayerNorm, Linear, Module
from .tensorcore import ops

D_MODEL = 16
N_HEADS = 4


def pad_sequences(seqs):
    """Stack variable-length ``[T_i, d]`` arrays into ``[B, T_max, d]`` plus mask."""
    if not seqs:
        raise ValueError("no sequences to pad")
    d = seqs[0].shape[1]
    T = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), T, d))
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] != d:
            raise ValueError(f"sequence {i} has shape {s.shape}, expected [T, {d}]")
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


@lru_cache(maxsize=64)
def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    pe.flags.writeable = False  # cached and shared
    return pe


@dataclass
class AttentionRecord:
    """Attention weights of one clip: ``weights[h, i, t]`` over valid steps only."""

    weights: np.ndarray

    @property
    def n_heads(self):
        return self.weights.shape[0]


def temporal_attention(record: AttentionRecord) -> np.ndarray:
    """Attention mass per timestep, averaged over all queries and heads."""
    w = record.weights
    return w.sum(axis=(0, 1)) / (w.shape[0] * w.shape[1])


def split_records(weights: np.ndarray, mask: np.ndarray) -> list[AttentionRecord]:
    """Cut batched ``[B, H, T, T]`` weights into per-clip records without padding."""
    out = []
    for b in range(weights.shape[0]):
        valid = np.flatnonzero(mask[b])
        out.append(AttentionRecord(weights[b][:, valid][:, :, valid]))
    return out


class ModalityEncoder(Module):
    def __init__(self, name: str, d_in: int, rng, dropout: float = 0.4,
                 positional: bool = True, bn_momentum: float = 0.1):
        if D_MODEL % N_HEADS:
            raise ValueError("head count must divide model dim")
        self.name = name
        self.d_in = d_in
        self.dropout = dropout
        self.positional = positional
        self.inp = Linear(f"{name}.inp", d_in, D_MODEL, rng)
        self.bn = BatchNorm(f"{name}.bn", D_MODEL, momentum=bn_momentum)
        self.q = Linear(f"{name}.attn.q", D_MODEL, D_MODEL, rng, init="xavier")
        self.k = Linear(f"{name}.attn.k", D_MODEL, D_MODEL, rng, init="xavier")
        self.v = Linear(f"{name}.attn.v", D_MODEL, D_MODEL, rng, init="xavier")
        self.o = Linear(f"{name}.attn.o", D_MODEL, D_MODEL, rng, init="xavier")
        self.ln1 = LayerNorm(f"{name}.ln1", D_MODEL)
        self.ff1 = Linear(f"{name}.ff1", D_MODEL, D_MODEL, rng)
        self.ff2 = Linear(f"{name}.ff2", D_MODEL, D_MODEL, rng)
        self.ln2 = LayerNorm(f"{name}.ln2", D_MODEL)

    def embed_inputs(self, x, mask, ctx):
        """FC + ReLU + batch-norm (+ dropout in training) per timestep."""
        if x.shape[-1] != self.d_in:
            raise ValueError(f"{self.name}: feature dim {x.shape[-1]} != {self.d_in}")
        h = ops.relu(self.inp(x))
        h = self.bn(h, ctx, mask)
        return ops.dropout(h, self.dropout, ctx.rng, ctx.training)

    def transformer_encode(self, h, mask):
        """One post-norm encoder layer; returns (output, attention [B, H, T, T])."""
        B, T, _ = h.shape
        if not np.all(mask.any(axis=1)):
            raise ValueError(f"{self.name}: sequence with no valid timesteps")
        if self.positional:
            h = ops.add(h, sinusoidal_positions(T, D_MODEL))
        dh = D_MODEL // N_HEADS

        def heads(t):
            return ops.transpose(ops.reshape(t, (B, T, N_HEADS, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.q(h)), heads(self.k(h)), heads(self.v(h))
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ops.softmax(scores, axis=-1, mask=mask[:, None, None, :])
        ctx_vec = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, T, D_MODEL))
        h1 = self.ln1(ops.add(h, self.o(ctx_vec)))
        ff = self.ff2(ops.relu(self.ff1(h1)))
        return self.ln2(ops.add(h1, ff)), attn.data

    @staticmethod
    def max_pool_latent(h, mask):
        return ops.masked_max(h, mask, axis=1)

    def __call__(self, x, mask, ctx):
        """Returns (latent [B, 16], encoder output [B, T, 16], attention [B, H, T, T])."""
        h_in = self.embed_inputs(x, mask, ctx)
        h_trans, attn = self.transformer_encode(h_in, mask)
        return self.max_pool_latent(h_trans, mask), h_trans, attn
