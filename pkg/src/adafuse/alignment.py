"""Shared projection and the cosine + deep-CORAL alignment objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

from .layers import Linear, Module
from .tensorcore import Tensor, constant, ops

D_SHARED = 16


class SharedProjector(Module):
    """One FC16+ReLU applied, with the same weights, to every modality."""

    def __init__(self, rng, d_in: int = 16, dropout: float = 0.4, name: str = "shared"):
        self.fc = Linear(f"{name}.fc", d_in, D_SHARED, rng)
        self.dropout = dropout

    def __call__(self, latent, ctx):
        h = ops.relu(self.fc(latent))
        return ops.dropout(h, self.dropout, ctx.rng, ctx.training)


def cosine_loss(a, b) -> Tensor:
    """Batch mean of ``1 - cos(a_i, b_i)`` for ``[B, d]`` inputs."""
    return ops.sub(1.0, ops.mean(ops.cosine_similarity(a, b, axis=-1)))


def covariance(x) -> Tensor:
    """Unbiased feature covariance of a ``[B, d]`` batch."""
    B = x.shape[0]
    if B < 2:
        raise ValueError("coral needs batch >= 2")
    col_sum = ops.sum(x, axis=0, keepdims=True)  # [1, d]
    gram = ops.matmul(ops.transpose(x, (1, 0)), x)
    outer = ops.scale(ops.matmul(ops.transpose(col_sum, (1, 0)), col_sum), 1.0 / B)
    return ops.scale(ops.sub(gram, outer), 1.0 / (B - 1))


def coral_loss(a, b) -> Tensor:
    """Squared Frobenius distance of batch covariances, scaled by 1/(4 d^2)."""
    if a.shape != b.shape:
        raise ValueError(f"coral: batch shapes {a.shape} and {b.shape} differ")
    d = a.shape[-1]
    return ops.scale(ops.sum_squares(ops.sub(covariance(a), covariance(b))), 1.0 / (4.0 * d * d))


@dataclass
class AlignmentResult:
    h_align: Tensor
    loss: Tensor
    components: dict = field(default_factory=dict)  # (m, n) -> {"cos": float, "da": float}


def alignment_loss(projected: dict, use_da: bool = True):
    """Sum over unordered modality pairs of cosine (+ CORAL) terms.

    Returns (loss Tensor, per-pair component values).
    """
    total = None
    components = {}
    for m, n in combinations(sorted(projected, key="AVL".index), 2):
        lc = cosine_loss(projected[m], projected[n])
        term = lc
        comp = {"cos": lc.item(), "da": 0.0}
        if use_da:
            ld = coral_loss(projected[m], projected[n])
            term = ops.add(lc, ld)
            comp["da"] = ld.item()
        components[(m, n)] = comp
        total = term if total is None else ops.add(total, term)
    if total is None:
        total = constant(0.0)
    return total, components


def fuse_aligned(h_a, h_v, h_l) -> Tensor:
    return ops.scale(ops.add(ops.add(h_a, h_v), h_l), 1.0 / 3.0)


def mean_pairwise_cosine(projected: dict) -> float:
    """Diagnostic: average cosine similarity over pairs and samples."""
    sims = [ops.cosine_similarity(projected[m], projected[n]).data.mean()
            for m, n in combinations(sorted(projected, key="AVL".index), 2)]
    return float(sum(sims) / len(sims))
