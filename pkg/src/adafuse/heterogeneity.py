"""Reference-model-guided modality weights."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import MODALITIES
from .layers import MLPHead, Module
from .tensorcore import Tensor, ops


class ReferenceModel(Module):
    """Unimodal predictor on a detached latent embedding; output in (0, 1)."""

    def __init__(self, modality: str, rng, dropout: float = 0.4, d_in: int = 16):
        self.modality = modality
        self.mlp = MLPHead(f"ref.{modality}", d_in, rng, dropout)

    def __call__(self, latent, ctx) -> Tensor:
        return self.mlp(latent, ctx)


class ReferenceModels(Module):
    def __init__(self, rng, dropout: float = 0.4):
        self.models = {m: ReferenceModel(m, rng, dropout) for m in MODALITIES}

    def __getitem__(self, m):
        return self.models[m]


def reference_predict(model: ReferenceModel, latent, ctx) -> np.ndarray:
    return model(latent, ctx).data


def mse(pred, target) -> Tensor:
    diff = ops.sub(pred, target)
    return ops.mean(ops.mul(diff, diff))


def reference_loss(model: ReferenceModel, latents, labels, ctx) -> float:
    """Mean squared error of ``model`` on a (validation) set."""
    if len(labels) == 0:
        raise ValueError("reference loss needs a non-empty set")
    return mse(model(latents, ctx), np.asarray(labels, dtype=float)).item()


def compute_target_weights(losses, beta: float) -> np.ndarray:
    """Softmax of ``-beta * loss`` over the three modalities."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = -beta * np.asarray(losses, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True)
class ModalityWeights:
    w: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))
    alpha: float = 0.5
    beta: float = 50.0
    last_ref_losses: tuple | None = None

    def as_dict(self):
        return dict(zip(MODALITIES, self.w.tolist()))


def update_weights(weights: ModalityWeights, target, ref_losses=None) -> ModalityWeights:
    """Exponential moving average towards the target weights."""
    a = weights.alpha
    new = a * weights.w + (1.0 - a) * np.asarray(target, dtype=float)
    return replace(weights, w=new,
                   last_ref_losses=tuple(ref_losses) if ref_losses is not None else weights.last_ref_losses)


def weighted_concat(h_a, h_v, h_l, w) -> Tensor:
    """``w_A h_A (+) w_V h_V (+) w_L h_L`` along the last axis."""
    w = np.asarray(w, dtype=float)
    return ops.concat([ops.scale(h_a, w[0]), ops.scale(h_v, w[1]), ops.scale(h_l, w[2])], axis=-1)
