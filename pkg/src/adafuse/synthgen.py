"""Seeded synthetic multimodal datasets with known alignment and noise.

Each clip draws a shared latent ``z`` and one private latent ``u_m`` per
modality (all standard normal, size ``shared_dim``). Every timestep of
modality m is

    x_t = rho * z @ P_m + (1 - rho) * u_m @ Q_m + sigma_m * eps_t

with projection matrices P_m, Q_m fixed by the seed. The label score is

    s = z . w + (1 - rho) * sum_m u_m . v_m

squashed with tanh for IPP or thresholded at 0 for DOP. With rho = 0 the
shared latent never reaches the features, so no modality determines the
label except through its own private term. Meta features (initial vote
share, speaking length in seconds) are drawn independently of the label.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .datamodel import MODALITIES, FeatureClip, make_manifest


@dataclass(frozen=True)
class SynthConfig:
    n_episodes: int = 12
    clips_per_episode: int = 20
    seq_len_range: tuple = ((8, 16), (8, 16), (8, 16))
    d_A: int = 8
    d_V: int = 12
    d_L: int = 10
    shared_dim: int = 4
    noise: tuple = (0.1, 0.1, 0.1)
    alignment_strength: float = 0.7
    task: str = "IPP"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seq_len_range",
                           tuple(tuple(int(v) for v in r) for r in self.seq_len_range))
        object.__setattr__(self, "noise", tuple(float(s) for s in self.noise))
        self.validate()

    def validate(self):
        if self.n_episodes < 1 or self.clips_per_episode < 1:
            raise ValueError("n_episodes and clips_per_episode must be >= 1")
        if min(self.d_A, self.d_V, self.d_L, self.shared_dim) < 2:
            raise ValueError("all dims must be >= 2")
        if len(self.noise) != 3 or any(not s >= 0 for s in self.noise):
            raise ValueError(f"noise levels must be three values >= 0, got {self.noise}")
        if not 0.0 <= self.alignment_strength <= 1.0:
            raise ValueError("alignment_strength must lie in [0, 1]")
        if len(self.seq_len_range) != 3 or any(lo < 1 or hi < lo for lo, hi in self.seq_len_range):
            raise ValueError(f"bad seq_len_range {self.seq_len_range}")
        if self.task not in ("IPP", "DOP"):
            raise ValueError(f"unknown task {self.task!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def dims(self):
        return {"A": self.d_A, "V": self.d_V, "L": self.d_L}

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seq_len_range"] = [list(r) for r in self.seq_len_range]
        d["noise"] = list(self.noise)
        return d


@dataclass(frozen=True)
class GeneratorState:
    """Seed-fixed projections; exposed so tests can reason about ground truth."""

    shared_proj: dict
    private_proj: dict
    label_shared: np.ndarray
    label_private: dict


def generator_state(config: SynthConfig) -> GeneratorState:
    rng = np.random.default_rng([config.seed, 0])
    k = config.shared_dim
    scale = 1.0 / np.sqrt(k)
    # unit variance per feature dimension for a standard-normal latent
    shared = {m: rng.normal(0.0, scale, (k, config.dims[m])) for m in MODALITIES}
    private = {m: rng.normal(0.0, scale, (k, config.dims[m])) for m in MODALITIES}
    w = rng.normal(0.0, scale, k)
    v = {m: rng.normal(0.0, scale, k) for m in MODALITIES}
    return GeneratorState(shared, private, w, v)


def _clip(config, state, index, episode, j):
    rng = np.random.default_rng([config.seed, 1, index])
    rho = config.alignment_strength
    k = config.shared_dim
    z = rng.normal(size=k)
    u = {m: rng.normal(size=k) for m in MODALITIES}
    seqs = {}
    for mi, m in enumerate(MODALITIES):
        lo, hi = config.seq_len_range[mi]
        T = int(rng.integers(lo, hi + 1))
        base = rho * (z @ state.shared_proj[m]) + (1.0 - rho) * (u[m] @ state.private_proj[m])
        eps = rng.normal(size=(T, config.dims[m]))
        seqs[m] = base[None, :] + config.noise[mi] * eps
    score = z @ state.label_shared + (1.0 - rho) * sum(u[m] @ state.label_private[m] for m in MODALITIES)
    label = float(np.tanh(score)) if config.task == "IPP" else float(score > 0)
    meta = np.array([rng.uniform(0.0, 1.0), rng.uniform(30.0, 180.0)])
    return FeatureClip(episode, f"{episode}-c{j:03d}", f"{episode}-s{j % 2}",
                       seqs["A"], seqs["V"], seqs["L"], meta, label), z, u


def generate(config: SynthConfig):
    """Build a DatasetManifest; identical configs give identical manifests."""
    return generate_with_latents(config)[0]


def generate_with_latents(config: SynthConfig):
    """Like ``generate`` but also returns per-clip (z, u) for oracle tests."""
    config.validate()
    state = generator_state(config)
    episodes = [f"E{i + 1:02d}" for i in range(config.n_episodes)]
    clips, latents, index = [], [], 0
    for ep in episodes:
        for j in range(config.clips_per_episode):
            c, z, u = _clip(config, state, index, ep, j)
            clips.append(c)
            latents.append((z, u))
            index += 1
    return make_manifest(config.task, config.dims, episodes, clips), latents, state
