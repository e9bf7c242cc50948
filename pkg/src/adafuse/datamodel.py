"""Clip records, the JSONL manifest format and fold construction.

Manifest layout (UTF-8, LF line endings)::

    {"task": "IPP", "d_A": 8, "d_V": 12, "d_L": 10, "episodes": ["E1", ...]}
    {"episode_id": "E1", "clip_id": "c0", "speaker_id": "s0",
     "acoustic": [[...], ...], "visual": [[...]], "language": [[...]],
     "meta": [v0, v1], "label": 0.25}
    ...

Sequences are stored time-major: one inner list per timestep.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


MODALITIES = ("A", "V", "L")
MODALITY_KEYS = {"A": "acoustic", "V": "visual", "L": "language"}
TASKS = ("IPP", "DOP")


class DataError(ValueError):
    """Malformed or inconsistent dataset."""


@dataclass(frozen=True)
class FeatureClip:
    episode_id: str
    clip_id: str
    speaker_id: str
    acoustic: np.ndarray
    visual: np.ndarray
    language: np.ndarray
    meta: np.ndarray
    label: float

    def sequence(self, modality: str) -> np.ndarray:
        return getattr(self, MODALITY_KEYS[modality])


@dataclass(frozen=True)
class DatasetManifest:
    task: str
    d_A: int
    d_V: int
    d_L: int
    episodes: tuple[str, ...]
    clips: tuple[FeatureClip, ...]

    @property
    def dims(self) -> dict[str, int]:
        return {"A": self.d_A, "V": self.d_V, "L": self.d_L}

    def clips_in(self, episodes) -> list[FeatureClip]:
        wanted = set(episodes)
        return [c for c in self.clips if c.episode_id in wanted]


@dataclass(frozen=True)
class Fold:
    test_episodes: tuple[str, ...]
    val_episodes: tuple[str, ...]
    train_episodes: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    scheme: str
    folds: tuple[Fold, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.folds)


def validate_clip(clip: FeatureClip, task: str, dims: dict[str, int]) -> None:
    cid = clip.clip_id
    for m in MODALITIES:
        seq = clip.sequence(m)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise DataError(f"clip {cid}: {MODALITY_KEYS[m]} must be a non-empty [T x d] matrix")
        if seq.shape[1] != dims[m]:
            raise DataError(f"clip {cid}: {MODALITY_KEYS[m]} dim {seq.shape[1]} != d_{m}={dims[m]}")
        if not np.all(np.isfinite(seq)):
            raise DataError(f"clip {cid}: non-finite {MODALITY_KEYS[m]} features")
    if clip.meta.shape != (2,) or not np.all(np.isfinite(clip.meta)):
        raise DataError(f"clip {cid}: meta must be 2 finite values")
    y = clip.label
    if not math.isfinite(y):
        raise DataError(f"clip {cid}: non-finite label")
    if task == "IPP" and not -1.0 <= y <= 1.0:
        raise DataError(f"clip {cid}: IPP label {y} outside [-1, 1]")
    if task == "DOP" and y not in (0.0, 1.0):
        raise DataError(f"clip {cid}: DOP label {y} not in {{0, 1}}")


def make_manifest(task, dims, episodes, clips) -> DatasetManifest:
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    if not clips:
        raise DataError("empty dataset")
    episodes = tuple(episodes)
    if len(set(episodes)) != len(episodes):
        raise DataError("duplicate episode ids")
    known = set(episodes)
    for clip in clips:
        if clip.episode_id not in known:
            raise DataError(f"clip {clip.clip_id}: episode {clip.episode_id!r} not in header")
        validate_clip(clip, task, dims)
    return DatasetManifest(task, dims["A"], dims["V"], dims["L"], episodes, tuple(clips))


def _clip_from_obj(obj, lineno) -> FeatureClip:
    try:
        return FeatureClip(
            episode_id=str(obj["episode_id"]),
            clip_id=str(obj["clip_id"]),
            speaker_id=str(obj["speaker_id"]),
            acoustic=np.asarray(obj["acoustic"], dtype=float),
            visual=np.asarray(obj["visual"], dtype=float),
            language=np.asarray(obj["language"], dtype=float),
            meta=np.asarray(obj["meta"], dtype=float),
            label=float(obj["label"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        cid = obj.get("clip_id", f"<line {lineno}>") if isinstance(obj, dict) else f"<line {lineno}>"
        raise DataError(f"clip {cid}: malformed record ({exc})") from None


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        dims = {m: int(header[f"d_{m}"]) for m in MODALITIES}
        task = header["task"]
        episodes = [str(e) for e in header["episodes"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad header ({exc})") from None
    clips = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed JSON ({exc})") from None
        clips.append(_clip_from_obj(obj, lineno))
    return make_manifest(task, dims, episodes, clips)


def _clip_to_obj(clip: FeatureClip) -> dict:
    return {
        "episode_id": clip.episode_id,
        "clip_id": clip.clip_id,
        "speaker_id": clip.speaker_id,
        "acoustic": clip.acoustic.tolist(),
        "visual": clip.visual.tolist(),
        "language": clip.language.tolist(),
        "meta": clip.meta.tolist(),
        "label": float(clip.label),
    }


def dumps_manifest(manifest: DatasetManifest) -> str:
    header = {"task": manifest.task, "d_A": manifest.d_A, "d_V": manifest.d_V,
              "d_L": manifest.d_L, "episodes": list(manifest.episodes)}
    lines = [json.dumps(header)] + [json.dumps(_clip_to_obj(c)) for c in manifest.clips]
    return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_bytes(dumps_manifest(manifest).encode("utf-8"))


def make_rolling_folds(manifest: DatasetManifest, n_folds: int) -> FoldPlan:
    """Rolling-window folds over the temporally ordered episodes.

    The fold for test episode E_i trains on E_1..E_{i-3} and validates on
    E_{i-2}, E_{i-1}. The last ``n_folds`` episodes serve as test episodes.
    """
    eps = manifest.episodes
    k = len(eps)
    if n_folds < 1:
        raise DataError("n_folds must be >= 1")
    if k < n_folds + 3:
        raise DataError(f"rolling folds need at least {n_folds + 3} episodes, got {k}")
    folds = []
    for i in range(k - n_folds, k):  # 0-based index of the test episode
        folds.append(Fold(test_episodes=(eps[i],), val_episodes=(eps[i - 2], eps[i - 1]),
                          train_episodes=tuple(eps[: i - 2])))
    return FoldPlan("rolling", tuple(folds))


def make_cross_validation_folds(manifest: DatasetManifest, n_folds: int) -> FoldPlan:
    """Episode-grouped k-fold: group i tests, group i+1 (cyclic) validates."""
    eps = list(manifest.episodes)
    if n_folds < 2:
        raise DataError("cross validation needs n_folds >= 2")
    if len(eps) < n_folds:
        raise DataError(f"{len(eps)} episodes cannot fill {n_folds} folds")
    groups = [tuple(g) for g in np.array_split(np.array(eps, dtype=object), n_folds)]
    folds = []
    for i in range(n_folds):
        val_i = (i + 1) % n_folds
        train = tuple(e for j, g in enumerate(groups) if j not in (i, val_i) for e in g)
        folds.append(Fold(test_episodes=groups[i], val_episodes=groups[val_i], train_episodes=train))
    return FoldPlan("cv", tuple(folds))


@dataclass(frozen=True)
class MetaScaler:
    lo: np.ndarray
    hi: np.ndarray

    def transform(self, meta: np.ndarray) -> np.ndarray:
        span = self.hi - self.lo
        const = span == 0
        scaled = (meta - self.lo) / np.where(const, 1.0, span)
        return np.where(const, 0.5, np.clip(scaled, 0.0, 1.0))


def fit_meta_scaler(train_clips) -> MetaScaler:
    if not train_clips:
        raise DataError("cannot fit meta normalisation on an empty training set")
    meta = np.stack([c.meta for c in train_clips])
    lo, hi = meta.min(axis=0), meta.max(axis=0)
    if np.any(hi == lo):
        warnings.warn("constant meta feature in training fold; mapped to 0.5", RuntimeWarning,
                      stacklevel=2)
    return MetaScaler(lo, hi)


def normalize_meta(train_clips, apply_clips) -> list[FeatureClip]:
    """Min-max scale meta features with bounds fitted on ``train_clips`` only."""
    scaler = fit_meta_scaler(train_clips)
    return [replace(c, meta=scaler.transform(c.meta)) for c in apply_clips]
