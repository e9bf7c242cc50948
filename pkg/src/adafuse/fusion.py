"""Full model: encoders, alignment + heterogeneity fusion, final head, losses."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AlignmentResult, SharedProjector, alignment_loss, fuse_aligned
from .datamodel import MODALITIES
from .encoder import D_MODEL, ModalityEncoder, pad_sequences, split_records
from .heterogeneity import ModalityWeights, ReferenceModels, weighted_concat
from .layers import MLPHead, Module
from .tensorcore import Tensor, constant, ops

D_META = 2
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class Ablation:
    no_alignment: bool = False
    no_da_loss: bool = False
    equal_weights: bool = False
    unimodal: str = "off"  # "A" | "V" | "L" | "off"

    def __post_init__(self):
        if self.unimodal not in ("off",) + MODALITIES:
            raise ValueError(f"unimodal must be one of A, V, L, off; got {self.unimodal!r}")

    @classmethod
    def parse(cls, name: str | None) -> "Ablation":
        """``'no_alignment'``, ``'unimodal:L'``, ``'full'`` ..."""
        if name in (None, "", "full", "none"):
            return cls()
        if name.startswith("unimodal:"):
            return cls(unimodal=name.split(":", 1)[1])
        if name in ("no_alignment", "no_da_loss", "equal_weights"):
            return cls(**{name: True})
        raise ValueError(f"unknown ablation {name!r}")

    @property
    def label(self) -> str:
        if self.unimodal != "off":
            return f"unimodal:{self.unimodal}"
        on = [k for k in ("no_alignment", "no_da_loss", "equal_weights") if getattr(self, k)]
        return "+".join(on) or "full"

    @property
    def uses_weights(self) -> bool:
        """Whether the reference-model weights feed the forward pass."""
        return self.unimodal == "off" and not self.equal_weights


@dataclass(frozen=True)
class ModelConfig:
    dims: dict
    task: str = "IPP"
    ablation: Ablation = field(default_factory=Ablation)
    dropout: float = 0.4
    positional: bool = True

    def to_dict(self):
        d = asdict(self)
        d["dims"] = dict(self.dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(dims=dict(d["dims"]), task=d["task"], ablation=Ablation(**d["ablation"]),
                   dropout=d["dropout"], positional=d["positional"])


def label_to_unit(y, task):
    """Map task labels into the sigmoid range: IPP [-1,1] -> [0,1], DOP unchanged."""
    y = np.asarray(y, dtype=float)
    return (y + 1.0) / 2.0 if task == "IPP" else y


def unit_to_label(p, task):
    p = np.asarray(p, dtype=float)
    return 2.0 * p - 1.0 if task == "IPP" else p


@dataclass
class Batch:
    x: dict  # modality -> [B, T, d]
    mask: dict  # modality -> [B, T] bool
    meta: np.ndarray  # [B, 2], already normalized
    y: np.ndarray  # [B], sigmoid space
    clip_ids: list

    def __len__(self):
        return len(self.clip_ids)


def collate(clips, task) -> Batch:
    if not clips:
        raise ValueError("empty batch")
    x, mask = {}, {}
    for m in MODALITIES:
        x[m], mask[m] = pad_sequences([c.sequence(m) for c in clips])
    return Batch(x, mask, np.stack([c.meta for c in clips]),
                 label_to_unit([c.label for c in clips], task), [c.clip_id for c in clips])


@dataclass
class ForwardOutput:
    pred: Tensor  # [B] in (0, 1)
    latents: dict  # modality -> Tensor [B, 16]
    projected: dict  # modality -> Tensor [B, 16] (empty for unimodal)
    alignment: AlignmentResult | None
    attention: dict  # modality -> [B, H, T, T]


class M2P2Model(Module):
    def __init__(self, config: ModelConfig, rng):
        self.config = config
        ab = config.ablation
        self.encoders = {m: ModalityEncoder(f"enc.{m}", config.dims[m], rng, config.dropout,
                                            config.positional)
                         for m in MODALITIES}
        self.shared = SharedProjector(rng, D_MODEL, config.dropout)
        d_head = D_MODEL + D_META if ab.unimodal != "off" else D_MODEL + 3 * D_MODEL + D_META
        self.head = MLPHead("head", d_head, rng, config.dropout)
        # reference models phi are kept apart from theta (see parameters())
        self.refs = ReferenceModels(rng, config.dropout)

    @property
    def ablation(self) -> Ablation:
        return self.config.ablation

    def parameters(self) -> dict:
        """theta: everything except the reference models."""
        out = {}
        for enc in self.encoders.values():
            out.update(enc.parameters())
        out.update(self.shared.parameters())
        out.update(self.head.parameters())
        return out

    def ref_parameters(self) -> dict:
        return self.refs.parameters()

    def all_parameters(self) -> dict:
        return {**self.parameters(), **self.ref_parameters()}

    def active_modalities(self):
        u = self.ablation.unimodal
        return MODALITIES if u == "off" else (u,)

    def encode(self, batch: Batch, ctx, modalities=None):
        latents, attention = {}, {}
        for m in modalities or self.active_modalities():
            latents[m], _, attention[m] = self.encoders[m](batch.x[m], batch.mask[m], ctx)
        return latents, attention

    def forward(self, batch: Batch, weights, ctx) -> ForwardOutput:
        ab = self.ablation
        meta = np.asarray(batch.meta, dtype=float)
        if meta.shape != (len(batch), D_META):
            raise ValueError(f"meta must be [{len(batch)}, {D_META}], got {meta.shape}")
        latents, attention = self.encode(batch, ctx)
        if ab.unimodal != "off":
            z = ops.concat([latents[ab.unimodal], meta], axis=-1)
            return ForwardOutput(self.head(z, ctx), latents, {}, None, attention)

        projected = {m: self.shared(latents[m], ctx) for m in MODALITIES}
        h_align = fuse_aligned(projected["A"], projected["V"], projected["L"])
        if len(batch) >= 2:
            loss, comps = alignment_loss(projected, use_da=not ab.no_da_loss)
        else:  # CORAL is undefined for a single clip
            loss, comps = constant(0.0), {}
        w = np.full(3, 1.0 / 3.0) if ab.equal_weights else _weight_vector(weights)
        h_het = weighted_concat(latents["A"], latents["V"], latents["L"], w)
        z = ops.concat([h_align, h_het, meta], axis=-1)
        return ForwardOutput(self.head(z, ctx), latents, projected,
                             AlignmentResult(h_align, loss, comps), attention)

    __call__ = forward

    def attention_records(self, batch: Batch, out: ForwardOutput):
        return {m: split_records(a, batch.mask[m]) for m, a in out.attention.items()}


def _weight_vector(weights) -> np.ndarray:
    w = weights.w if isinstance(weights, ModalityWeights) else np.asarray(weights, dtype=float)
    if w.shape != (3,) or abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError(f"modality weights must lie on the simplex, got {w}")
    return w


def persuasion_loss(pred, y, task) -> Tensor:
    """MSE for IPP (in the [0,1] label space), binary cross-entropy for DOP."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("persuasion loss on an empty batch")
    if task == "IPP":
        d = ops.sub(pred, y)
        return ops.mean(ops.mul(d, d))
    if task == "DOP":
        p = ops.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
        ll = ops.add(ops.mul(ops.log(p), y), ops.mul(ops.log(ops.sub(1.0, p)), 1.0 - y))
        return ops.scale(ops.mean(ll), -1.0)
    raise ValueError(f"unknown task {task!r}")


def total_loss(l_pers, l_align, gamma: float, no_alignment: bool = False) -> Tensor:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if no_alignment or gamma == 0 or l_align is None:
        return l_pers if isinstance(l_pers, Tensor) else constant(l_pers)
    return ops.add(l_pers, ops.scale(l_align, gamma))


# -- checkpoints -------------------------------------------------------------
# layout: MAGIC | u32 version | u64 header length | JSON header | raw tensors
# every tensor is stored as little-endian float64 in C order at the offset
# listed in the header table.

MAGIC = b"ADAFUSE\x00"
CKPT_VERSION = 1


def _state(model: M2P2Model, weights: ModalityWeights | None):
    state = {k: p.data for k, p in model.all_parameters().items()}
    for k, buf in model.buffers().items():
        state[f"buffer:{k}"] = buf
    if weights is not None:
        state["weights:w"] = weights.w
    return state


def save_checkpoint(path, model: M2P2Model, weights: ModalityWeights | None = None,
                    extra: dict | None = None) -> None:
    state = _state(model, weights)
    table, offset, blobs = [], 0, []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"model": model.config.to_dict(), "tensors": table, "extra": extra or {}}
    if weights is not None:
        header["weights"] = {"alpha": weights.alpha, "beta": weights.beta,
                             "last_ref_losses": weights.last_ref_losses}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns (model, weights or None, extra dict)."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos: pos + hlen].decode("utf-8"))
    data = memoryview(raw)[pos + hlen:]
    model = M2P2Model(ModelConfig.from_dict(header["model"]), np.random.default_rng(0))
    params, buffers = model.all_parameters(), model.buffers()
    weights = None
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=int))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=entry["offset"]).reshape(shape)
        name = entry["name"]
        if name.startswith("buffer:"):
            buffers[name[7:]][...] = arr
        elif name == "weights:w":
            w = header["weights"]
            lr = w["last_ref_losses"]
            weights = ModalityWeights(arr.astype(float).copy(), w["alpha"], w["beta"],
                                      tuple(lr) if lr is not None else None)
        else:
            params[name].data[...] = arr
    return model, weights, header.get("extra", {})
