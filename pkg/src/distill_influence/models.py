"""MLP teacher / student classifiers and their checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .errors import DomainError, ShapeError

INITS = ("seeded-he", "zeros-head", "copy-of")


@dataclass(frozen=True)
class ClassifierSpec:
    input_dim: int
    hidden_widths: tuple = ()
    num_classes: int = 2
    activation: str = "relu"
    init: str = "seeded-he"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")

    def layer_shapes(self):
        dims = (self.input_dim, *self.hidden_widths, self.num_classes)
        out = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            prefix = "head" if i == len(dims) - 2 else f"layer{i}"
            out.append((f"{prefix}.weight", (a, b)))
            if self.bias:
                out.append((f"{prefix}.bias", (b,)))
        return out

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


@dataclass(frozen=True)
class Classifier:
    spec: ClassifierSpec
    params: ParamVector
    name: str = field(default="", compare=False)

    def __post_init__(self):
        expected = self.spec.layer_shapes()
        got = list(zip(self.params.names, self.params.shapes))
        if got != [(n, tuple(s)) for n, s in expected]:
            raise ShapeError(f"parameters {got} do not match spec layout {expected}")

    def with_params(self, params: ParamVector) -> "Classifier":
        return replace(self, params=params)

    def detached(self) -> "Classifier":
        return replace(self, params=self.params.detached())


def init_params(spec: ClassifierSpec, seed: int, role: str = "",
                copy_from: Optional[ParamVector] = None) -> ParamVector:
    if spec.init == "copy-of":
        if copy_from is None:
            raise ValueError("copy-of init needs source parameters")
        src = list(zip(copy_from.names, copy_from.shapes))
        if src != [(n, tuple(s)) for n, s in spec.layer_shapes()]:
            raise ShapeError("copy-of source has a different architecture")
        return ParamVector(((n, a.copy()) for n, a in copy_from.items()), role)
    rng = np.random.default_rng(seed)
    segs = []
    for name, shape in spec.layer_shapes():
        is_head = name.startswith("head.")
        if name.endswith(".bias") or (is_head and spec.init == "zeros-head"):
            segs.append((name, np.zeros(shape)))
        else:
            segs.append((name, rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])))
    return ParamVector(segs, role)


def build_classifier(spec: ClassifierSpec, seed: int, name: str = "",
                     copy_from: Optional[Classifier] = None) -> Classifier:
    src = copy_from.params if copy_from is not None else None
    return Classifier(spec, init_params(spec, seed, name, src), name)


def forward_logits(model: Classifier, features) -> Tensor:
    x = features.value if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"expected features of shape (B, {model.spec.input_dim}), got {x.shape}")
    ad.record_call("forward", model.params.role)
    act = ad.relu if model.spec.activation == "relu" else ad.tanh
    p = model.params
    h = Tensor(x)
    n_layers = len(model.spec.hidden_widths) + 1
    for i in range(n_layers):
        prefix = "head" if i == n_layers - 1 else f"layer{i}"
        h = h @ p.tensor(f"{prefix}.weight")
        if model.spec.bias:
            h = h + p.tensor(f"{prefix}.bias")
        if i < n_layers - 1:
            h = act(h)
    return h


def predict_probs(model: Classifier, features, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    logits = forward_logits(model, features)
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    return ad.softmax(logits)


# --------------------------------------------------------------------------
# checkpoints: <u8 header length><JSON header><little-endian f64 segments>


def save_checkpoint(path, model: Classifier, *, seed: Optional[int] = None, step: int = 0) -> None:
    header = {
        "spec": model.spec.to_dict(),
        "seed": seed,
        "step": step,
        "name": model.name,
        "segments": [{"name": n, "shape": list(a.shape)} for n, a in model.params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for a in model.params.arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Classifier, dict]:
    blob = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", blob, 0)
    header = json.loads(blob[8 : 8 + hlen])
    off = 8 + hlen
    segs = []
    for seg in header["segments"]:
        shape = tuple(seg["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        segs.append((seg["name"], arr.astype(np.float64)))
        off += 8 * count
    spec = ClassifierSpec(**header["spec"])
    name = header.get("name", "")
    return Classifier(spec, ParamVector(segs, name), name), header
