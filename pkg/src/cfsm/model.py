"""The CFSM network and its parameter container.

Layout (all weights stored ``out x in``, biases as ``1 x out`` rows)::

    x --MLP+ReLU--> F --affine--> Z --sigmoid--> F_C
                                  Z --affine--> source logits   (S.*)
                                  Z --affine--> target logits   (T.*, optional)
                          F_C --affine--> F_hat                  (AE.*, optional)
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, FormatError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    hidden: tuple[int, ...]
    feature_dim: int
    cfs_dim: int
    source_classes: int
    target_classes: int = 0
    autoencoder: bool = False
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.feature_dim, self.cfs_dim)
        if any(w < 1 for w in widths):
            raise ConfigError(f"all layer widths must be >= 1, got {widths}")
        if self.source_classes < 2:
            raise ConfigError(f"source_classes must be >= 2, got {self.source_classes}")
        if self.target_classes < 0:
            raise ConfigError("target_classes must be >= 0")
        if self.activation != "relu":
            raise ConfigError(f"unsupported extractor activation {self.activation!r}")

    @property
    def extractor_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.feature_dim)

    def shapes(self) -> dict[str, tuple[int, int]]:
        out = {}
        dims = self.extractor_dims
        for i in range(len(dims) - 1):
            out[f"M{i}.W"] = (dims[i + 1], dims[i])
            out[f"M{i}.b"] = (1, dims[i + 1])
        out["C.W"] = (self.cfs_dim, self.feature_dim)
        out["C.b"] = (1, self.cfs_dim)
        out["S.W"] = (self.source_classes, self.cfs_dim)
        out["S.b"] = (1, self.source_classes)
        if self.target_classes:
            out["T.W"] = (self.target_classes, self.cfs_dim)
            out["T.b"] = (1, self.target_classes)
        if self.autoencoder:
            out["AE.V"] = (self.feature_dim, self.cfs_dim)
            out["AE.c"] = (1, self.feature_dim)
        return out

    def n_params(self) -> int:
        return sum(r * c for r, c in self.shapes().values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**{**d, "hidden": tuple(d.get("hidden", ()))})


@dataclass
class ModelParams:
    arch: ArchSpec
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.shapes()
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {self.arrays[name].shape}")
        self.arrays = {name: np.asarray(self.arrays[name], dtype=np.float64) for name in expected}

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def with_arch(self, arch: ArchSpec, rng: np.random.Generator) -> "ModelParams":
        """Re-home onto ``arch``: shared parameters kept, new heads freshly initialised."""
        fresh = init_params(arch, rng)
        for name in fresh.arrays:
            if name in self.arrays and self.arrays[name].shape == fresh.arrays[name].shape:
                fresh.arrays[name] = self.arrays[name].copy()
        return fresh


def init_params(arch: ArchSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    arrays = {}
    for name, (rows, cols) in arch.shapes().items():
        if rows == 1 and name.endswith((".b", ".c")):
            arrays[name] = np.zeros((rows, cols))
        else:
            limit = np.sqrt(6.0 / (rows + cols))
            arrays[name] = rng.uniform(-limit, limit, size=(rows, cols))
    return ModelParams(arch, arrays)


# -- forward pieces ------------------------------------------------------------

def affine(x: nx.Node, W: nx.Node, b: nx.Node) -> nx.Node:
    if x.shape[1] != W.shape[1]:
        raise DimensionError(f"affine: input has {x.shape[1]} columns, weight expects {W.shape[1]}")
    return nx.add_row(nx.matmul(x, nx.transpose(W)), b)


def feature_extract(x: nx.Node, p: dict[str, nx.Node]) -> nx.Node:
    n_layers = sum(1 for k in p if k.startswith("M") and k.endswith(".W"))
    h = x
    for i in range(n_layers):
        h = nx.relu(affine(h, p[f"M{i}.W"], p[f"M{i}.b"]))
    return h


def cfs_forward(F: nx.Node, p: dict[str, nx.Node]) -> tuple[nx.Node, nx.Node]:
    """Return ``(Z, F_C)``: pre-activation and clamped sigmoid activation."""
    Z = affine(F, p["C.W"], p["C.b"])
    return Z, nx.sigmoid(Z)


def classify(Z: nx.Node, W: nx.Node, b: nx.Node) -> nx.Node:
    return affine(Z, W, b)


def ae_reconstruct(F_C: nx.Node, p: dict[str, nx.Node]) -> nx.Node:
    if "AE.V" not in p:
        raise ConfigError("autoencoder head requested but the model has no AE parameters")
    return affine(F_C, p["AE.V"], p["AE.c"])


class Forward(NamedTuple):
    tape: nx.Tape
    leaves: dict[str, nx.Node]
    F: nx.Node
    Z: nx.Node
    F_C: nx.Node


def forward(params: ModelParams, x: np.ndarray, tape: nx.Tape | None = None) -> Forward:
    """Register every parameter as a leaf and run extractor + CFS layer."""
    if x.shape[1] != params.arch.input_dim:
        raise DimensionError(f"input has {x.shape[1]} columns, model expects {params.arch.input_dim}")
    tape = tape or nx.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.arrays.items()}
    return forward_leaves(tape, leaves, x)


def forward_leaves(tape: nx.Tape, leaves: dict[str, nx.Node], x: np.ndarray) -> Forward:
    """Forward pass over parameter nodes already registered on ``tape``."""
    F = feature_extract(tape.const(x), leaves)
    Z, F_C = cfs_forward(F, leaves)
    return Forward(tape, leaves, F, Z, F_C)


class Embedding(NamedTuple):
    F: np.ndarray
    Z: np.ndarray
    F_C: np.ndarray
    source_logits: np.ndarray
    target_logits: np.ndarray | None


def embed(params: ModelParams, x: np.ndarray, chunk: int = 2048) -> Embedding:
    """Inference-only forward pass in chunks (no gradients kept)."""
    parts = []
    for start in range(0, max(len(x), 1), chunk):
        fw = forward(params, np.asarray(x[start:start + chunk], dtype=np.float64))
        src = classify(fw.Z, fw.leaves["S.W"], fw.leaves["S.b"]).value
        tgt = classify(fw.Z, fw.leaves["T.W"], fw.leaves["T.b"]).value if "T.W" in fw.leaves else None
        parts.append((fw.F.value, fw.Z.value, fw.F_C.value, src, tgt))
    cols = list(zip(*parts))
    return Embedding(
        *(np.concatenate(c) for c in cols[:4]),
        None if cols[4][0] is None else np.concatenate(cols[4]),
    )


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write an ``.npz`` holding the ArchSpec header plus raw float64 arrays."""
    header = json.dumps({"version": CHECKPOINT_VERSION, "arch": params.arch.to_dict(),
                         "names": list(params.arrays)})
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(header.encode(), dtype=np.uint8), **params.arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ModelParams:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(z["__header__"].tobytes().decode())
            arrays = {name: z[name].copy() for name in header["names"]}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: not a cfsm checkpoint ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return ModelParams(ArchSpec.from_dict(header["arch"]), arrays)
