"""
Set aggregation
===============

Turns a variable-size set of element descriptors into one unit vector.

Supported pooling modes:

``netvlad``
    soft-assignment to K clusters, weighted residuals, each element's
    flattened contribution L2-normalized, summed, L2-normalized, then a
    learned linear reduction with a folded batch-norm affine and a final
    L2-normalization.
``average`` / ``sum``
    mean / sum of the elements, L2-normalized (identical after
    normalization, kept separate for clarity of intent).
``gem_shared`` / ``gem_per_dim``
    generalized mean ``((1/n) sum |x|^p)^(1/p)`` per dimension with a scalar
    or per-dimension exponent, L2-normalized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels

MODEL_VERSION = "setnet-model/1"
MODES = ("netvlad", "average", "sum", "gem_shared", "gem_per_dim")

__all__ = [
    "MODEL_VERSION",
    "MODES",
    "AggregationError",
    "NetVLADParams",
    "ReductionParams",
    "LogisticHead",
    "AggregatorModel",
    "soft_assign",
    "netvlad_forward",
    "reduce",
    "pool_baseline",
    "aggregate_set",
    "aggregate_many",
    "save_model",
    "load_model",
]


class AggregationError(ValueError):
    """A set could not be turned into a unit descriptor."""


def _frozen(arr, ndim=None) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    if ndim is not None and out.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {out.shape}")
    out.setflags(write=False)
    return out


def _as_matrix(descriptors) -> np.ndarray:
    if isinstance(descriptors, np.ndarray):
        x = np.asarray(descriptors, dtype=np.float64)
    else:
        x = np.asarray(
            [getattr(d, "vector", d) for d in descriptors], dtype=np.float64
        )
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise AggregationError("cannot aggregate an empty set")
    return x


def _canonical(x: np.ndarray):
    # Summing in a fixed (lexicographic) row order makes pooling exactly
    # permutation invariant, not just up to rounding.
    order = np.lexsort(x.T[::-1])
    return x[order], order


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise AggregationError(f"{what} has zero norm")
    return v / n


@dataclass(frozen=True)
class NetVLADParams:
    a: np.ndarray  # (K, D_e) assignment weights
    b: np.ndarray  # (K,) assignment biases
    c: np.ndarray  # (K, D_e) cluster centres

    def __post_init__(self):
        object.__setattr__(self, "a", _frozen(self.a, 2))
        object.__setattr__(self, "b", _frozen(self.b, 1))
        object.__setattr__(self, "c", _frozen(self.c, 2))
        k, dim = self.c.shape
        if k < 1:
            raise ValueError("NetVLAD needs at least one cluster")
        if self.a.shape != (k, dim) or self.b.shape != (k,):
            raise ValueError(
                f"inconsistent NetVLAD shapes a{self.a.shape} b{self.b.shape} c{self.c.shape}"
            )

    @property
    def K(self) -> int:
        return self.c.shape[0]

    @property
    def dim(self) -> int:
        return self.c.shape[1]


@dataclass(frozen=True)
class ReductionParams:
    W: np.ndarray  # (D, D_e * K)
    scale: np.ndarray  # (D,) folded batch-norm gain, > 0
    shift: np.ndarray  # (D,)

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen(self.W, 2))
        object.__setattr__(self, "scale", _frozen(self.scale, 1))
        object.__setattr__(self, "shift", _frozen(self.shift, 1))
        d = self.W.shape[0]
        if self.scale.shape != (d,) or self.shift.shape != (d,):
            raise ValueError("scale/shift must match the output dimension of W")
        if np.any(self.scale <= 0):
            raise ValueError("reduction scale must be strictly positive")

    @classmethod
    def identity(cls, dim: int) -> "ReductionParams":
        return cls(np.eye(dim), np.ones(dim), np.zeros(dim))


@dataclass(frozen=True)
class LogisticHead:
    w: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.w) and np.isfinite(self.b)):
            raise ValueError("logistic head must be finite")

    def __call__(self, sim):
        return _kernels._sigmoid(self.w * np.asarray(sim) + self.b)


@dataclass(frozen=True)
class AggregatorModel:
    mode: str
    dim_in: int
    dim_out: int
    head: LogisticHead = field(default_factory=LogisticHead)
    netvlad: NetVLADParams | None = None
    reduction: ReductionParams | None = None
    gem_p: np.ndarray | float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown pooling mode {self.mode!r}")
        if self.mode == "netvlad":
            if self.netvlad is None or self.reduction is None:
                raise ValueError("netvlad mode needs NetVLAD and reduction parameters")
            if self.netvlad.dim != self.dim_in:
                raise ValueError("NetVLAD dimension does not match dim_in")
            if self.reduction.W.shape != (self.dim_out, self.dim_in * self.netvlad.K):
                raise ValueError(
                    f"reduction W has shape {self.reduction.W.shape}, expected "
                    f"{(self.dim_out, self.dim_in * self.netvlad.K)}"
                )
        else:
            if self.dim_out != self.dim_in:
                raise ValueError(f"{self.mode} pooling keeps the input dimension")
        if self.mode.startswith("gem"):
            if self.gem_p is None:
                raise ValueError("gem modes need gem_p")
            p = _frozen(self.gem_p)
            if self.mode == "gem_shared" and p.ndim != 0:
                raise ValueError("gem_shared takes a scalar p")
            if self.mode == "gem_per_dim" and p.shape != (self.dim_in,):
                raise ValueError("gem_per_dim takes one p per input dimension")
            if np.any(p < 1):
                raise ValueError("GeM exponent must be >= 1")
            object.__setattr__(self, "gem_p", p)

    @classmethod
    def baseline(cls, dim: int, mode: str = "average", head=None, gem_p=None):
        if mode.startswith("gem") and gem_p is None:
            gem_p = 3.0 if mode == "gem_shared" else np.full(dim, 3.0)
        return cls(mode, dim, dim, head or LogisticHead(), gem_p=gem_p)

    def with_head(self, head: LogisticHead) -> "AggregatorModel":
        return AggregatorModel(
            self.mode, self.dim_in, self.dim_out, head,
            self.netvlad, self.reduction, self.gem_p,
        )


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------


def soft_assign(x: np.ndarray, params: NetVLADParams) -> np.ndarray:
    """Softmax over clusters of ``a_k . x + b_k``; one row per element."""
    logits = np.atleast_2d(x) @ params.a.T + params.b
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def netvlad_forward(descriptors, params: NetVLADParams) -> np.ndarray:
    x = _as_matrix(descriptors)
    if x.shape[1] != params.dim:
        raise AggregationError(
            f"descriptor dimension {x.shape[1]} != NetVLAD dimension {params.dim}"
        )
    x, order = _canonical(x)
    alpha = soft_assign(x, params)
    total = np.zeros(params.K * params.dim)
    for i in range(len(x)):
        contrib = (alpha[i, :, None] * (x[i] - params.c)).ravel()
        n = np.linalg.norm(contrib)
        if n == 0.0:
            raise AggregationError(f"element {order[i]} has a zero NetVLAD contribution")
        total += contrib / n
    return _unit(total, "NetVLAD sum")


def reduce(v: np.ndarray, params: ReductionParams) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != params.W.shape[1]:
        raise AggregationError(
            f"reduction expects length {params.W.shape[1]}, got {v.shape[-1]}"
        )
    y = params.scale * (params.W @ v) + params.shift
    return _unit(y, "reduced descriptor")


def _gem(x: np.ndarray, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 1):
        raise AggregationError("GeM exponent must be >= 1")
    return np.mean(np.abs(x) ** p, axis=0) ** (1.0 / p)


def pool_baseline(descriptors, mode: str = "average", gem_p=None) -> np.ndarray:
    x, _ = _canonical(_as_matrix(descriptors))
    if mode == "average":
        pooled = x.mean(axis=0)
    elif mode == "sum":
        pooled = x.sum(axis=0)
    elif mode in ("gem_shared", "gem_per_dim"):
        if gem_p is None:
            raise AggregationError("GeM pooling needs an exponent")
        pooled = _gem(x, gem_p)
    else:
        raise ValueError(f"{mode!r} is not a baseline pooling mode")
    return _unit(pooled, f"{mode}-pooled vector")


def aggregate_set(descriptors, model: AggregatorModel) -> np.ndarray:
    """Unit set descriptor of length ``model.dim_out``."""
    if model.mode == "netvlad":
        return reduce(netvlad_forward(descriptors, model.netvlad), model.reduction)
    x = _as_matrix(descriptors)
    if x.shape[1] != model.dim_in:
        raise AggregationError(f"descriptor dimension {x.shape[1]} != {model.dim_in}")
    return pool_baseline(x, model.mode, model.gem_p)


def aggregate_many(x, offsets, model: AggregatorModel) -> np.ndarray:
    """Aggregate every set of a ragged collection; returns ``(N, dim_out)``.

    Equivalent to calling :func:`aggregate_set` per set, but the NetVLAD
    pooling loop runs in the compiled kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise AggregationError("cannot aggregate an empty set")
    if model.mode == "netvlad":
        nv = model.netvlad
        v = _kernels.netvlad_pool(x, offsets, nv.a, nv.b, nv.c)
        r = model.reduction
        y = (v @ r.W.T) * r.scale + r.shift
    elif model.mode in ("average", "sum"):
        y = np.add.reduceat(x, offsets[:-1], axis=0)
    else:
        p = np.asarray(model.gem_p)
        y = (np.add.reduceat(np.abs(x) ** p, offsets[:-1], axis=0) / counts[:, None]) ** (1.0 / p)
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise AggregationError(f"set {bad} aggregates to a zero vector")
    return y / norms


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------


def model_to_dict(model: AggregatorModel, whitening=None, config=None) -> dict:
    nv, red = model.netvlad, model.reduction
    doc = {
        "version": MODEL_VERSION,
        "mode": model.mode,
        "K": nv.K if nv is not None else None,
        "D_e": model.dim_in,
        "D": model.dim_out,
        "a": nv.a.tolist() if nv is not None else None,
        "b": nv.b.tolist() if nv is not None else None,
        "c": nv.c.tolist() if nv is not None else None,
        "W": red.W.tolist() if red is not None else None,
        "scale": red.scale.tolist() if red is not None else None,
        "shift": red.shift.tolist() if red is not None else None,
        "w": float(model.head.w),
        "b_head": float(model.head.b),
        "gem_p": None if model.gem_p is None else np.asarray(model.gem_p).tolist(),
    }
    if model.mode != "netvlad":
        for key in ("K", "a", "b", "c", "W", "scale", "shift"):
            del doc[key]
    if whitening is not None:
        doc["whitening"] = whitening.to_dict()
    if config is not None:
        doc["config"] = config
    return doc


def model_from_dict(doc: dict):
    """Returns ``(model, whitening_or_None)``."""
    version = doc.get("version")
    if version != MODEL_VERSION:
        raise ValueError(f"model file version {version!r}, this reader supports {MODEL_VERSION!r}")
    head = LogisticHead(float(doc["w"]), float(doc["b_head"]))
    mode = doc["mode"]
    netvlad = reduction = None
    if mode == "netvlad":
        netvlad = NetVLADParams(doc["a"], doc["b"], doc["c"])
        reduction = ReductionParams(doc["W"], doc["scale"], doc["shift"])
    model = AggregatorModel(
        mode, int(doc["D_e"]), int(doc["D"]), head, netvlad, reduction, doc.get("gem_p")
    )
    whitening = None
    if doc.get("whitening") is not None:
        from .whitening import WhitenTransform

        whitening = WhitenTransform.from_dict(doc["whitening"])
    return model, whitening


def save_model(path, model: AggregatorModel, whitening=None, config=None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, whitening, config)), encoding="utf-8")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
