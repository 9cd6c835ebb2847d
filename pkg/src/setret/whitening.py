"""PCA whitening of descriptors, before or after set aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["WhitenTransform", "fit_whitening", "apply_whitening"]


@dataclass(frozen=True)
class WhitenTransform:
    mean: np.ndarray
    M: np.ndarray
    epsilon: float
    stage: str = "before"  # "before" or "after" aggregation

    def __post_init__(self):
        if self.stage not in ("before", "after"):
            raise ValueError(f"stage must be 'before' or 'after', got {self.stage!r}")
        for name in ("mean", "M"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"whitening {name} is not finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def __call__(self, v, renormalize: bool = True):
        return apply_whitening(v, self, renormalize)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "M": self.M.tolist(),
            "epsilon": float(self.epsilon),
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WhitenTransform":
        return cls(
            np.asarray(doc["mean"]), np.asarray(doc["M"]), float(doc["epsilon"]), doc.get("stage", "before")
        )


def fit_whitening(sample, epsilon: float | None = None, stage: str = "before") -> WhitenTransform:
    """Fit ``M = diag(lambda + eps)^(-1/2) U^T`` on the rows of ``sample``.

    Eigenvectors are ordered by descending eigenvalue. ``epsilon`` defaults
    to ``1e-6 * trace(cov) / dim``.
    """
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("sample must be a 2-d array of row vectors")
    n, dim = x.shape
    if n <= dim:
        raise ValueError(f"need more samples ({n}) than dimensions ({dim})")
    if not np.all(np.isfinite(x)):
        raise ValueError("whitening sample contains non-finite values")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False, bias=True)
    if epsilon is None:
        epsilon = 1e-6 * np.trace(cov) / dim
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    # eigenvector signs are arbitrary; pin them for reproducibility
    flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(dim)])
    evecs = evecs * flip
    M = (evecs / np.sqrt(np.maximum(evals, 0.0) + epsilon)).T
    return WhitenTransform(mean, M, float(epsilon), stage)


def apply_whitening(v, t: WhitenTransform, renormalize: bool = True) -> np.ndarray:
    """``M (v - mean)`` for a vector or a matrix of row vectors."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != t.dim:
        raise ValueError(f"whitening expects dimension {t.dim}, got {v.shape[-1]}")
    out = (v - t.mean) @ t.M.T
    if renormalize:
        norms = np.linalg.norm(out, axis=-1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("whitened vector is zero and cannot be normalized")
        out = out / norms
    return out
