"""
Synthetic identity embeddings
=============================

Stand-in for a face descriptor network. Identities are unit prototypes on
the sphere; every observed element is a noisy, re-normalized copy of its
prototype. All randomness goes through ``numpy.random.Generator`` backed by
PCG64, so a seed regenerates the same data on every platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "IdentityPrototype",
    "ElementDescriptor",
    "EmbeddingSpace",
    "gen_gallery",
    "sample_element",
    "sample_elements",
    "gallery_matrix",
    "write_gallery",
    "read_gallery",
]


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norms


@dataclass(frozen=True)
class IdentityPrototype:
    id: int
    center: np.ndarray


@dataclass(frozen=True)
class ElementDescriptor:
    vector: np.ndarray
    identity: int | None = None


@dataclass(frozen=True)
class EmbeddingSpace:
    """Anisotropic distribution of identity prototypes.

    Real descriptor networks do not spread identities uniformly over the
    sphere: descriptors share a common offset and most variance lives in a
    few directions. Prototypes are drawn as
    ``normalize(offset * m + R @ (s * g))`` with ``g ~ N(0, I)``, a fixed
    random rotation ``R``, a fixed unit offset direction ``m`` and per-axis
    standard deviations ``s_j ∝ exp(-decay * j / dim)`` (``sum s_j**2 = 1``).

    ``offset=0, decay=0`` recovers the isotropic model.
    """

    dim: int
    offset: float = 0.0
    decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.offset < 0 or self.decay < 0:
            raise ValueError("offset and decay must be non-negative")

    @property
    def isotropic(self) -> bool:
        return self.offset == 0 and self.decay == 0

    def _basis(self):
        rng = _rng([self.seed, 0x5E7])
        q, r = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))
        q = q * np.sign(np.diag(r))
        m = rng.standard_normal(self.dim)
        m /= np.linalg.norm(m)
        s = np.exp(-self.decay * np.arange(self.dim) / self.dim)
        s /= np.linalg.norm(s)
        return q, m, s

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        g = rng.standard_normal((n, self.dim))
        if self.isotropic:
            return _normalize_rows(g)
        q, m, s = self._basis()
        return _normalize_rows(self.offset * m + (g * s) @ q.T)


def gen_gallery(
    n_identities: int,
    dim: int,
    seed: int,
    space: EmbeddingSpace | None = None,
    first_id: int = 0,
) -> list[IdentityPrototype]:
    """Draw ``n_identities`` unit prototypes, labelled ``first_id, first_id+1, ...``.

    Without ``space`` the prototypes are normalized isotropic Gaussians.
    """
    if int(n_identities) < 1:
        raise ValueError(f"n_identities must be >= 1, got {n_identities}")
    if int(dim) < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if space is not None and space.dim != dim:
        raise ValueError(f"space has dim {space.dim}, gallery asked for {dim}")
    rng = _rng(seed)
    if space is None:
        centers = _normalize_rows(rng.standard_normal((n_identities, dim)))
    else:
        centers = space.draw(n_identities, rng)
    return [
        IdentityPrototype(first_id + i, centers[i].copy())
        for i in range(n_identities)
    ]


def sample_elements(
    centers: np.ndarray, noise_sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Noisy unit samples, one per row of ``centers``.

    The Gaussian perturbation is scaled by ``1/sqrt(dim)`` so that its
    expected norm is about ``noise_sigma`` independently of dimension.
    """
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    dim = centers.shape[1]
    noise = rng.standard_normal(centers.shape)
    return _normalize_rows(centers + (noise_sigma / np.sqrt(dim)) * noise)


def sample_element(
    proto: IdentityPrototype, noise_sigma: float, seed: int
) -> ElementDescriptor:
    vec = sample_elements(proto.center[None, :], noise_sigma, _rng(seed))[0]
    return ElementDescriptor(vec, proto.id)


def gallery_matrix(gallery: Sequence[IdentityPrototype]) -> tuple[np.ndarray, np.ndarray]:
    """Stack a gallery into ``(ids, centers)`` arrays."""
    ids = np.array([p.id for p in gallery], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate identity ids in gallery")
    return ids, np.stack([p.center for p in gallery])


def write_gallery(path, gallery: Iterable[IdentityPrototype]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in gallery:
            fh.write(json.dumps({"id": int(p.id), "center": p.center.tolist()}))
            fh.write("\n")


def read_gallery(path) -> list[IdentityPrototype]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(IdentityPrototype(int(rec["id"]), np.asarray(rec["center"], dtype=np.float64)))
    return out
