"""
Training of set aggregators with the multi-label logistic set loss.

A mini-batch holds ``P`` identities. They are split into synthetic sets of
``set_size`` elements; every identity also contributes an independent query
sample, and every query is scored against every set of the batch.

Gradients are derived by hand through the whole pipeline (NetVLAD soft
assignment, residual normalization, pooling normalization, reduction,
batch-norm affine, final normalization and logistic head). The reference
path is single-threaded and fully determined by ``TrainConfig.seed``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans

from .aggregator import (
    AggregatorModel,
    LogisticHead,
    NetVLADParams,
    ReductionParams,
    aggregate_many,
)
from .synth import IdentityPrototype, gallery_matrix, sample_elements
from .whitening import WhitenTransform, apply_whitening

log = logging.getLogger(__name__)

P_CLAMP = 1e-12
BN_EPS = 1e-5

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "TrainLog",
    "init_kmeans",
    "init_pca",
    "build_batch",
    "batch_labels",
    "loss_and_grads",
    "train",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.loss = epoch, step, loss


@dataclass
class TrainConfig:
    mode: str = "netvlad"
    set_size: int = 2
    batch_identities: int = 84
    epochs: int = 20
    batches_per_epoch: int = 50
    pretrain_epochs: int = 1
    lr_pretrain: float = 0.01
    lr_finetune: float = 0.01
    lr_decay_factor: float = 10.0
    lr_drop_epoch: int | None = None  # default: 75% of epochs
    weight_decay: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    K: int = 8
    D_e: int = 64
    D: int = 64
    kmeans_alpha: float | None = None  # default: 10 / median centroid distance^2
    noise_sigma: float = 0.25
    balance: bool = True
    balance_scope: str = "set"  # "set" or "batch"
    init_sample: int = 4000
    bn_momentum: float = 0.1
    gem_p_init: float = 3.0

    def __post_init__(self):
        if self.batch_identities < self.set_size:
            raise ValueError("batch_identities must be at least set_size")
        for name in ("lr_pretrain", "lr_finetune", "lr_decay_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.balance_scope not in ("set", "batch"):
            raise ValueError("balance_scope must be 'set' or 'batch'")

    @property
    def drop_epoch(self) -> int:
        if self.lr_drop_epoch is not None:
            return self.lr_drop_epoch
        return int(round(0.75 * self.epochs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # (epoch, mean loss, lr)
    initial_batch_loss: float = float("nan")
    final_batch_loss: float = float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "lr"])
            for row in self.epochs:
                writer.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_kmeans(sample, K: int, alpha: float | None = None, seed: int = 0) -> NetVLADParams:
    """Cluster centres by k-means; assignment weights ``2 alpha c``, biases ``-alpha |c|^2``.

    With this choice ``a_k . x + b_k = alpha (|x|^2 - |x - c_k|^2)``, so the
    softmax favours the nearest centre with sharpness ``alpha``.
    """
    x = np.asarray([getattr(s, "vector", s) for s in sample], dtype=np.float64)
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < K:
        raise ValueError(f"k-means needs {K} distinct points, sample has {n_distinct}")
    if K == 1:
        centers = x.mean(axis=0, keepdims=True)
    else:
        km = KMeans(n_clusters=K, init="k-means++", n_init=1, max_iter=100, tol=1e-6, random_state=seed)
        km.fit(x)
        centers = km.cluster_centers_
    if alpha is None:
        alpha = default_alpha(centers)
    return NetVLADParams(2.0 * alpha * centers, -alpha * np.sum(centers**2, axis=1), centers)


def default_alpha(centers: np.ndarray) -> float:
    if len(centers) < 2:
        return 1.0
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))[np.triu_indices(len(centers), 1)]
    med = np.median(dist)
    return 10.0 / med**2 if med > 0 else 1.0


def init_pca(contributions, D: int) -> ReductionParams:
    """Top-``D`` principal directions of the (centred) rows as reduction weights."""
    x = np.asarray(contributions, dtype=np.float64)
    if len(x) <= D:
        raise ValueError(f"PCA initialization needs more than {D} samples, got {len(x)}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = s[0] * max(xc.shape) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if rank < D:
        raise ValueError(f"contributions have rank {rank}, below the requested D={D}")
    W = vt[:D]
    signs = np.sign(W[np.arange(D), np.argmax(np.abs(W), axis=1)])
    W = W * signs[:, None]
    return ReductionParams(W, np.ones(D), np.zeros(D))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def batch_labels(set_ids: Sequence[Sequence[int]], query_ids: Sequence[int]) -> np.ndarray:
    """``(n_sets, P)`` 0/1 matrix: query identity present in the set."""
    q = np.asarray(query_ids)
    return np.stack([np.isin(q, np.asarray(s)).astype(np.float64) for s in set_ids])


def build_batch(gallery, config: TrainConfig, seed=None, rng=None, whitening=None):
    """Returns ``(sets, queries, labels)``.

    ``sets`` is a list of ``(set_size, D_e)`` arrays, ``queries`` a
    ``(P, D_e)`` array (one independent sample per identity) and ``labels``
    the ``(n_sets, P)`` indicator matrix. Identities beyond the last full
    set act as negatives only.
    """
    ids, centers = gallery if isinstance(gallery, tuple) else gallery_matrix(gallery)
    P = config.batch_identities
    if len(ids) < P:
        raise ValueError(f"gallery has {len(ids)} identities, batch needs {P}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed if seed is None else seed))
    pick = rng.choice(len(ids), size=P, replace=False)
    members = sample_elements(centers[pick], config.noise_sigma, rng)
    queries = sample_elements(centers[pick], config.noise_sigma, rng)
    if whitening is not None:
        members = apply_whitening(members, whitening)
        queries = apply_whitening(queries, whitening)
    n_sets = P // config.set_size
    sets = [members[j * config.set_size:(j + 1) * config.set_size] for j in range(n_sets)]
    set_ids = [ids[pick[j * config.set_size:(j + 1) * config.set_size]] for j in range(n_sets)]
    return sets, queries, batch_labels(set_ids, ids[pick])


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _segment_sum(values, offsets):
    return np.add.reduceat(values, offsets[:-1], axis=0)


def _params_of(model: AggregatorModel) -> dict:
    p = {"w": np.float64(model.head.w), "b_head": np.float64(model.head.b)}
    if model.mode == "netvlad":
        p.update(
            a=np.array(model.netvlad.a), b=np.array(model.netvlad.b), c=np.array(model.netvlad.c),
            W=np.array(model.reduction.W), scale=np.array(model.reduction.scale),
            shift=np.array(model.reduction.shift),
        )
    elif model.mode.startswith("gem"):
        p["gem_p"] = np.array(model.gem_p, dtype=np.float64)
    return p


def _encode(mode, p, x, offsets):
    """Unit set descriptors for a ragged batch, plus a cache for backprop."""
    seg = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    cache = {"seg": seg, "offsets": offsets}
    if mode == "netvlad":
        logits = x @ p["a"].T + p["b"]
        logits -= logits.max(axis=1, keepdims=True)
        alpha = np.exp(logits)
        alpha /= alpha.sum(axis=1, keepdims=True)
        diff = x[:, None, :] - p["c"][None, :, :]
        R = (alpha[:, :, None] * diff).reshape(len(x), -1)
        rn = np.linalg.norm(R, axis=1)
        U = R / rn[:, None]
        S = _segment_sum(U, offsets)
        sn = np.linalg.norm(S, axis=1)
        V = S / sn[:, None]
        H = V @ p["W"].T
        Y = H * p["scale"] + p["shift"]
        cache.update(alpha=alpha, diff=diff, rn=rn, U=U, sn=sn, V=V, H=H)
    elif mode in ("average", "sum"):
        Y = _segment_sum(x, offsets)
    else:
        gp = p["gem_p"]
        ax = np.abs(x)
        powx = ax**gp
        counts = np.diff(offsets)[:, None]
        m = _segment_sum(powx, offsets) / counts
        Y = m ** (1.0 / gp)
        with np.errstate(divide="ignore", invalid="ignore"):
            plog = np.where(ax > 0, powx * np.log(np.where(ax > 0, ax, 1.0)), 0.0)
        cache.update(m=m, plogm=_segment_sum(plog, offsets) / counts)
    yn = np.linalg.norm(Y, axis=1)
    out = Y / yn[:, None]
    cache.update(Y=Y, yn=yn, out=out)
    return out, cache


def _encode_backward(mode, p, x, cache, g_out) -> dict:
    out, yn = cache["out"], cache["yn"]
    gY = (g_out - out * np.sum(out * g_out, axis=1, keepdims=True)) / yn[:, None]
    grads = {}
    if mode == "netvlad":
        H, V, U = cache["H"], cache["V"], cache["U"]
        grads["scale"] = np.sum(gY * H, axis=0)
        grads["shift"] = gY.sum(axis=0)
        gH = gY * p["scale"]
        grads["W"] = gH.T @ V
        gV = gH @ p["W"]
        gS = (gV - V * np.sum(V * gV, axis=1, keepdims=True)) / cache["sn"][:, None]
        gU = gS[cache["seg"]]
        gR = (gU - U * np.sum(U * gU, axis=1, keepdims=True)) / cache["rn"][:, None]
        alpha, diff = cache["alpha"], cache["diff"]
        gR = gR.reshape(diff.shape)
        g_alpha = np.sum(gR * diff, axis=2)
        grads["c"] = -np.sum(alpha[:, :, None] * gR, axis=0)
        gz = alpha * (g_alpha - np.sum(alpha * g_alpha, axis=1, keepdims=True))
        grads["a"] = gz.T @ x
        grads["b"] = gz.sum(axis=0)
    elif mode.startswith("gem"):
        gp, m, Y = p["gem_p"], cache["m"], cache["Y"]
        dY_dp = Y * (-np.log(m) / gp**2 + cache["plogm"] / (gp * m))
        g = gY * dY_dp
        grads["gem_p"] = np.sum(g, axis=0) if np.ndim(gp) == 1 else np.float64(g.sum())
    return grads


def _balance_weights(labels, balance: bool, scope: str):
    pos = labels.sum(axis=1, keepdims=True)
    neg = labels.shape[1] - pos
    if not balance:
        return np.ones_like(pos), np.ones_like(neg)
    if scope == "batch":
        pos = np.full_like(pos, pos.sum())
        neg = np.full_like(neg, neg.sum())
    with np.errstate(divide="ignore"):
        return np.where(pos > 0, 1.0 / pos, 0.0), np.where(neg > 0, 1.0 / neg, 0.0)


def _ragged(sets, queries):
    sets = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in sets]
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    sizes = [len(s) for s in sets] + [1] * len(queries)
    if min(sizes) == 0:
        raise ValueError("empty set in training batch")
    x = np.concatenate(sets + [queries])
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return x, offsets, len(sets)


def _loss_grads(mode, p, x, offsets, n_sets, labels, balance=True, scope="set", need_grads=True):
    out, cache = _encode(mode, p, x, offsets)
    vs, vq = out[:n_sets], out[n_sets:]
    sim = vs @ vq.T
    z = p["w"] * sim + p["b_head"]
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))
    clamped = (prob < P_CLAMP) | (prob > 1.0 - P_CLAMP)
    prob = np.clip(prob, P_CLAMP, 1.0 - P_CLAMP)
    bpos, bneg = _balance_weights(labels, balance, scope)
    loss = -np.sum(bpos * labels * np.log(prob) + bneg * (1.0 - labels) * np.log1p(-prob))
    if not need_grads:
        return float(loss), None, cache
    gz = np.where(clamped, 0.0, -bpos * labels * (1.0 - prob) + bneg * (1.0 - labels) * prob)
    grads = {"w": np.float64(np.sum(gz * sim)), "b_head": np.float64(gz.sum())}
    gsim = gz * p["w"]
    g_out = np.concatenate([gsim @ vq, gsim.T @ vs])
    grads.update(_encode_backward(mode, p, x, cache, g_out))
    return float(loss), grads, cache


def loss_and_grads(model: AggregatorModel, sets, queries, labels, balance: bool = True,
                   balance_scope: str = "set"):
    """Multi-label logistic loss of a batch and its gradient for every parameter.

    Returns ``(loss, grads)``; ``grads`` maps parameter names (``a``, ``b``,
    ``c``, ``W``, ``scale``, ``shift``, ``w``, ``b_head``, ``gem_p``) to
    arrays shaped like the parameter, depending on the model mode.
    """
    x, offsets, n_sets = _ragged(sets, queries)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (n_sets, len(x) - offsets[n_sets]):
        raise ValueError(f"labels shape {labels.shape} does not match the batch")
    loss, grads, _ = _loss_grads(model.mode, _params_of(model), x, offsets, n_sets, labels,
                                 balance, balance_scope)
    return loss, grads


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

_NO_DECAY = {"b", "shift", "w", "b_head", "gem_p", "beta"}


def _trainable(mode: str, phase: str) -> list[str]:
    head = ["w", "b_head"]
    if phase == "pretrain":
        return head
    if mode == "netvlad":
        return ["a", "b", "c", "W", "gamma", "beta"] + head
    if mode.startswith("gem"):
        return head + ["gem_p"]
    return head


class _BatchNorm:
    """Running statistics of the pre-affine reduction output.

    Training uses the running statistics (held constant within a step), so
    the effective affine is ``scale = gamma / sqrt(var + eps)``,
    ``shift = beta - mean * scale``; that is what gets exported.
    """

    def __init__(self, H: np.ndarray, momentum: float):
        self.mean = H.mean(axis=0)
        self.var = H.var(axis=0)
        self.gamma = np.ones(H.shape[1])
        self.beta = np.zeros(H.shape[1])
        self.momentum = momentum

    def folded(self):
        inv = 1.0 / np.sqrt(self.var + BN_EPS)
        scale = self.gamma * inv
        return scale, self.beta - self.mean * scale

    def update(self, H):
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * H.mean(axis=0)
        self.var = (1 - m) * self.var + m * H.var(axis=0)

    def param_grads(self, g_scale, g_shift):
        inv = 1.0 / np.sqrt(self.var + BN_EPS)
        return {"gamma": g_scale * inv - g_shift * self.mean * inv, "beta": g_shift}


def _sample_training_elements(ids, centers, n, config, rng, whitening):
    pick = rng.integers(0, len(ids), size=n)
    x = sample_elements(centers[pick], config.noise_sigma, rng)
    if whitening is not None:
        x = apply_whitening(x, whitening)
    return x


def initial_model(gallery, config: TrainConfig, whitening: WhitenTransform | None = None):
    """Initialized (untrained) model for ``config.mode``.

    NetVLAD mode: k-means centres, PCA reduction; returns ``(model, bn)``
    where ``bn`` carries the batch-norm running statistics (``None`` for the
    pooling baselines).
    """
    ids, centers = gallery_matrix(gallery)
    rng = np.random.Generator(np.random.PCG64([config.seed, 1]))
    head = LogisticHead(1.0, 0.0)
    if config.mode != "netvlad":
        gem_p = None
        if config.mode == "gem_shared":
            gem_p = config.gem_p_init
        elif config.mode == "gem_per_dim":
            gem_p = np.full(config.D_e, config.gem_p_init)
        return AggregatorModel(config.mode, config.D_e, config.D_e, head, gem_p=gem_p), None
    sample = _sample_training_elements(ids, centers, config.init_sample, config, rng, whitening)
    netvlad = init_kmeans(sample, config.K, config.kmeans_alpha, seed=config.seed)
    single = np.arange(len(sample) + 1, dtype=np.int64)
    contrib = aggregate_many(
        sample, single,
        AggregatorModel("netvlad", config.D_e, config.D_e * config.K, head, netvlad,
                        ReductionParams.identity(config.D_e * config.K)),
    )
    reduction = init_pca(contrib, config.D)
    # batch-norm statistics from synthetic sets and singletons alike
    sets, queries, _ = build_batch((ids, centers), config, rng=rng, whitening=whitening)
    x, offsets, _ = _ragged(sets, queries)
    p = {"a": netvlad.a, "b": netvlad.b, "c": netvlad.c, "W": reduction.W,
         "scale": reduction.scale, "shift": reduction.shift}
    _, cache = _encode("netvlad", p, x, offsets)
    bn = _BatchNorm(np.concatenate([cache["H"], contrib @ reduction.W.T]), config.bn_momentum)
    scale, shift = bn.folded()
    model = AggregatorModel("netvlad", config.D_e, config.D, head, netvlad,
                            ReductionParams(reduction.W, scale, shift))
    return model, bn


def train(gallery: Sequence[IdentityPrototype], config: TrainConfig,
          whitening: WhitenTransform | None = None, init=None):
    """Train a model from scratch; returns ``(model, TrainLog)``.

    ``whitening`` (stage "before") is applied to every sampled element,
    which is how the whitened pooling baselines are trained.
    """
    ids, centers = gallery_matrix(gallery)
    model, bn = init if init is not None else initial_model(gallery, config, whitening)
    mode = config.mode
    p = _params_of(model)
    if bn is not None:
        p["gamma"], p["beta"] = bn.gamma.copy(), bn.beta.copy()
    velocity = {k: np.zeros_like(v) for k, v in p.items()}
    rng = np.random.Generator(np.random.PCG64([config.seed, 2]))
    tlog = TrainLog()
    step = 0
    losses = []
    for epoch in range(1, config.epochs + 1):
        if epoch <= config.pretrain_epochs:
            phase, lr = "pretrain", config.lr_pretrain
        else:
            phase, lr = "finetune", config.lr_finetune
            if epoch > config.drop_epoch:
                lr /= config.lr_decay_factor
        names = _trainable(mode, phase)
        losses = []
        for _ in range(config.batches_per_epoch):
            sets, queries, labels = build_batch((ids, centers), config, rng=rng, whitening=whitening)
            x, offsets, n_sets = _ragged(sets, queries)
            if bn is not None:
                p["gamma"], p["beta"] = bn.gamma, bn.beta
                p["scale"], p["shift"] = bn.folded()
            loss, grads, cache = _loss_grads(mode, p, x, offsets, n_sets, labels,
                                             config.balance, config.balance_scope)
            step += 1
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, step, loss)
            if step == 1:
                tlog.initial_batch_loss = loss
            losses.append(loss)
            if bn is not None:
                grads.update(bn.param_grads(grads["scale"], grads["shift"]))
            for name in names:
                g = grads[name]
                if name not in _NO_DECAY:
                    g = g + config.weight_decay * p[name]
                velocity[name] = config.momentum * velocity[name] - lr * g
                p[name] = p[name] + velocity[name]
            if "gem_p" in p:
                p["gem_p"] = np.maximum(p["gem_p"], 1.0)
            if bn is not None:
                p["gamma"] = np.maximum(p["gamma"], 1e-3)
                bn.gamma, bn.beta = p["gamma"], p["beta"]
                if phase == "finetune" and lr > 0:
                    bn.update(cache["H"])
        tlog.epochs.append((epoch, float(np.mean(losses)), lr))
        log.info("epoch %d loss %.5f lr %g", epoch, np.mean(losses), lr)
    tlog.final_batch_loss = losses[-1] if losses else float("nan")
    return _export(model, p, bn), tlog


def _export(model: AggregatorModel, p: dict, bn) -> AggregatorModel:
    head = LogisticHead(float(p["w"]), float(p["b_head"]))
    if model.mode == "netvlad":
        scale, shift = bn.folded()
        return AggregatorModel(
            "netvlad", model.dim_in, model.dim_out, head,
            NetVLADParams(p["a"], p["b"], p["c"]),
            ReductionParams(p["W"], scale, shift),
        )
    gem_p = p.get("gem_p")
    if gem_p is not None and np.ndim(gem_p) == 0:
        gem_p = float(gem_p)
    return AggregatorModel(model.mode, model.dim_in, model.dim_out, head, gem_p=gem_p)
