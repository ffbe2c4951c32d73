"""Learned prototype generator: a small attention decoder over class memories.

The generator reads a per-class "memory" (gallery feature vectors with a
learned per-camera embedding added row-wise) through cross-attention and
emits N prototypes autoregressively from a learned start token.  Training
minimizes a triplet hinge in which each gallery anchor pulls only its
nearest generated prototype (so the prototypes partition the class the way
a k-means assignment would, instead of all chasing the class mean), plus a
hinge diversity penalty that keeps a class's prototypes at least ``margin``
apart.  Distances are measured against mined hard negatives: the nearest
other-class feature in the batch.

Decoding is incremental with per-block key/value caches: each step computes
only the newest row, so earlier prototypes are bit-identical no matter how
far generation continues.  All arithmetic is float64 via the local autodiff
engine; gradients are analytic and checked against finite differences in
the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigError,
    DataFormatError,
    DimensionMismatchError,
    EmptyMemoryError,
    NonFiniteValueError,
    TrainingDivergedError,
    UnknownCameraError,
    UnknownClassError,
)
from .seeding import counter_stream, substream
from .store import EmbeddingSet, PrototypeSet

LN_EPS = 1e-5
MODEL_MAGIC = b"GCPM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class GcpConfig:
    """Architecture and optimization settings for the learned generator.

    Defaults are desk-scale (CPU-trainable in seconds to minutes); the
    larger published-scale settings (6 blocks, ffn_dim 512) are accepted
    but slow without vectorized batching.
    """

    dim: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    ffn_dim: int = 64
    dropout_rate: float = 0.2
    n_prototypes: int = 3
    margin: float = 1.2
    lam: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_classes: int = 16
    instances_per_class: int = 8
    epochs: int = 30
    n_cameras: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.n_heads < 1 or self.dim % self.n_heads != 0:
            raise ConfigError(
                f"dim ({self.dim}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be positive")
        if self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.n_prototypes < 1:
            raise ConfigError("n_prototypes must be positive")
        if self.margin <= 0.0:
            raise ConfigError("margin must be positive")
        if self.lam < 0.0:
            raise ConfigError("lam must be non-negative")
        if self.lr < 0.0:
            raise ConfigError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_classes < 1:
            raise ConfigError("batch_classes must be positive")
        if self.instances_per_class < 1:
            raise ConfigError("instances_per_class must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.n_cameras < 1:
            raise ConfigError("n_cameras must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "GcpConfig":
        expected = set(cls.__dataclass_fields__)
        got = set(data)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise DataFormatError(
                f"bad model config keys (missing={missing}, unexpected={extra})"
            )
        return cls(**{k: data[k] for k in expected})


def _param_shapes(cfg: GcpConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.dim, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "sos": (1, d),
        "camera_embeddings": (cfg.n_cameras, d),
        "final_ln.gain": (d,),
        "final_ln.bias": (d,),
        "head.w": (d, d),
        "head.b": (d,),
    }
    for b in range(cfg.n_blocks):
        for sub in ("self", "cross"):
            shapes[f"block{b}.{sub}_ln.gain"] = (d,)
            shapes[f"block{b}.{sub}_ln.bias"] = (d,)
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"block{b}.{sub}.{w}"] = (d, d)
            for bias in ("bq", "bk", "bv", "bo"):
                shapes[f"block{b}.{sub}.{bias}"] = (d,)
        shapes[f"block{b}.ffn_ln.gain"] = (d,)
        shapes[f"block{b}.ffn_ln.bias"] = (d,)
        shapes[f"block{b}.ffn.w1"] = (d, f)
        shapes[f"block{b}.ffn.b1"] = (f,)
        shapes[f"block{b}.ffn.w2"] = (f, d)
        shapes[f"block{b}.ffn.b2"] = (d,)
    return shapes


def init_params(cfg: GcpConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-normal weights, zero biases, unit gains, small start/camera tokens.

    Parameters are created in sorted-name order so the rng consumption, and
    hence the initialization, is reproducible.
    """
    params: dict[str, np.ndarray] = {}
    for name, shape in sorted(_param_shapes(cfg).items()):
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias") or name.rsplit(".", 1)[-1].startswith("b"):
            params[name] = np.zeros(shape)
        elif name in ("sos", "camera_embeddings"):
            params[name] = rng.normal(0.0, 0.02, size=shape)
        else:
            fan_in, fan_out = shape
            std = np.sqrt(2.0 / (fan_in + fan_out))
            params[name] = rng.normal(0.0, std, size=shape)
    return params


@dataclass
class GcpModel:
    config: GcpConfig
    params: dict[str, np.ndarray]


@dataclass(frozen=True)
class Memory:
    """Cross-attention input for one class: feature rows plus camera embeddings."""

    tokens: np.ndarray  # (s, D), already includes the camera embedding rows
    class_id: int
    source_record_ids: tuple[str, ...]


def build_memory(
    eset: EmbeddingSet,
    model: GcpModel,
    class_id: int,
    excluded_camera: int | None = None,
) -> Memory:
    """Assemble a class memory, optionally dropping one camera's records.

    Rows follow gallery record order.  Raises when the exclusion empties the
    class; the caller decides whether to fall back to the unfiltered memory.
    """
    cfg = model.config
    if class_id not in eset.class_index:
        raise UnknownClassError(f"class {class_id} not present in the set")
    if excluded_camera is not None and not 0 <= excluded_camera < cfg.n_cameras:
        raise UnknownCameraError(
            f"camera {excluded_camera} outside [0, {cfg.n_cameras})"
        )
    rows = eset.class_index[class_id]
    records = [eset.records[i] for i in rows]
    for r in records:
        if r.camera_id >= cfg.n_cameras:
            raise UnknownCameraError(
                f"record {r.id!r} has camera {r.camera_id} "
                f"outside [0, {cfg.n_cameras})"
            )
    if excluded_camera is not None:
        records = [r for r in records if r.camera_id != excluded_camera]
        if not records:
            raise EmptyMemoryError(
                f"class {class_id} has no records outside camera {excluded_camera}"
            )
    feats = np.vstack([r.vector for r in records])
    cams = np.array([r.camera_id for r in records], dtype=np.int64)
    tokens = feats + model.params["camera_embeddings"][cams]
    return Memory(
        tokens=tokens,
        class_id=class_id,
        source_record_ids=tuple(r.id for r in records),
    )


class _Ctx:
    """Per-pass mode flags: dropout on/off and its noise source."""

    __slots__ = ("train", "rate", "rng")

    def __init__(self, train: bool, rate: float, rng):
        self.train = train
        self.rate = rate
        self.rng = rng


_INFERENCE = _Ctx(False, 0.0, None)


def _dropout(x: Tensor, ctx: _Ctx) -> Tensor:
    if not ctx.train or ctx.rate == 0.0:
        return x
    keep = (ctx.rng.random(x.shape) >= ctx.rate) / (1.0 - ctx.rate)
    return x * ad.const(keep)


def _attend(q: Tensor, K: Tensor, V: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention for a single query row."""
    d = q.shape[-1]
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    outs = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(K, lo, hi)
        vh = ad.slice_cols(V, lo, hi)
        logits = (qh @ kh.T) * scale
        weights = ad.softmax_rows(logits)
        outs.append(weights @ vh)
    return ad.concat_cols(outs)


def _generate_rows(
    params: Mapping[str, Tensor],
    cfg: GcpConfig,
    mem_tokens: Tensor,
    n: int,
    ctx: _Ctx,
) -> list[Tensor]:
    """Autoregressively decode n prototype rows, each of shape (1, D).

    Self-attention uses growing key/value caches, so each position attends
    only to itself and earlier positions and is computed exactly once.
    Cross-attention keys/values come from the memory tokens, projected once
    per block and shared by every step.
    """
    nb, nh = cfg.n_blocks, cfg.n_heads
    cross_kv = []
    for b in range(nb):
        k = mem_tokens @ params[f"block{b}.cross.wk"] + params[f"block{b}.cross.bk"]
        v = mem_tokens @ params[f"block{b}.cross.wv"] + params[f"block{b}.cross.bv"]
        cross_kv.append((k, v))
    self_k: list[list[Tensor]] = [[] for _ in range(nb)]
    self_v: list[list[Tensor]] = [[] for _ in range(nb)]
    protos: list[Tensor] = []
    x = params["sos"]
    for _ in range(n):
        h = x
        for b in range(nb):
            pre = f"block{b}"
            xn = ad.layer_norm(
                h, params[f"{pre}.self_ln.gain"], params[f"{pre}.self_ln.bias"], LN_EPS
            )
            self_k[b].append(xn @ params[f"{pre}.self.wk"] + params[f"{pre}.self.bk"])
            self_v[b].append(xn @ params[f"{pre}.self.wv"] + params[f"{pre}.self.bv"])
            q = xn @ params[f"{pre}.self.wq"] + params[f"{pre}.self.bq"]
            att = _attend(
                q, ad.concat_rows(self_k[b]), ad.concat_rows(self_v[b]), nh
            )
            h = h + _dropout(att @ params[f"{pre}.self.wo"] + params[f"{pre}.self.bo"], ctx)

            xn = ad.layer_norm(
                h, params[f"{pre}.cross_ln.gain"], params[f"{pre}.cross_ln.bias"], LN_EPS
            )
            q = xn @ params[f"{pre}.cross.wq"] + params[f"{pre}.cross.bq"]
            att = _attend(q, cross_kv[b][0], cross_kv[b][1], nh)
            h = h + _dropout(att @ params[f"{pre}.cross.wo"] + params[f"{pre}.cross.bo"], ctx)

            xn = ad.layer_norm(
                h, params[f"{pre}.ffn_ln.gain"], params[f"{pre}.ffn_ln.bias"], LN_EPS
            )
            f = ad.relu(xn @ params[f"{pre}.ffn.w1"] + params[f"{pre}.ffn.b1"])
            f = f @ params[f"{pre}.ffn.w2"] + params[f"{pre}.ffn.b2"]
            h = h + _dropout(f, ctx)
        hn = ad.layer_norm(h, params["final_ln.gain"], params["final_ln.bias"], LN_EPS)
        p = hn @ params["head.w"] + params["head.b"]
        protos.append(p)
        x = p
    return protos


def _wrap_params(params: Mapping[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def generate_prototypes(model: GcpModel, memory: Memory, n: int) -> list[np.ndarray]:
    """Generate n prototypes for one class memory, dropout off, deterministic."""
    if n < 1:
        raise ConfigError("n must be positive")
    if memory.tokens.ndim != 2 or memory.tokens.shape[1] != model.config.dim:
        raise DimensionMismatchError(
            f"memory tokens have width {memory.tokens.shape[-1]}, "
            f"model dim is {model.config.dim}"
        )
    params = _wrap_params(model.params, requires_grad=False)
    rows = _generate_rows(params, model.config, Tensor(memory.tokens), n, _INFERENCE)
    return [r.data[0].copy() for r in rows]


def select_gcp(
    eset: EmbeddingSet,
    model: GcpModel,
    n: int | None = None,
    query_camera_by_class: Mapping[int, int] | None = None,
) -> PrototypeSet:
    """Generate prototypes for every class with the trained model.

    When ``query_camera_by_class`` maps a class to a camera, that class's
    memory drops the camera's records (falling back to the full memory when
    nothing would remain; such classes are flagged in params_echo).  The
    per-class count is min(n, memory rows).
    """
    cfg = model.config
    if eset.dim != cfg.dim:
        raise DimensionMismatchError(
            f"set dimension {eset.dim} does not match model dim {cfg.dim}"
        )
    if n is None:
        n = cfg.n_prototypes
    if n < 1:
        raise ConfigError("n must be positive")
    per_class: dict[int, np.ndarray] = {}
    fallback: list[int] = []
    reduced: dict[str, int] = {}
    filtered: dict[str, int] = {}
    for c in eset.class_ids:
        exc = None if query_camera_by_class is None else query_camera_by_class.get(c)
        if exc is None:
            memory = build_memory(eset, model, c)
        else:
            try:
                memory = build_memory(eset, model, c, excluded_camera=exc)
                filtered[str(c)] = exc
            except EmptyMemoryError:
                memory = build_memory(eset, model, c)
                fallback.append(c)
        n_c = min(n, memory.tokens.shape[0])
        if n_c < n:
            reduced[str(c)] = n_c
        protos = generate_prototypes(model, memory, n_c)
        per_class[c] = np.vstack(protos)
    echo = {
        "method": "gcp",
        "n_requested": n,
        "camera_filtered_classes": filtered,
        "fallback_unfiltered_classes": fallback,
        "reduced_count_classes": reduced,
    }
    return PrototypeSet(per_class=per_class, selector_tag="gcp", params_echo=echo)


@dataclass(frozen=True)
class ClassBatch:
    """One class's slice of a training batch.

    ``negative_distances[i]`` is the distance from anchor i to its nearest
    feature of any other class in the batch, precomputed by the miner; the
    loss treats it as a constant.
    """

    class_id: int
    anchors: np.ndarray  # (m, D)
    negative_distances: np.ndarray  # (m,)
    memory_features: np.ndarray  # (s, D), raw features without camera embedding
    memory_cameras: np.ndarray  # (s,) int
    n_prototypes: int


def mine_negative_distances(features_by_class: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Per anchor, the distance to the nearest feature of any other class."""
    if len(features_by_class) < 2:
        raise ConfigError("negative mining needs at least two classes in the batch")
    stacked = np.vstack(features_by_class)
    labels = np.concatenate(
        [np.full(len(f), i) for i, f in enumerate(features_by_class)]
    )
    dists = cdist(stacked, stacked)
    dists[labels[:, None] == labels[None, :]] = np.inf
    mins = dists.min(axis=1)
    out = []
    start = 0
    for f in features_by_class:
        out.append(mins[start : start + len(f)])
        start += len(f)
    return out


def _loss_graph(
    params: Mapping[str, Tensor],
    cfg: GcpConfig,
    batches: Sequence[ClassBatch],
    ctx: _Ctx,
) -> Tensor:
    """Triplet hinge over (anchor, nearest prototype) pairs plus the
    diversity hinge averaged over classes, built as one autodiff graph.

    Each anchor contributes one term against its closest generated
    prototype, mirroring how multi-prototype classes are scored at
    retrieval.  The nearest index is recomputed every step from current
    values but held constant inside the graph, so the gradient routes
    through the selected prototype only (exact away from assignment ties,
    which have measure zero under random init).
    """
    psi = params["camera_embeddings"]
    triplet_terms: list[Tensor] = []
    n_triplets = 0
    reg_terms: list[Tensor] = []
    for cb in batches:
        mem = ad.take_rows(psi, cb.memory_cameras) + ad.const(cb.memory_features)
        rows = _generate_rows(params, cfg, mem, cb.n_prototypes, ctx)
        P = ad.concat_rows(rows)  # (N, D)
        A = ad.const(cb.anchors)  # (m, D)
        a2 = ad.sum_(A * A, axis=1, keepdims=True)
        p2 = ad.sum_(P * P, axis=1, keepdims=True)
        d2 = a2 + p2.T - 2.0 * (A @ P.T)
        d_ap = ad.sqrt(ad.relu(d2))  # clamp cancellation residue before the root
        nearest = np.eye(cb.n_prototypes)[d_ap.data.argmin(axis=1)]  # (m, N)
        d_pos = ad.sum_(d_ap * ad.const(nearest), axis=1)  # (m,)
        hinge = ad.relu(d_pos - ad.const(cb.negative_distances) + cfg.margin)
        triplet_terms.append(ad.sum_(hinge))
        n_triplets += cb.anchors.shape[0]
        if cb.n_prototypes >= 2 and cfg.lam > 0.0:
            n = cb.n_prototypes
            dd2 = p2 + p2.T - 2.0 * (P @ P.T)
            d_pp = ad.sqrt(ad.relu(dd2))
            off_diag = ad.const(1.0 - np.eye(n))
            pair_hinge = ad.relu(cfg.margin - d_pp) * off_diag
            reg_terms.append(ad.sum_(pair_hinge) * (1.0 / (n * (n - 1))))
    total = _sum_tensors(triplet_terms) * (1.0 / n_triplets)
    if reg_terms and cfg.lam > 0.0:
        total = total + cfg.lam * (_sum_tensors(reg_terms) * (1.0 / len(batches)))
    return total


def _sum_tensors(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def loss_and_grads(
    params: Mapping[str, np.ndarray],
    cfg: GcpConfig,
    batches: Sequence[ClassBatch],
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and analytic gradients for explicit batches, dropout off.

    This is the deterministic entry point used by finite-difference checks;
    the training loop runs the same graph with dropout enabled.
    """
    params_t = _wrap_params(dict(params), requires_grad=True)
    out = _loss_graph(params_t, cfg, batches, _INFERENCE)
    out.backward()
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in params_t.items()
    }
    return float(out.data), grads


def loss(
    model,
    anchors,
    positives,
    negatives,
    prototypes_by_class: Mapping[int, np.ndarray],
    cfg: GcpConfig,
) -> float:
    """Triplet hinge over explicit (anchor, positive, negative) rows plus the
    per-class prototype diversity hinge.

    ``model`` is accepted for interface symmetry and not consulted: the
    parameters enter only through the already-generated positives and
    prototypes.  Classes with a single prototype contribute zero diversity
    penalty.
    """
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    p = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    n = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if not (a.shape == p.shape == n.shape):
        raise DimensionMismatchError(
            f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}"
        )
    if a.size == 0:
        triplet = 0.0
    else:
        d_ap = np.linalg.norm(a - p, axis=1)
        d_an = np.linalg.norm(a - n, axis=1)
        triplet = float(np.mean(np.maximum(0.0, cfg.margin + d_ap - d_an)))
    reg_vals = []
    for protos in prototypes_by_class.values():
        protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
        k = protos.shape[0]
        if k < 2:
            reg_vals.append(0.0)
            continue
        dists = cdist(protos, protos)
        hinges = np.maximum(0.0, cfg.margin - dists)
        hinges[np.diag_indices(k)] = 0.0
        reg_vals.append(float(hinges.sum() / (k * (k - 1))))
    reg = float(np.mean(reg_vals)) if reg_vals else 0.0
    return triplet + cfg.lam * reg


@dataclass
class TrainingTrace:
    epoch_mean_loss: list[float] = field(default_factory=list)


def _sample_class_batches(
    eset: EmbeddingSet,
    class_chunk: Sequence[int],
    cfg: GcpConfig,
    rng: np.random.Generator,
) -> list[ClassBatch]:
    m = cfg.instances_per_class
    anchors_list = []
    picked = []
    for c in class_chunk:
        feats = eset.class_matrix(c)
        cams = np.array(
            [eset.records[i].camera_id for i in eset.class_index[c]], dtype=np.int64
        )
        pool = len(feats)
        # short classes are resampled with replacement to fill the slot
        idx = rng.choice(pool, size=m, replace=pool < m)
        s = int(rng.integers(2, m + 1))
        picked.append((c, feats[idx], feats[idx[:s]], cams[idx[:s]]))
        anchors_list.append(feats[idx])
    neg = mine_negative_distances(anchors_list)
    return [
        ClassBatch(
            class_id=c,
            anchors=anchors,
            negative_distances=neg_c,
            memory_features=mem_f,
            memory_cameras=mem_c,
            n_prototypes=cfg.n_prototypes,
        )
        for (c, anchors, mem_f, mem_c), neg_c in zip(picked, neg)
    ]


def train(eset: EmbeddingSet, cfg: GcpConfig) -> tuple[GcpModel, TrainingTrace]:
    """SGD with momentum and weight decay over shuffled class mini-batches.

    Each batch groups ``batch_classes`` classes with ``instances_per_class``
    sampled features per class; the memory for each class is a random-size
    subset (s between 2 and instances_per_class) of those features.  Update
    order per step: gradient += weight_decay * param, velocity = momentum *
    velocity + gradient, param -= lr * velocity.  Deterministic given
    cfg.seed; dropout noise comes from a counter-based stream.
    """
    if eset.dim != cfg.dim:
        raise DimensionMismatchError(
            f"set dimension {eset.dim} does not match cfg.dim {cfg.dim}"
        )
    if len(eset.class_ids) < 2:
        raise ConfigError("training needs at least two classes")
    if cfg.batch_classes < 2:
        raise ConfigError("batch_classes must be at least 2 to mine negatives")
    if cfg.instances_per_class < 2:
        raise ConfigError("instances_per_class must be at least 2 (memory needs >= 2 rows)")
    max_cam = max(r.camera_id for r in eset.records)
    if max_cam >= cfg.n_cameras:
        raise UnknownCameraError(
            f"set contains camera {max_cam}, outside [0, {cfg.n_cameras})"
        )
    params = init_params(cfg, substream(cfg.seed, "init"))
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    sampler = substream(cfg.seed, "sampling")
    ctx = _Ctx(True, cfg.dropout_rate, counter_stream(cfg.seed, "dropout"))
    classes = list(eset.class_ids)
    trace = TrainingTrace()
    for epoch in range(cfg.epochs):
        order = [classes[i] for i in sampler.permutation(len(classes))]
        chunks = [
            order[i : i + cfg.batch_classes]
            for i in range(0, len(order), cfg.batch_classes)
        ]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            chunks[-2].extend(chunks[-1])
            chunks.pop()
        epoch_losses = []
        for bi, chunk in enumerate(chunks):
            batches = _sample_class_batches(eset, chunk, cfg, sampler)
            params_t = _wrap_params(params, requires_grad=True)
            out = _loss_graph(params_t, cfg, batches, ctx)
            if not np.isfinite(out.data):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi}"
                )
            out.backward()
            for name, p in params.items():
                g = params_t[name].grad
                if g is None:
                    g = np.zeros_like(p)
                g = g + cfg.weight_decay * p
                velocity[name] = cfg.momentum * velocity[name] + g
                p -= cfg.lr * velocity[name]
                if not np.all(np.isfinite(p)):
                    raise TrainingDivergedError(
                        f"non-finite parameter {name!r} after epoch {epoch}, batch {bi}"
                    )
            epoch_losses.append(float(out.data))
        trace.epoch_mean_loss.append(float(np.mean(epoch_losses)))
    return GcpModel(config=cfg, params=params), trace


def save_model(model: GcpModel, path) -> None:
    """Write a checkpoint: magic, version, config JSON, manifest, f64 blob."""
    cfg_json = json.dumps(model.config.to_json_dict(), sort_keys=True).encode("utf-8")
    manifest = []
    blob_parts = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob_parts.append(arr.tobytes())
        offset += arr.nbytes
    man_json = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<I", len(man_json)))
        fh.write(man_json)
        for part in blob_parts:
            fh.write(part)


def load_model(path) -> GcpModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
        raise DataFormatError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != MODEL_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8

    def take_block(what: str) -> bytes:
        nonlocal pos
        if pos + 4 > len(raw):
            raise DataFormatError(f"{path}: truncated before {what} length")
        (length,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + length > len(raw):
            raise DataFormatError(f"{path}: truncated inside {what}")
        block = raw[pos : pos + length]
        pos += length
        return block

    try:
        cfg_dict = json.loads(take_block("config").decode("utf-8"))
        manifest = json.loads(take_block("manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt checkpoint metadata ({exc})") from exc
    cfg = GcpConfig.from_json_dict(cfg_dict)
    expected = _param_shapes(cfg)
    seen = {entry["name"]: tuple(entry["shape"]) for entry in manifest}
    if seen != {k: tuple(v) for k, v in expected.items()}:
        missing = sorted(set(expected) - set(seen))
        extra = sorted(set(seen) - set(expected))
        wrong = sorted(
            k for k in set(seen) & set(expected) if seen[k] != tuple(expected[k])
        )
        raise DataFormatError(
            f"{path}: manifest does not match config "
            f"(missing={missing}, unexpected={extra}, wrong shape={wrong})"
        )
    blob = raw[pos:]
    params: dict[str, np.ndarray] = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise DataFormatError(
                f"{path}: parameter {entry['name']!r} extends past end of file"
            )
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        params[entry["name"]] = arr.astype(np.float64).reshape(shape)
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"{path}: parameter {name!r} has non-finite values")
    return GcpModel(config=cfg, params=params)
