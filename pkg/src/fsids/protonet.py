"""Episodic few-shot training: class prototypes, distance softmax, NLL loss.

A prototype is the mean embedding of a class's support examples.  Queries are
classified by a softmax over negative distances to the prototypes, and the
training loss is the mean negative log-likelihood of the correct class over
the query set.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderModel, embed_images, encode
from .errors import ContractError
from .numcore import (
    Adam, Tensor, backward, log_softmax, matmul, neg, reshape, take, tmean, tsum,
)
from .numcore.rng import stream


class DistanceKind(enum.Enum):
    SQUARED_EUCLIDEAN = "squared_euclidean"
    EUCLIDEAN = "euclidean"
    COSINE = "cosine_distance"


@dataclass
class PrototypeSet:
    """Per-class mean embeddings, ordered by class id."""

    class_ids: np.ndarray  # (P,) ints, ascending
    vectors: np.ndarray    # (P, D) float64

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.class_ids)


@dataclass
class Episode:
    """One few-shot task: k_shot support items per class plus a query set."""

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray

    @property
    def n_way(self) -> int:
        return len(np.unique(self.support_labels))

    @property
    def k_shot(self) -> int:
        _, counts = np.unique(self.support_labels, return_counts=True)
        return int(counts[0])


@dataclass
class ProtoConfig:
    dist: DistanceKind = DistanceKind.SQUARED_EUCLIDEAN
    k_shot: int = 10
    episodes: int = 2000
    query_size: int = 15
    lr: float = 1e-3


def compute_prototypes(embeddings: np.ndarray, labels: np.ndarray, k_shot: int) -> PrototypeSet:
    """Mean embedding per class; every class must appear exactly k_shot times."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    for c, n in zip(classes, counts):
        if n != k_shot:
            raise ContractError(f"class {c} has {n} support items, expected exactly {k_shot}")
    vectors = np.stack([embeddings[labels == c].sum(axis=0) / k_shot for c in classes])
    return PrototypeSet(class_ids=classes, vectors=vectors)


def distance_matrix(queries: np.ndarray, protos: np.ndarray, kind: DistanceKind) -> np.ndarray:
    """Pairwise distances (Q, P) under the chosen metric."""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    if kind is DistanceKind.SQUARED_EUCLIDEAN or kind is DistanceKind.EUCLIDEAN:
        d = ((q[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)
        return d if kind is DistanceKind.SQUARED_EUCLIDEAN else np.sqrt(d)
    # cosine distance; zero vectors score distance 1 against anything but
    # another zero vector, keeping dist(a, a) == 0
    qn = np.linalg.norm(q, axis=1)
    pn = np.linalg.norm(p, axis=1)
    qh = np.where(qn[:, None] > 0, q / np.maximum(qn, 1e-300)[:, None], 0.0)
    ph = np.where(pn[:, None] > 0, p / np.maximum(pn, 1e-300)[:, None], 0.0)
    d = 1.0 - qh @ ph.T
    both_zero = (qn[:, None] == 0) & (pn[None, :] == 0)
    return np.where(both_zero, 0.0, d)


def classify_query(query_embedding: np.ndarray, protos: PrototypeSet,
                   dist: DistanceKind = DistanceKind.SQUARED_EUCLIDEAN) -> np.ndarray:
    """Softmax over negative distances to each prototype."""
    if len(protos) == 0:
        raise ContractError("cannot classify against an empty prototype set")
    q = np.asarray(query_embedding, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != protos.dim:
        raise ContractError(f"query dim {q.shape[1]} != prototype dim {protos.dim}")
    logits = -distance_matrix(q, protos.vectors, dist)[0]
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def _distances_tensor(queries: Tensor, protos: Tensor, kind: DistanceKind,
                      n_query: int, n_proto: int) -> Tensor:
    qe = reshape(queries, (n_query, 1, -1))
    pe = reshape(protos, (1, n_proto, -1))
    diff = qe - pe
    sq = tsum(diff * diff, axis=2)
    if kind is DistanceKind.SQUARED_EUCLIDEAN:
        return sq
    if kind is DistanceKind.EUCLIDEAN:
        return (sq + 1e-12) ** 0.5
    qn = (tsum(queries * queries, axis=1, keepdims=True) + 1e-12) ** -0.5
    pn = (tsum(protos * protos, axis=1, keepdims=True) + 1e-12) ** -0.5
    sim = matmul(queries * qn, _transpose(protos * pn))
    return 1.0 - sim


def _transpose(t: Tensor) -> Tensor:
    from .numcore.tensor import _from_op

    def bw(g):
        return (g.T,)

    return _from_op(t.data.T.copy(), (t,), bw)


def nll_from_neg_distances(neg_dist: Tensor, true_idx: np.ndarray) -> Tensor:
    """Mean -log softmax(neg_dist)[true class] over the query rows."""
    n, p = neg_dist.data.shape
    logp = log_softmax(neg_dist, axis=1)
    onehot = np.zeros((n, p), dtype=neg_dist.data.dtype)
    onehot[np.arange(n), true_idx] = 1.0
    picked = tsum(logp * Tensor(onehot), axis=1)
    return neg(tmean(picked))


def episode_loss(episode: Episode, model: EncoderModel,
                 dist: DistanceKind = DistanceKind.SQUARED_EUCLIDEAN) -> Tensor:
    """Differentiable episode NLL; prototypes are built in-graph from support."""
    if len(episode.query_images) == 0:
        raise ContractError("episode has an empty query set")
    classes, counts = np.unique(episode.support_labels, return_counts=True)
    if len(set(counts)) != 1:
        raise ContractError(f"unequal support counts per class: {dict(zip(classes, counts))}")
    k = int(counts[0])
    n_s = len(episode.support_images)
    batch = np.concatenate([episode.support_images, episode.query_images], axis=0)
    _, emb = encode(model, batch, train=True)
    support_emb = take(emb, np.arange(n_s))
    query_emb = take(emb, np.arange(n_s, len(batch)))

    # class-bucketed mean as a constant matrix multiply: (P, n_s) @ (n_s, D)
    pool = np.zeros((len(classes), n_s), dtype=emb.data.dtype)
    for row, c in enumerate(classes):
        pool[row, episode.support_labels == c] = 1.0 / k
    protos = matmul(Tensor(pool), support_emb)

    class_pos = {c: i for i, c in enumerate(classes)}
    true_idx = np.array([class_pos[c] for c in episode.query_labels])
    dists = _distances_tensor(query_emb, protos, dist,
                              len(episode.query_images), len(classes))
    return nll_from_neg_distances(neg(dists), true_idx)


def train_protonet(images: np.ndarray, labels: np.ndarray, model: EncoderModel,
                   cfg: ProtoConfig, seed: int):
    """Episodic training over all classes; returns (model, per-episode loss)."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    index_by_class = {c: np.flatnonzero(labels == c) for c in classes}
    for c in classes:
        if len(index_by_class[c]) < cfg.k_shot + 1:
            raise ContractError(
                f"class {c} has {len(index_by_class[c])} samples; episodic sampling "
                f"needs at least k_shot + 1 = {cfg.k_shot + 1}")
    opt = Adam(model.params, lr=cfg.lr)
    trace = []
    for ep in range(cfg.episodes):
        rng = stream(seed, "episode", ep)
        sup_idx, qry_idx = [], []
        for c in classes:
            perm = rng.permutation(index_by_class[c])
            sup_idx.append(perm[:cfg.k_shot])
            n_query = min(cfg.query_size, len(perm) - cfg.k_shot)
            qry_idx.append(perm[cfg.k_shot:cfg.k_shot + n_query])
        sup_idx = np.concatenate(sup_idx)
        qry_idx = np.concatenate(qry_idx)
        episode = Episode(images[sup_idx], labels[sup_idx], images[qry_idx], labels[qry_idx])
        loss = episode_loss(episode, model, cfg.dist)
        opt.zero_grad()
        backward(loss)
        opt.step()
        trace.append(float(loss.data))
    return model, np.array(trace)


@dataclass
class EmbeddingTable:
    """One row per sample: embedding plus negative distances to each prototype."""

    ids: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray      # (N, D)
    neg_distances: np.ndarray   # (N, P)
    class_ids: np.ndarray = field(default=None)

    def features(self, include_distances: bool = True) -> np.ndarray:
        if include_distances:
            return np.concatenate([self.embeddings, self.neg_distances], axis=1)
        return self.embeddings.copy()

    def to_csv(self, path) -> None:
        d = self.embeddings.shape[1]
        p = self.neg_distances.shape[1]
        header = (["id", "label"] + [f"e{i}" for i in range(d)]
                  + [f"nd{i}" for i in range(p)])
        lines = [",".join(header)]
        for i in range(len(self.ids)):
            row = [str(int(self.ids[i])), str(int(self.labels[i]))]
            row += [repr(float(v)) for v in self.embeddings[i]]
            row += [repr(float(v)) for v in self.neg_distances[i]]
            lines.append(",".join(row))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def embed_with_prototypes(images: np.ndarray, labels: np.ndarray, model: EncoderModel,
                          protos: PrototypeSet,
                          dist: DistanceKind = DistanceKind.SQUARED_EUCLIDEAN,
                          ids: np.ndarray = None) -> EmbeddingTable:
    """Inference-mode embedding table for a dataset against fixed prototypes."""
    emb = embed_images(model, images)
    neg_d = -distance_matrix(emb, protos.vectors, dist)
    if ids is None:
        ids = np.arange(len(images))
    return EmbeddingTable(ids=np.asarray(ids), labels=np.asarray(labels),
                          embeddings=emb, neg_distances=neg_d,
                          class_ids=protos.class_ids.copy())
