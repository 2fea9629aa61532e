"""Clustering-based gate initialization and gate-usage diagnostics.

Training the mixture from a cold start tends to saturate the gate onto a
single expert (early large gradients win the routing before the experts
differentiate). The cure implemented here: train a base activity network,
embed every window through its convolutional trunk, cluster the embeddings
with k-means, and teach the gate to predict the cluster ids before the
alternating phases begin. A KL-to-uniform load-balance penalty on the
batch-mean gate is available as the alternative, weaker remedy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nnet
from .data import LabeledDataset
from .errors import ContractError
from .mixture import MixtureModel

Array = np.ndarray


def train_base_and_embed(
    dataset: LabeledDataset,
    spec: nnet.NetworkSpec,
    epochs: int,
    seed: int,
    *,
    batch_size: int = 32,
    learning_rate: float = 0.001,
    momentum: float = 0.9,
) -> tuple[nnet.Parameters, Array]:
    """Train a base network on activities, then embed every window.

    The embedding is the flattened, rectified output of the final conv
    layer, one row per window.
    """
    if len(dataset) == 0:
        raise ContractError("cannot pretrain on an empty dataset")
    X, y = dataset.stack(), dataset.activities()
    rng = np.random.default_rng(seed)
    params = nnet.init_parameters(spec, dataset.n_channels, dataset.window_len, int(rng.integers(2**63)))
    params = nnet.train_network(
        spec, params, X, y,
        epochs=epochs, batch_size=batch_size,
        opt=nnet.SgdState(learning_rate, momentum),
        shuffle_seeds=[[seed, 0, e] for e in range(epochs)],
    )
    return params, nnet.conv_features(spec, params, X)


@dataclass(frozen=True)
class KMeansResult:
    centroids: Array  # (k, dim)
    assignments: Array  # (n,)
    inertia: float
    n_iter: int


def _plus_plus_seeding(points: Array, k: int, rng: np.random.Generator) -> Array:
    """k-means++ start: spread initial centroids by squared-distance sampling."""
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = points[rng.integers(n)]
            continue
        centroids[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_cluster(
    embeddings: Array, k: int, seed: int, max_iter: int = 100, n_init: int = 10
) -> KMeansResult:
    """Best of ``n_init`` k-means++ starts, each run to the Lloyd fixpoint.

    An empty cluster is reseeded to the point currently farthest from its
    own centroid. Inertia is checked to be non-increasing on every
    iteration; the restart with the lowest final inertia wins (ties go to
    the earlier restart). Deterministic given the seed.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError(f"embeddings must be 2-D, got shape {points.shape}")
    n = len(points)
    if k < 1 or k > n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    best: KMeansResult | None = None
    for restart in range(max(n_init, 1)):
        result = _kmeans_once(points, k, [seed, restart], max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def _kmeans_once(points: Array, k: int, seed, max_iter: int) -> KMeansResult:
    n = len(points)
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_seeding(points, k, rng)

    def distances(cents):
        return ((points[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)

    assignments = distances(centroids).argmin(axis=1)
    prev_inertia = np.inf
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for j in range(k):
            mask = assignments == j
            if mask.any():
                centroids[j] = points[mask].mean(axis=0)
            else:
                own = distances(centroids)[np.arange(n), assignments]
                centroids[j] = points[own.argmax()]
        d = distances(centroids)
        new_assignments = d.argmin(axis=1)
        inertia = float(d[np.arange(n), new_assignments].sum())
        assert inertia <= prev_inertia + 1e-9 * max(1.0, abs(prev_inertia)), "inertia increased"
        prev_inertia = inertia
        if np.array_equal(new_assignments, assignments):
            assignments = new_assignments
            break
        assignments = new_assignments
    return KMeansResult(
        centroids=centroids, assignments=assignments, inertia=prev_inertia, n_iter=n_iter
    )


def pretrain_gate(
    model: MixtureModel,
    dataset: LabeledDataset,
    assignments: Array,
    epochs: int,
    *,
    seed: int = 0,
    batch_size: int = 32,
    learning_rate: float = 0.001,
    momentum: float = 0.9,
) -> MixtureModel:
    """Train the gate on cluster ids as supervised targets; experts untouched."""
    assignments = np.asarray(assignments)
    if len(assignments) != len(dataset):
        raise ContractError(
            f"{len(assignments)} assignments for {len(dataset)} windows"
        )
    if assignments.size and (assignments.min() < 0 or assignments.max() >= model.n_contexts):
        raise ContractError(
            f"cluster ids must lie in [0, {model.n_contexts}) to match the gate outputs"
        )
    if epochs == 0:
        return model
    gate_params = nnet.train_network(
        model.gate_spec, model.gate_params, dataset.stack(), assignments,
        epochs=epochs, batch_size=batch_size,
        opt=nnet.SgdState(learning_rate, momentum),
        shuffle_seeds=[[seed, 1, e] for e in range(epochs)],
    )
    return replace(model, gate_params=gate_params)


@dataclass(frozen=True)
class PretrainInfo:
    base_params: nnet.Parameters
    kmeans: KMeansResult
    gate_train_accuracy: float


def pretrain_mixture_gate(
    model: MixtureModel,
    dataset: LabeledDataset,
    *,
    base_epochs: int,
    gate_epochs: int,
    seed: int,
    batch_size: int = 32,
    learning_rate: float = 0.001,
    momentum: float = 0.9,
) -> tuple[MixtureModel, PretrainInfo]:
    """Full pipeline: base net -> conv embeddings -> k-means (k = gate outputs)
    -> supervised gate initialization."""
    base_params, emb = train_base_and_embed(
        dataset, model.expert_spec, base_epochs, seed,
        batch_size=batch_size, learning_rate=learning_rate, momentum=momentum,
    )
    km = kmeans_cluster(emb, k=model.n_contexts, seed=seed)
    model = pretrain_gate(
        model, dataset, km.assignments, gate_epochs,
        seed=seed, batch_size=batch_size,
        learning_rate=learning_rate, momentum=momentum,
    )
    q, _ = nnet.forward(model.gate_spec, model.gate_params, dataset.stack())
    acc = float((q.argmax(axis=1) == km.assignments).mean()) if len(dataset) else 0.0
    return model, PretrainInfo(base_params=base_params, kmeans=km, gate_train_accuracy=acc)


def gate_usage_stats(model: MixtureModel, dataset: LabeledDataset) -> tuple[Array, float]:
    """Mean gate output over the dataset and its perplexity.

    Perplexity exp(H(mean gate)) ranges from 1 (all mass on one expert,
    the collapsed regime) to n_contexts (uniform usage).
    """
    from .mixture import gate_probs

    if len(dataset) == 0:
        return np.full(model.n_contexts, np.nan), float("nan")
    mean = gate_probs(model, dataset.stack()).mean(axis=0)
    return mean, perplexity(mean)


def perplexity(p: Array) -> float:
    p = np.asarray(p, dtype=np.float64)
    pos = p > 0
    entropy = float(-(p[pos] * np.log(p[pos])).sum())
    return float(np.exp(entropy))


def balance_regularizer(gate_mean: Array, coeff: float) -> float:
    """coeff * KL(gate_mean || uniform); zero exactly at uniform usage."""
    m = np.asarray(gate_mean, dtype=np.float64)
    if m.ndim != 1 or (m < -1e-12).any() or abs(m.sum() - 1.0) > 1e-6:
        raise ContractError("gate_mean must be a probability vector")
    if coeff == 0.0:
        return 0.0
    pos = m > 0
    return float(coeff * (m[pos] * np.log(m[pos] * len(m))).sum())
