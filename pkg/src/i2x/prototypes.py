"""Abstract prototypes: PCA reduction and K-Means over the spatial feature
vectors of the final model, plus per-location prototype assignments.

Prototype ids are 1-based everywhere they are user-visible (assignment
values, presence sets, report labels "P-<k>"); arrays indexed by prototype
use position id-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import artifact_store, numerics
from .errors import DegenerateDataError, ShapeMismatchError, TooFewPointsError


@dataclass
class PcaModel:
    """Mean + orthonormal basis columns + explained-variance ratios (descending)."""

    mean: np.ndarray  # (d,)
    basis: np.ndarray  # (d, r)
    ratios: np.ndarray  # (r,)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def reduced_dim(self) -> int:
        return int(self.basis.shape[1])

    def project(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.basis

    def reconstruct(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.basis.T + self.mean


def fit_pca(features, variance_target: float) -> PcaModel:
    """PCA via covariance eigendecomposition (numerics.sym_eig).

    Keeps the smallest r whose cumulative explained variance reaches
    ``variance_target``, capped at the numerical rank (r >= 1).
    """
    x = numerics.check_finite(features, "features")
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateDataError(f"need a (rows>=2, d) matrix, got {x.shape}")
    if not (0.0 < variance_target <= 1.0):
        raise DegenerateDataError(f"variance_target {variance_target} outside (0, 1]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / (x.shape[0] - 1)
    if float(np.abs(cov).max(initial=0.0)) == 0.0:
        raise DegenerateDataError("covariance is identically zero")
    eig = numerics.sym_eig(cov)
    lam = np.maximum(eig.eigenvalues, 0.0)
    total = lam.sum()
    ratios = lam / total
    rank = int(np.sum(lam > lam[0] * 1e-12))
    cumulative = np.cumsum(ratios)
    r = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1)
    r = max(1, min(r, rank))
    return PcaModel(mean=mean, basis=eig.eigenvectors[:, :r].copy(), ratios=ratios[:r].copy())


@dataclass
class PrototypeBook:
    """K centroids in PCA space; the toolkit's abstract prototypes."""

    centroids: np.ndarray  # (K, r)
    k: int
    pca: PcaModel
    inertia: float
    seed: int
    variance_target: float = 0.95
    inertia_history: list = field(default_factory=list)  # diagnostic, per Lloyd step


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: per step, sample 2+log(k) candidates by the D^2
    distribution and keep the one that lowers the total potential most."""
    n = x.shape[0]
    n_trials = 2 + int(np.log(k))
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = numerics.pairwise_sq_dist(x, centers[0:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            raise TooFewPointsError(f"fewer than {k} distinct points")
        candidates = rng.choice(n, size=n_trials, p=closest / total)
        dist_to_cand = numerics.pairwise_sq_dist(x, x[candidates])
        potentials = np.minimum(closest[:, None], dist_to_cand).sum(axis=0)
        best = int(potentials.argmin())
        centers[i] = x[candidates[best]]
        closest = np.minimum(closest, dist_to_cand[:, best])
    return centers


def relocate_empty_clusters(labels: np.ndarray, d2: np.ndarray, k: int) -> np.ndarray:
    """Re-seed each empty cluster at the point farthest from its currently
    assigned centroid (ascending cluster-id order; a point feeds at most one
    empty cluster). Mutates and returns ``labels``."""
    counts = np.bincount(labels, minlength=k)
    empties = np.where(counts == 0)[0]
    if empties.size:
        cost = d2[np.arange(labels.shape[0]), labels].copy()
        for empty in empties:
            worst = int(cost.argmax())
            labels[worst] = empty
            cost[worst] = -1.0
    return labels


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int):
    n = x.shape[0]
    centers = _kmeanspp_init(x, k, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = numerics.pairwise_sq_dist(x, centers)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = relocate_empty_clusters(new_labels, d2, k)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        centers = sums / counts[:, None]
    return centers, history


def fit_prototypes(reduced, k: int, seed: int, max_iter: int = 100,
                   n_init: int = 10) -> PrototypeBook:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    Runs ``n_init`` seeded restarts and keeps the lowest-inertia fixpoint
    (ties: first). Within a run, inertia is nonincreasing (recorded in
    inertia_history for the winner). An emptied cluster is re-seeded at the
    point farthest from its currently assigned centroid.
    """
    x = numerics.check_finite(reduced, "reduced")
    if x.ndim != 2:
        raise TooFewPointsError(f"need a (rows, r) matrix, got {x.shape}")
    n = x.shape[0]
    if k < 2:
        raise TooFewPointsError("k must be >= 2")
    if n < k:
        raise TooFewPointsError(f"{n} points < k={k}")
    rng = np.random.Generator(np.random.PCG64(seed))
    best_centers, best_history = None, None
    for _ in range(max(1, n_init)):
        centers, history = _lloyd(x, k, rng, max_iter)
        if best_history is None or history[-1] < best_history[-1] - 1e-12:
            best_centers, best_history = centers, history

    if len(np.unique(best_centers, axis=0)) != k:
        raise TooFewPointsError("duplicate centroids: fewer distinct points than k")
    return PrototypeBook(
        centroids=best_centers,
        k=k,
        pca=None,  # attached by the caller that owns the PCA model
        inertia=best_history[-1],
        seed=seed,
        inertia_history=best_history,
    )


def build_book(features, k: int, seed: int, variance_target: float = 0.95,
               max_iter: int = 100) -> PrototypeBook:
    """fit_pca + fit_prototypes over stacked (rows, d) feature vectors."""
    pca = fit_pca(features, variance_target)
    book = fit_prototypes(pca.project(features), k=k, seed=seed, max_iter=max_iter)
    book.pca = pca
    book.variance_target = variance_target
    return book


@dataclass
class AssignmentMap:
    """Per-sample spatial prototype assignments, position-aligned with F.

    labels is (N, h*w) with values in 1..K, rows aligned with sample_ids.
    """

    labels: np.ndarray
    sample_ids: np.ndarray
    k: int


def assign(archive, book: PrototypeBook) -> AssignmentMap:
    """Project every spatial feature vector and label it with the nearest
    centroid (squared Euclidean; ties to the lowest index)."""
    h, w, d = archive.feature_shape
    if d != book.pca.dim:
        raise ShapeMismatchError(f"archive feature dim {d} != PCA input dim {book.pca.dim}")
    n = archive.size
    flat = np.asarray(archive.features, dtype=np.float64).reshape(n * h * w, d)
    z = book.pca.project(flat)
    d2 = numerics.pairwise_sq_dist(z, book.centroids)
    labels = (d2.argmin(axis=1) + 1).astype(np.int32).reshape(n, h * w)
    return AssignmentMap(labels=labels, sample_ids=np.asarray(archive.sample_ids), k=book.k)


def presence(assignments: AssignmentMap) -> list:
    """presence[i] = frozenset of prototype ids with >= 1 assigned location."""
    return [frozenset(np.unique(row).tolist()) for row in assignments.labels]


def presence_by_id(assignments: AssignmentMap) -> dict:
    """Same as presence(), keyed by sample id."""
    sets = presence(assignments)
    return {int(sid): s for sid, s in zip(assignments.sample_ids, sets)}


# --- persistence -----------------------------------------------------------------


def write_book(book: PrototypeBook, path) -> None:
    meta = {
        "k": int(book.k),
        "r": int(book.pca.reduced_dim),
        "seed": int(book.seed),
        "variance_target": float(book.variance_target),
        "inertia": float(book.inertia),
        "ratios": [float(v) for v in book.pca.ratios],
    }
    tensors = {"mean": book.pca.mean, "basis": book.pca.basis, "centroids": book.centroids}
    artifact_store.write_container(path, kind="prototype-book", meta=meta,
                                   tensors=tensors, dtype="f64")


def read_book(path) -> PrototypeBook:
    meta, reader = artifact_store.read_container(path, expect_kind="prototype-book")
    pca = PcaModel(
        mean=reader.tensor("mean"),
        basis=reader.tensor("basis"),
        ratios=np.asarray(meta["ratios"], dtype=np.float64),
    )
    return PrototypeBook(
        centroids=reader.tensor("centroids"),
        k=int(meta["k"]),
        pca=pca,
        inertia=float(meta["inertia"]),
        seed=int(meta["seed"]),
        variance_target=float(meta["variance_target"]),
    )
