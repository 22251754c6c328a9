"""Per-checkpoint responsibility analysis.

For every consecutive checkpoint pair: prototype intensities from saliency
(masked means over the fixed final-model assignments), intensity and
confidence deltas, HDBSCAN grouping of confidence deltas, cluster-level
aggregates, and the ridge closed form mapping intensity change to
confidence change (a K x M matrix per transition).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import artifact_store, density, numerics, prototypes
from .errors import (
    InsufficientCheckpointsError,
    LengthMismatchError,
    NoClustersError,
    NotPositiveDefiniteError,
    SingularError,
)


@dataclass
class IntensityVector:
    """Mean saliency per prototype for one sample at one checkpoint.

    values[k-1] is the mean saliency over locations assigned to prototype k;
    prototypes with no assigned locations are in ``absent`` with value 0.
    """

    values: np.ndarray  # (K,)
    absent: frozenset


def prototype_intensity(saliency, assignment, k: int) -> IntensityVector:
    """Masked mean of the (flattened) saliency map over each prototype's
    locations: values in [0, 1] because saliency is."""
    sal = np.asarray(saliency, dtype=np.float64).ravel()
    a = np.asarray(assignment, dtype=np.int64).ravel()
    if sal.shape[0] != a.shape[0]:
        raise LengthMismatchError(f"saliency length {sal.shape[0]} != assignment {a.shape[0]}")
    counts = np.bincount(a - 1, minlength=k).astype(np.float64)
    sums = np.bincount(a - 1, weights=sal, minlength=k)
    values = np.divide(sums, counts, out=np.zeros(k), where=counts > 0)
    absent = frozenset(int(i) + 1 for i in np.where(counts == 0)[0])
    return IntensityVector(values=values, absent=absent)


def intensity_matrix(saliency_batch, assignments: prototypes.AssignmentMap) -> np.ndarray:
    """(N, K) intensity rows for a whole checkpoint, vectorized.

    Row i equals prototype_intensity(saliency_batch[i], labels[i]).values.
    """
    n, hw = assignments.labels.shape
    k = assignments.k
    sal = np.asarray(saliency_batch, dtype=np.float64).reshape(n, hw)
    flat_labels = (assignments.labels.astype(np.int64) - 1) + k * np.arange(n)[:, None]
    counts = np.bincount(flat_labels.ravel(), minlength=n * k).reshape(n, k).astype(np.float64)
    sums = np.bincount(flat_labels.ravel(), weights=sal.ravel(), minlength=n * k).reshape(n, k)
    return np.divide(sums, counts, out=np.zeros((n, k)), where=counts > 0)


@dataclass
class TransitionDeltas:
    """Per-sample changes between consecutive checkpoints t -> t+1.

    delta_intensity is (N, K), delta_confidence is (N, M); row i belongs to
    the i-th archived sample.
    """

    checkpoint_from: int
    checkpoint_to: int
    delta_intensity: np.ndarray
    delta_confidence: np.ndarray


def deltas(archive, intensities) -> list:
    """One TransitionDeltas per consecutive checkpoint pair.

    ``intensities`` is a list of (N, K) matrices aligned with
    archive.checkpoints.
    """
    its = list(archive.checkpoints)
    if len(its) < 2:
        raise InsufficientCheckpointsError(f"{len(its)} checkpoints < 2")
    if len(intensities) != len(its):
        raise LengthMismatchError("one intensity matrix per checkpoint required")
    out = []
    for i in range(len(its) - 1):
        conf_a = np.asarray(archive.confidences[i], dtype=np.float64)
        conf_b = np.asarray(archive.confidences[i + 1], dtype=np.float64)
        out.append(TransitionDeltas(
            checkpoint_from=its[i],
            checkpoint_to=its[i + 1],
            delta_intensity=np.asarray(intensities[i + 1]) - np.asarray(intensities[i]),
            delta_confidence=conf_b - conf_a,
        ))
    return out


@dataclass
class ClusterAggregates:
    """Cluster-level mean confidence change C (Q, M) and thresholded mean
    intensity change pi (Q, K); rows ordered by cluster id 1..Q."""

    c_matrix: np.ndarray
    pi_matrix: np.ndarray
    sizes: np.ndarray  # (Q,)
    noise_count: int


def cluster_aggregates(delta: TransitionDeltas, labels: density.ClusterLabels,
                       sigma: float) -> ClusterAggregates:
    """Per-cluster means; noise (-1) excluded; intensity deltas pass through
    ReLU(dP - sigma) before averaging."""
    if not (0.0 <= sigma <= 1.0):
        raise LengthMismatchError(f"sigma {sigma} outside [0, 1]")
    if labels.q == 0:
        raise NoClustersError("all samples are noise at this transition")
    lab = labels.labels
    if lab.shape[0] != delta.delta_confidence.shape[0]:
        raise LengthMismatchError("labels/deltas row count mismatch")
    relu_dp = np.maximum(delta.delta_intensity - sigma, 0.0)
    c_rows, pi_rows, sizes = [], [], []
    for q in range(1, labels.q + 1):
        members = lab == q
        sizes.append(int(members.sum()))
        c_rows.append(delta.delta_confidence[members].mean(axis=0))
        pi_rows.append(relu_dp[members].mean(axis=0))
    return ClusterAggregates(
        c_matrix=np.asarray(c_rows),
        pi_matrix=np.asarray(pi_rows),
        sizes=np.asarray(sizes, dtype=np.int64),
        noise_count=int((lab == -1).sum()),
    )


def fit_responsibility(aggregates: ClusterAggregates, lam: float) -> np.ndarray:
    """Ridge closed form: beta = (pi^T pi + lam I)^-1 pi^T C, shape (K, M)."""
    if lam < 0.0:
        raise SingularError(f"lambda {lam} must be >= 0")
    pi = np.asarray(aggregates.pi_matrix, dtype=np.float64)
    c = np.asarray(aggregates.c_matrix, dtype=np.float64)
    gram = pi.T @ pi + lam * np.eye(pi.shape[1])
    try:
        return numerics.solve_spd(gram, pi.T @ c)
    except NotPositiveDefiniteError as exc:
        raise SingularError(
            "pi^T pi singular at lambda=0; use lambda > 0"
        ) from exc


@dataclass
class TransitionAnalysis:
    """Everything derived for one checkpoint pair."""

    checkpoint_from: int
    checkpoint_to: int
    beta: np.ndarray  # (K, M)
    c_matrix: np.ndarray  # (Q, M)
    pi_matrix: np.ndarray  # (Q, K)
    cluster_sizes: np.ndarray
    noise_count: int
    q: int
    flagged_no_clusters: bool = False


@dataclass
class ResponsibilityTrajectory:
    transitions: list
    checkpoints: list
    k: int
    class_count: int
    sigma: float
    lam: float
    hdbscan_min_samples: int
    hdbscan_min_cluster_size: int | None


def analyze_run(archive, book: prototypes.PrototypeBook, sigma: float = 0.05,
                lam: float = 1.0,
                hdbscan_params: density.HdbscanParams | None = None,
                assignments: prototypes.AssignmentMap | None = None) -> ResponsibilityTrajectory:
    """Full per-transition analysis for a stored run.

    Transitions where HDBSCAN finds only noise are recorded with beta = 0 and
    flagged rather than errored (training plateaus are expected).
    """
    params = hdbscan_params or density.HdbscanParams()
    if assignments is None:
        assignments = prototypes.assign(archive, book)
    intensities = [intensity_matrix(sal, assignments) for sal in archive.saliency]
    records = deltas(archive, intensities)
    m = archive.class_count
    transitions = []
    for rec in records:
        labels = density.hdbscan(rec.delta_confidence, params)
        if labels.q == 0:
            transitions.append(TransitionAnalysis(
                checkpoint_from=rec.checkpoint_from,
                checkpoint_to=rec.checkpoint_to,
                beta=np.zeros((book.k, m)),
                c_matrix=np.zeros((0, m)),
                pi_matrix=np.zeros((0, book.k)),
                cluster_sizes=np.zeros(0, dtype=np.int64),
                noise_count=int(labels.labels.shape[0]),
                q=0,
                flagged_no_clusters=True,
            ))
            continue
        agg = cluster_aggregates(rec, labels, sigma)
        beta = fit_responsibility(agg, lam)
        transitions.append(TransitionAnalysis(
            checkpoint_from=rec.checkpoint_from,
            checkpoint_to=rec.checkpoint_to,
            beta=beta,
            c_matrix=agg.c_matrix,
            pi_matrix=agg.pi_matrix,
            cluster_sizes=agg.sizes,
            noise_count=agg.noise_count,
            q=agg.c_matrix.shape[0],
            flagged_no_clusters=False,
        ))
    return ResponsibilityTrajectory(
        transitions=transitions,
        checkpoints=list(archive.checkpoints),
        k=book.k,
        class_count=m,
        sigma=sigma,
        lam=lam,
        hdbscan_min_samples=params.min_samples,
        hdbscan_min_cluster_size=params.min_cluster_size,
    )


# --- persistence -------------------------------------------------------------------


def write_trajectory(traj: ResponsibilityTrajectory, path) -> None:
    meta = {
        "checkpoints": [int(t) for t in traj.checkpoints],
        "k": int(traj.k),
        "class_count": int(traj.class_count),
        "sigma": float(traj.sigma),
        "lambda": float(traj.lam),
        "hdbscan_min_samples": int(traj.hdbscan_min_samples),
        "hdbscan_min_cluster_size": traj.hdbscan_min_cluster_size,
        "transitions": [
            {
                "from": int(t.checkpoint_from),
                "to": int(t.checkpoint_to),
                "q": int(t.q),
                "noise_count": int(t.noise_count),
                "sizes": [int(s) for s in t.cluster_sizes],
                "flagged_no_clusters": bool(t.flagged_no_clusters),
            }
            for t in traj.transitions
        ],
    }
    tensors = {}
    for i, t in enumerate(traj.transitions):
        tensors[f"beta/{i}"] = t.beta
        tensors[f"c/{i}"] = t.c_matrix
        tensors[f"pi/{i}"] = t.pi_matrix
    artifact_store.write_container(path, kind="trajectory", meta=meta, tensors=tensors,
                                   dtype="f64")


def read_trajectory(path) -> ResponsibilityTrajectory:
    meta, reader = artifact_store.read_container(path, expect_kind="trajectory")
    transitions = []
    for i, rec in enumerate(meta["transitions"]):
        transitions.append(TransitionAnalysis(
            checkpoint_from=int(rec["from"]),
            checkpoint_to=int(rec["to"]),
            beta=reader.tensor(f"beta/{i}"),
            c_matrix=reader.tensor(f"c/{i}"),
            pi_matrix=reader.tensor(f"pi/{i}"),
            cluster_sizes=np.asarray(rec["sizes"], dtype=np.int64),
            noise_count=int(rec["noise_count"]),
            q=int(rec["q"]),
            flagged_no_clusters=bool(rec["flagged_no_clusters"]),
        ))
    return ResponsibilityTrajectory(
        transitions=transitions,
        checkpoints=[int(t) for t in meta["checkpoints"]],
        k=int(meta["k"]),
        class_count=int(meta["class_count"]),
        sigma=float(meta["sigma"]),
        lam=float(meta["lambda"]),
        hdbscan_min_samples=int(meta["hdbscan_min_samples"]),
        hdbscan_min_cluster_size=meta["hdbscan_min_cluster_size"],
    )
