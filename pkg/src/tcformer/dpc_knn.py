"""Density-peaks clustering with k-nearest-neighbor densities (DPC-KNN).

Every step only needs the pairwise squared distance matrix, so each public
function has a ``*_from_sq`` twin that takes that matrix directly. All
functions accept arbitrary leading batch dimensions: features of shape
``(..., N, D)`` and distance matrices of shape ``(..., N, N)``.

Tie-breaks, chosen so results are fully deterministic:

* neighbors with equal distance are ordered by lower token index;
* token ``j`` counts as denser than ``i`` when ``rho[j] > rho[i]``, or
  ``rho[j] == rho[i]`` and ``j < i``, so exactly one token is the peak;
* equal scores rank the lower token index first;
* a token equidistant from several centers joins the lowest-ranked one.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

DEFAULT_K = 5


@dataclass(frozen=True)
class ClusterResult:
    density: np.ndarray
    indicator: np.ndarray
    score: np.ndarray
    centers: np.ndarray
    assignment: np.ndarray
    parent: np.ndarray

    @property
    def num_clusters(self):
        return self.centers.shape[-1]


def _check_features(features):
    x = np.asarray(features)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.ndim < 2:
        raise InvalidInput(f"features must be (..., N, D), got shape {x.shape}")
    if x.shape[-2] < 2:
        raise InvalidInput(f"need at least 2 tokens, got {x.shape[-2]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("features contain non-finite values")
    return x


def _check_sq(sq):
    sq = np.asarray(sq)
    if sq.ndim < 2 or sq.shape[-1] != sq.shape[-2]:
        raise InvalidInput(f"distance matrix must be (..., N, N), got {sq.shape}")
    if sq.shape[-1] < 2:
        raise InvalidInput(f"need at least 2 tokens, got {sq.shape[-1]}")
    return sq


def pairwise_sq_distances(features):
    """Squared Euclidean distances, accumulated one feature dimension at a time.

    The fixed accumulation order makes the result independent of BLAS and
    vector width, which is what lets an elementwise reference reproduce it
    bit for bit.
    """
    x = _check_features(features)
    acc = np.zeros(x.shape[:-1] + (x.shape[-2],), dtype=x.dtype)
    for d in range(x.shape[-1]):
        col = x[..., d]
        diff = col[..., :, None] - col[..., None, :]
        acc += diff * diff
    return acc


def knn_from_sq(sq, k):
    sq = _check_sq(sq)
    if k < 1:
        raise InvalidInput(f"k must be positive, got {k}")
    n = sq.shape[-1]
    k = min(k, n - 1)
    masked = sq.copy()
    diag = np.arange(n)
    masked[..., diag, diag] = np.inf
    # stable sort keeps equal distances in index order
    order = np.argsort(masked, axis=-1, kind="stable")[..., :k]
    return np.take_along_axis(masked, order, axis=-1), order


def knn_sq_distances(features, k):
    """k smallest squared distances to *other* tokens, ascending, plus indices."""
    return knn_from_sq(pairwise_sq_distances(features), k)


def density_from_sq(sq, k):
    sq = _check_sq(sq)
    if k < 1:
        raise InvalidInput(f"k must be positive, got {k}")
    n = sq.shape[-1]
    k = min(k, n - 1)
    masked = sq.copy()
    diag = np.arange(n)
    masked[..., diag, diag] = np.inf
    # only the k smallest values matter, not which neighbors they belong to
    dists = np.sort(np.partition(masked, k - 1, axis=-1)[..., :k], axis=-1)
    total = dists[..., 0]
    for j in range(1, dists.shape[-1]):
        total = total + dists[..., j]
    return np.exp(-(total / dists.shape[-1]))


def local_density(features, k=DEFAULT_K):
    return density_from_sq(pairwise_sq_distances(features), k)


def indicator_from_sq(sq, density):
    sq = _check_sq(sq)
    density = np.asarray(density)
    n = sq.shape[-1]
    if density.shape != sq.shape[:-1]:
        raise InvalidInput(f"density shape {density.shape} does not match {n} tokens")
    dist = np.sqrt(sq)
    rho_i = density[..., :, None]
    rho_j = density[..., None, :]
    idx = np.arange(n)
    earlier = idx[None, :] < idx[:, None]
    higher = (rho_j > rho_i) | ((rho_j == rho_i) & earlier)
    masked = np.where(higher, dist, np.inf)
    parent = np.argmin(masked, axis=-1)
    indicator = np.take_along_axis(masked, parent[..., None], axis=-1)[..., 0]
    peak = ~higher.any(axis=-1)
    indicator = np.where(peak, dist.max(axis=-1), indicator)
    parent = np.where(peak, -1, parent)
    return indicator, parent


def distance_indicator(features, density):
    """Distance to the nearest denser token; the density peak gets its farthest distance.

    Returns ``(indicator, parent)`` where ``parent`` is the nearest denser token,
    or -1 for the peak.
    """
    return indicator_from_sq(pairwise_sq_distances(features), density)


def select_centers(density, indicator, num_centers):
    score = np.asarray(density) * np.asarray(indicator)
    n = score.shape[-1]
    if not 1 <= num_centers <= n:
        raise InvalidInput(f"number of centers must be in [1, {n}], got {num_centers}")
    order = np.argsort(-score, axis=-1, kind="stable")
    return order[..., :num_centers]


def assign_from_sq(sq, centers):
    sq = _check_sq(sq)
    centers = np.asarray(centers)
    if centers.shape[-1] == 0:
        raise InvalidInput("at least one center is required")
    n = sq.shape[-1]
    if centers.min() < 0 or centers.max() >= n:
        raise InvalidInput("center index out of range")
    cols = np.broadcast_to(centers[..., None, :], sq.shape[:-1] + centers.shape[-1:])
    dist = np.sqrt(np.take_along_axis(sq, cols, axis=-1))
    assignment = np.argmin(dist, axis=-1)
    ranks = np.broadcast_to(np.arange(centers.shape[-1]), centers.shape)
    np.put_along_axis(assignment, centers, ranks, axis=-1)
    return assignment


def assign_clusters(features, centers):
    """Index (center rank) of the nearest center for every token."""
    return assign_from_sq(pairwise_sq_distances(features), centers)


def cluster_from_sq(sq, num_centers, k=DEFAULT_K):
    sq = _check_sq(sq)
    density = density_from_sq(sq, k)
    indicator, parent = indicator_from_sq(sq, density)
    centers = select_centers(density, indicator, num_centers)
    assignment = assign_from_sq(sq, centers)
    return ClusterResult(
        density=density,
        indicator=indicator,
        score=density * indicator,
        centers=centers,
        assignment=assignment,
        parent=parent,
    )


def cluster(features, num_centers, k=DEFAULT_K):
    """Run the full DPC-KNN pipeline on ``(..., N, D)`` features."""
    return cluster_from_sq(pairwise_sq_distances(features), num_centers, k)
