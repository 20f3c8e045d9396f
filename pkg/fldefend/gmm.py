"""
Two-component diagonal Gaussian mixture fit by EM.

Used to soft-cluster per-client detection features. Feature widths can be
in the hundreds with only a few dozen points, so covariances are diagonal
with a variance floor.
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.special import logsumexp

from fldefend.errors import ConfigurationError, UninformativeClusteringError

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
NUM_COMPONENTS = 2


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    n_iter: int = 0
    log_likelihood: float = float("nan")
    log_likelihood_trace: Tuple[float, ...] = field(default_factory=tuple)
    converged: bool = False
    degenerate: bool = False


def _log_joint(points: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """log pi_c + log N(x | mu_c, diag var_c) for every point and component, shape (M, 2)."""
    out = np.empty((points.shape[0], NUM_COMPONENTS))
    for c in range(NUM_COMPONENTS):
        diff = points - means[c]
        out[:, c] = (
            np.log(weights[c])
            - 0.5 * np.sum(np.log(2.0 * np.pi * variances[c]))
            - 0.5 * np.sum(diff * diff / variances[c], axis=1)
        )
    return out


def log_likelihood(model: GmmModel, points: np.ndarray) -> float:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return float(logsumexp(_log_joint(points, model.weights, model.means, model.variances), axis=1).sum())


def _most_distant_pair(points: np.ndarray, seed: int) -> Tuple[int, int, float]:
    sq_norms = np.einsum("ij,ij->i", points, points)
    rows, cols = np.triu_indices(points.shape[0], k=1)
    approx = (sq_norms[:, None] + sq_norms[None, :] - 2.0 * (points @ points.T))[rows, cols]
    # the Gram form loses precision, so the leading pairs are re-measured exactly
    slack = 1e-9 * max(float(sq_norms.max()), 1e-300)
    leaders = np.flatnonzero(approx >= approx.max() - slack)
    rows, cols = rows[leaders], cols[leaders]
    diff = points[rows] - points[cols]
    exact = np.einsum("ij,ij->i", diff, diff)
    best = exact.max()
    hits = np.flatnonzero(exact == best)
    rows, cols = rows[hits], cols[hits]
    pick = 0
    if rows.shape[0] > 1:
        pick = int(np.random.default_rng(seed).integers(rows.shape[0]))
    return int(rows[pick]), int(cols[pick]), float(best)


def fit(
    points: np.ndarray,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-8,
    var_floor: float = VARIANCE_FLOOR,
) -> GmmModel:
    """Fit two diagonal Gaussians by EM.

    The two most distant points seed the means (the seed only breaks exact
    ties between equally distant pairs). Stops when the log-likelihood gain
    drops below tol or after max_iter iterations. Identical points give a
    degenerate model.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.ndim != 2 or points.shape[0] < 2 or points.shape[1] < 1:
        raise ConfigurationError(f"GMM needs at least 2 points of dimension >= 1, got shape {points.shape}")
    num_points = points.shape[0]

    first, second, max_dist = _most_distant_pair(points, seed)
    if max_dist == 0.0:
        logger.warning("GMM input has %d identical points, clustering is uninformative", num_points)
        means = np.vstack([points[0], points[0]])
        variances = np.full_like(means, var_floor)
        weights = np.full(NUM_COMPONENTS, 0.5)
        ll = float(logsumexp(_log_joint(points, weights, means, variances), axis=1).sum())
        return GmmModel(weights, means, variances, 0, ll, (ll,), True, True)

    means = np.vstack([points[first], points[second]])
    variances = np.maximum(np.tile(points.var(axis=0), (NUM_COMPONENTS, 1)), var_floor)
    weights = np.full(NUM_COMPONENTS, 0.5)

    log_joint = _log_joint(points, weights, means, variances)
    ll = float(logsumexp(log_joint, axis=1).sum())
    trace = [ll]
    converged = False
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        # E-step
        log_norm = logsumexp(log_joint, axis=1, keepdims=True)
        resp = np.exp(log_joint - log_norm)

        # M-step
        counts = resp.sum(axis=0)
        new_means = means.copy()
        new_vars = variances.copy()
        for c in range(NUM_COMPONENTS):
            if counts[c] <= 1e-12 * num_points:
                continue
            new_means[c] = resp[:, c] @ points / counts[c]
            diff = points - new_means[c]
            new_vars[c] = np.maximum(resp[:, c] @ (diff * diff) / counts[c], var_floor)
        new_weights = np.clip(counts / num_points, 1e-12, None)
        new_weights = new_weights / new_weights.sum()

        new_joint = _log_joint(points, new_weights, new_means, new_vars)
        new_ll = float(logsumexp(new_joint, axis=1).sum())
        if new_ll < ll - 1e-9 * max(1.0, abs(ll)):
            # EM never decreases the likelihood; anything else is numerical trouble.
            logger.warning("GMM log-likelihood decreased (%.6g -> %.6g), stopping", ll, new_ll)
            n_iter -= 1
            converged = True
            break

        gain = new_ll - ll
        weights, means, variances, log_joint, ll = new_weights, new_means, new_vars, new_joint, new_ll
        trace.append(ll)
        if gain < tol:
            converged = True
            break

    logger.debug("GMM fit: %d iterations, log-likelihood %.6f, weights %s", n_iter, ll, np.round(weights, 4))
    return GmmModel(weights, means, variances, n_iter, ll, tuple(trace), converged, False)


def assign(model: GmmModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Hard labels (argmax posterior) and the (M, 2) responsibilities."""
    if model.degenerate:
        raise UninformativeClusteringError("cannot assign points with a degenerate GMM")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    log_joint = _log_joint(points, model.weights, model.means, model.variances)
    resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
    return np.argmax(resp, axis=1), resp


def cluster_spreads(model: GmmModel, points: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean distance of each component's members to its mean, and member counts."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    labels = np.asarray(labels)
    spreads = np.empty(NUM_COMPONENTS)
    sizes = np.empty(NUM_COMPONENTS, dtype=np.int64)
    for c in range(NUM_COMPONENTS):
        members = points[labels == c]
        if members.shape[0] == 0:
            raise UninformativeClusteringError(f"GMM component {c} has no members")
        spreads[c] = np.mean(np.linalg.norm(members - model.means[c], axis=1))
        sizes[c] = members.shape[0]
    return spreads, sizes


def denser_cluster(model: GmmModel, points: np.ndarray, labels: np.ndarray) -> int:
    """Component whose members sit closest, on average, to their component mean.

    Ties go to the smaller cluster, then to component 0.
    """
    spreads, sizes = cluster_spreads(model, points, labels)

    if not np.isclose(spreads[0], spreads[1], rtol=1e-9, atol=1e-12):
        return 0 if spreads[0] < spreads[1] else 1
    if sizes[0] != sizes[1]:
        return 0 if sizes[0] < sizes[1] else 1
    return 0
