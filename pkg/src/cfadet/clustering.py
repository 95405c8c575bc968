# Serving-cluster selection: each device gets the T access points with the
# strongest large-scale fading, as computed at the CPU before detection.

from __future__ import annotations

import numpy as np


def select_clusters(beta_lin: np.ndarray, cluster_size: int) -> np.ndarray:
    """Rows of AP indices, one per device, sorted by descending beta.

    beta_lin is the (M, K) linear gain matrix actually available at the CPU
    (true, perturbed or quantized -- impairments propagate through here).
    Ties break toward the lower AP index so the assignment is deterministic.
    Returns an (K, T) int array.
    """
    beta_lin = np.asarray(beta_lin)
    M = beta_lin.shape[0]
    if cluster_size > M:
        raise ValueError(f"cluster_size {cluster_size} exceeds number of APs {M}")
    if not np.all(np.isfinite(beta_lin)) or np.any(beta_lin <= 0):
        raise ValueError("beta matrix must be positive and finite")
    # stable sort on -beta keeps equal entries in index order
    order = np.argsort(-beta_lin, axis=0, kind="stable")
    return order[:cluster_size].T.copy()


def gather_cluster_signals(y: np.ndarray, clusters: np.ndarray, k: int) -> np.ndarray:
    """The (T, N, L) stack of received blocks at device k's cluster APs.

    Block order follows the cluster row (descending beta).
    """
    clusters = np.asarray(clusters)
    if not 0 <= k < clusters.shape[0]:
        raise IndexError(f"device index {k} out of range [0, {clusters.shape[0]})")
    return y[clusters[k]]
