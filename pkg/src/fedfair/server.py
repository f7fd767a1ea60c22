"""Server-side aggregation rules and the per-round risk diagnostics.

Three aggregators: size-weighted averaging (the baseline), adaptive
weighting by inverse distance of each client's update from the shared
principal subspace, and the lightweight rule weighting by (1 - rho).
All reduce to a convex combination of client parameter vectors.
"""

import numpy as np

from fedfair.nn import MLP

PCA_MASS = 0.90
_EIG_FLOOR = 1e-12


def weighted_aggregate(models, weights) -> MLP:
    """Convex combination of model parameters; weights must sum to 1."""
    w = np.asarray(weights, dtype=np.float64)
    if len(models) != w.shape[0]:
        raise ValueError("one weight per model required")
    ref = models[0]
    for m in models[1:]:
        if m.sizes != ref.sizes or m.activation != ref.activation:
            raise ValueError("models disagree in architecture")
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError("weights must be a point on the simplex")
    stacked = np.stack([m.flat for m in models])
    return ref.with_flat(w @ stacked)


def fedavg_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("shard sizes must be positive")
    return sizes / sizes.sum()


def fedavg_aggregate(models, sizes) -> MLP:
    """Average weighted by shard size."""
    if len(models) < 1:
        raise ValueError("need at least one model")
    if len(models) == 1:
        return models[0].copy()
    return weighted_aggregate(models, fedavg_weights(sizes))


def retained_components(eigvals: np.ndarray, K: int, mass: float = PCA_MASS) -> int:
    """Smallest component count holding >= mass of eigenvalue total,
    floored at 1 and capped at K - 2."""
    total = eigvals.sum()
    cap = max(1, K - 2)
    if total <= 0:
        return 1
    cum = np.cumsum(eigvals) / total
    m = int(np.searchsorted(cum, mass - 1e-12) + 1)
    return min(max(1, m), cap)


def pca_distances(updates) -> np.ndarray:
    """Distance of each client's update from the shared principal subspace.

    Updates are mean-centered and decomposed in the K x K Gram space
    (K << parameter count, so no full-size SVD is ever formed). The
    retained subspace keeps the leading eigenvalue mass (see
    retained_components); the distance is the Euclidean residual.
    """
    U = np.asarray(updates, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] < 2:
        raise ValueError("need at least 2 update vectors")
    K = U.shape[0]
    C = U - U.mean(axis=0)
    G = C @ C.T
    eigvals, eigvecs = np.linalg.eigh(G)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    m = retained_components(eigvals, K)
    sq_norms = np.einsum("ij,ij->i", C, C)
    sq_resid = sq_norms.copy()
    floor = _EIG_FLOOR * max(eigvals[0], 1.0)
    for j in range(m):
        if eigvals[j] <= floor:
            break  # remaining directions are numerically null
        # principal direction in update space: C^T y_j / sqrt(lambda_j)
        coords = (C @ (C.T @ eigvecs[:, j])) / np.sqrt(eigvals[j])
        sq_resid -= coords**2
    return np.sqrt(np.clip(sq_resid, 0.0, None))


def adaptive_weights(p) -> np.ndarray:
    """Aggregation weights decreasing in the risk proxy p.

    w_k proportional to 1/(p_k + eps) with eps = 1e-8 + 1e-3 * mean(p);
    equal risks give uniform weights.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] < 2:
        raise ValueError("need at least 2 clients")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("risk proxies must be finite and nonnegative")
    eps = 1e-8 + 1e-3 * p.mean()
    inv = 1.0 / (p + eps)
    return inv / inv.sum()


def ala_weights(rho):
    """Lightweight weights (1 - rho_k) / sum_j (1 - rho_j).

    Returns (weights, fallback): when every client is maximally overfit
    the rule degenerates and we fall back to uniform weights, flagged.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho < 0) or np.any(rho > 1):
        raise ValueError("rho values must lie in [0, 1]")
    K = rho.shape[0]
    denom = (1.0 - rho).sum()
    if denom == 0.0:
        return np.full(K, 1.0 / K), True
    return (1.0 - rho) / denom, False


def ala_aggregate(models, rho) -> MLP:
    w, _ = ala_weights(rho)
    return weighted_aggregate(models, w)


def finp_server_objective(p) -> float:
    """Dispersion-plus-level score of the per-client risk proxies.

    ||p - mean(p) * 1||_2 + |mean(p)|. Reported each round for
    diagnostics; the aggregation weights themselves come from
    adaptive_weights, which lowers the influence of high-risk clients
    rather than solving this expression directly.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] < 1:
        raise ValueError("need at least 1 client")
    mean = p.mean()
    return float(np.linalg.norm(p - mean) + abs(mean))
