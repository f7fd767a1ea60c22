"""Loss-landscape curvature estimates and relative overfitting ranks.

Per client we estimate the top Hessian eigenvalue (power iteration on
Hessian-vector products) and the Hessian trace (Hutchinson sign-probe
estimator), then rank clients by how far each one's curvature sits from
everyone else's. The rank rho in [0, 1] feeds both the client-side
regularizer strength and the lightweight aggregation weights.
"""

from dataclasses import dataclass

import numpy as np

from fedfair import nn
from fedfair.errors import NonFiniteError

POWER_ITERS = 20
POWER_TOL = 1e-4
TRACE_PROBES = 100
SUBSAMPLE = 256


def power_iteration_eigenvalue(hvp_fn, dim: int, iters: int = POWER_ITERS,
                               tol: float = POWER_TOL, rng=None) -> float:
    """Largest-magnitude eigenvalue of the operator behind hvp_fn.

    Returns the signed Rayleigh quotient at termination; stops early when
    successive estimates differ by less than tol.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    v = rng.standard_normal(dim)
    redraws = 0
    while np.linalg.norm(v) == 0.0:
        redraws += 1
        if redraws > 3:
            raise NonFiniteError("power iteration start vector stayed all-zero after 3 redraws")
        v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for step in range(iters):
        w = hvp_fn(v)
        current = float(v @ w)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return current  # v is (numerically) in the null space
        if step > 0 and abs(current - estimate) < tol:
            return current
        estimate = current
        v = w / norm
    return estimate


def top_eigenvalue(model: nn.MLP, data: nn.Batch, iters: int = POWER_ITERS,
                   tol: float = POWER_TOL, rng=None) -> float:
    if len(data) < 1:
        raise ValueError("data must be nonempty")
    return power_iteration_eigenvalue(
        lambda v: nn.hvp(model, data, v), model.num_params, iters, tol, rng
    )


def hutchinson_trace(hvp_fn, dim: int, probes: int = TRACE_PROBES, rng=None) -> float:
    """Unbiased trace estimate: mean of z^T H z over +-1 sign probes."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    total = 0.0
    for _ in range(probes):
        z = rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0
        total += float(z @ hvp_fn(z))
    return total / probes


def hessian_trace(model: nn.MLP, data: nn.Batch, probes: int = TRACE_PROBES, rng=None) -> float:
    return hutchinson_trace(lambda v: nn.hvp(model, data, v), model.num_params, probes, rng)


def _mean_abs_pairwise_gap(values: np.ndarray) -> np.ndarray:
    K = values.shape[0]
    return np.abs(values[:, None] - values[None, :]).sum(axis=1) / (K - 1)


def overfitting_ranks(lambdas, traces) -> np.ndarray:
    """Relative overfitting rank per client, in [0, 1].

    Each client's mean absolute gap to the others is computed for the top
    eigenvalue and the trace; each family is normalized by its maximum
    (a family with zero maximum contributes 0) and the two are averaged.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    tr = np.asarray(traces, dtype=np.float64)
    if lam.ndim != 1 or lam.shape != tr.shape:
        raise ValueError("lambdas and traces must be 1-D and the same length")
    if lam.shape[0] < 2:
        raise ValueError("need at least 2 clients")
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(tr))):
        raise NonFiniteError("curvature inputs contain NaN/Inf")
    delta_bar = _mean_abs_pairwise_gap(lam)
    h_bar = _mean_abs_pairwise_gap(tr)
    d_max = delta_bar.max()
    h_max = h_bar.max()
    term_d = delta_bar / d_max if d_max > 0 else np.zeros_like(delta_bar)
    term_h = h_bar / h_max if h_max > 0 else np.zeros_like(h_bar)
    return (term_d + term_h) / 2.0


@dataclass
class CurvatureReport:
    """Per-client curvature estimates and derived ranks (arrays of length K)."""

    lambda_max: np.ndarray
    trace: np.ndarray
    delta_bar: np.ndarray
    h_bar: np.ndarray
    rho: np.ndarray

    @classmethod
    def from_estimates(cls, lambdas, traces) -> "CurvatureReport":
        lam = np.asarray(lambdas, dtype=np.float64)
        tr = np.asarray(traces, dtype=np.float64)
        rho = overfitting_ranks(lam, tr)
        return cls(
            lambda_max=lam,
            trace=tr,
            delta_bar=_mean_abs_pairwise_gap(lam),
            h_bar=_mean_abs_pairwise_gap(tr),
            rho=rho,
        )


def curvature_subsample(data: nn.Batch, rng, limit: int = SUBSAMPLE) -> nn.Batch:
    """Fixed-size subsample of a shard used for curvature estimation."""
    n = len(data)
    if n <= limit:
        return data
    idx = rng.choice(n, size=limit, replace=False)
    return nn.Batch(data.inputs[idx], data.labels[idx])


def estimate_client_curvature(model: nn.MLP, data: nn.Batch, rng,
                              iters: int = POWER_ITERS, tol: float = POWER_TOL,
                              probes: int = TRACE_PROBES,
                              subsample: int = SUBSAMPLE):
    """(lambda_max, trace) for one client's model on its own shard."""
    sample = curvature_subsample(data, rng, subsample)
    lam = top_eigenvalue(model, sample, iters, tol, rng)
    tr = hessian_trace(model, sample, probes, rng)
    return lam, tr
