"""Shared test oracles.

Everything here is deliberately independent of the code paths it checks:
gradients by central differences of the loss alone, Jacobians assembled
column by column, Hessians densified from basis-vector products, PCA
residuals from a full-size SVD.
"""

import numpy as np

from fedfair import nn


class QuadraticSurrogate:
    """Loss 0.5 * theta^T A theta: grad = A theta, Hessian = A."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=np.float64)

    def grad(self, theta):
        return self.A @ theta

    def hvp(self, v):
        # exercised through the same finite-difference path the models use
        return nn.fd_hvp(self.grad, np.zeros(self.A.shape[0]), v, eps=1e-4)


def random_model(rng, max_params=50, activation="relu"):
    """A small random net with at most max_params parameters."""
    while True:
        depth = int(rng.integers(1, 3))
        sizes = [int(rng.integers(2, 5))]
        for _ in range(depth - 1):
            sizes.append(int(rng.integers(2, 5)))
        sizes.append(int(rng.integers(2, 4)))
        model = nn.MLP.init(sizes, activation, rng)
        if model.num_params <= max_params:
            return model


def random_batch(rng, model, n=8):
    X = rng.normal(size=(n, model.dim_in))
    y = rng.integers(0, model.n_classes, size=n)
    return nn.Batch(X, y)


def fd_grad(model, batch, eps=1e-4):
    """Central-difference gradient using only forward + loss_ce."""
    theta = model.flat.copy()
    g = np.empty_like(theta)
    for i in range(theta.shape[0]):
        shifted = theta.copy()
        shifted[i] = theta[i] + eps
        up = nn.loss_ce(nn.forward(model.with_flat(shifted), batch), batch.labels)
        shifted[i] = theta[i] - eps
        down = nn.loss_ce(nn.forward(model.with_flat(shifted), batch), batch.labels)
        g[i] = (up - down) / (2 * eps)
    return g


def dense_hessian(model, batch):
    """Hessian densified from hvp over basis vectors, symmetrized."""
    d = model.num_params
    H = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        H[:, i] = nn.hvp(model, batch, e)
    return (H + H.T) / 2.0


def explicit_input_jacobian(model, x, eps=1e-6):
    """Jacobian of logits w.r.t. one input row, column by column."""
    x = np.asarray(x, dtype=np.float64)
    base = nn.forward(model, nn.Batch(x[None, :], np.zeros(1, np.int64)))[0]
    J = np.empty((base.shape[0], x.shape[0]))
    for j in range(x.shape[0]):
        shifted = x.copy()
        shifted[j] += eps
        up = nn.forward(model, nn.Batch(shifted[None, :], np.zeros(1, np.int64)))[0]
        J[:, j] = (up - base) / eps
    return J


def svd_subspace_distances(updates, mass=0.90):
    """PCA residual distances by full-size SVD (the brute-force oracle)."""
    U = np.asarray(updates, dtype=np.float64)
    K = U.shape[0]
    C = U - U.mean(axis=0)
    _, s, vt = np.linalg.svd(C, full_matrices=False)
    eigvals = s**2
    total = eigvals.sum()
    cap = max(1, K - 2)
    if total <= 0:
        m = 1
    else:
        cum = np.cumsum(eigvals) / total
        m = min(max(1, int(np.searchsorted(cum, mass - 1e-12) + 1)), cap)
    basis = vt[:m]
    proj = C @ basis.T
    sq = np.einsum("ij,ij->i", C, C) - np.einsum("ij,ij->i", proj, proj)
    return np.sqrt(np.clip(sq, 0.0, None))
