"""Client-side local training.

The local objective is the plain cross-entropy loss plus
beta * rho * |J|, where |J| is the input-Jacobian spectral norm of the
local model and rho is the overfitting rank the server fed back after
the previous round. rho gates the penalty: the least-overfit client
trains on the unmodified loss, the most-overfit one gets the full
regularizer. With beta = 0 the pipeline is the plain baseline client,
byte for byte.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedfair import nn
from fedfair.errors import NonFiniteError

DIVERGENCE_FACTOR = 10.0
# Reference losses below this floor would make the 10x rule fire on noise.
DIVERGENCE_FLOOR = 0.01
PENALTY_EVAL_LIMIT = 256


@dataclass
class ClientConfig:
    beta: float = 0.0
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.001
    power_iters: int = 5
    optimizer: str = "adam"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1 or self.power_iters < 1:
            raise ValueError("local_epochs, batch_size, power_iters must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")  # lr == 0 freezes the model
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam|sgd")


@dataclass
class TrainStats:
    epoch_losses: list = field(default_factory=list)
    epoch_penalties: list = field(default_factory=list)
    final_penalty: Optional[float] = None  # last in-training penalty, None if gated off
    jacobian_norm: float = 0.0  # measured after training regardless of beta
    train_accuracy: float = 0.0
    diverged: bool = False


@dataclass
class ClientState:
    id: int
    shard: nn.Batch
    model: nn.MLP
    rho: float = 0.0
    stats: Optional[TrainStats] = None

    def __post_init__(self):
        if len(self.shard) < 1:
            raise ValueError("shard must be nonempty")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


def regularized_loss(model: nn.MLP, batch: nn.Batch, rho: float, beta: float,
                     power_iters: int, rng=None):
    """(total, base, penalty): total = base + beta * rho * penalty."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    base = nn.loss_ce(nn.forward(model, batch), batch.labels)
    penalty = nn.jacobian_input_spectral_norm(model, batch, power_iters, rng)
    return base + beta * rho * penalty, base, penalty


def _minibatches(shard: nn.Batch, batch_size: int, perm: np.ndarray):
    for start in range(0, perm.shape[0], batch_size):
        idx = perm[start : start + batch_size]
        yield nn.Batch(shard.inputs[idx], shard.labels[idx])


def local_train(state: ClientState, cfg: ClientConfig, shuffle_rng, penalty_rng) -> TrainStats:
    """Run cfg.local_epochs of minibatch optimization on the regularized loss.

    The penalty gradient uses the frozen power-iteration vectors (see
    nn.jacobian_penalty_value_and_grad). Divergence - a non-finite epoch
    loss, an epoch loss above DIVERGENCE_FACTOR times the received
    model's pre-training loss, or a step that breaks parameter
    finiteness - halts training, restores the round-start parameters if
    they were corrupted, and flags the round; the caller keeps going.
    """
    stats = TrainStats()
    model = state.model
    snapshot = model.flat.copy()
    opt = nn.AdamState.zeros(model.num_params)
    active = cfg.beta > 0.0 and state.rho > 0.0
    initial_loss = nn.loss_ce(nn.forward(model, state.shard), state.shard.labels)
    blowup = DIVERGENCE_FACTOR * max(initial_loss, DIVERGENCE_FLOOR)
    halted = False
    for _ in range(cfg.local_epochs):
        perm = shuffle_rng.permutation(len(state.shard))
        losses = []
        penalties = []
        try:
            for mb in _minibatches(state.shard, cfg.batch_size, perm):
                loss, g = nn.loss_and_grad(model, mb)
                losses.append(loss)
                if active:
                    _, vecs = nn.jacobian_input_spectral_norm(
                        model, mb, cfg.power_iters, penalty_rng, return_vectors=True
                    )
                    pval, pgrad = nn.jacobian_penalty_value_and_grad(model, mb.inputs, vecs)
                    penalties.append(pval)
                    g = g + (cfg.beta * state.rho) * pgrad
                if cfg.lr > 0:
                    if cfg.optimizer == "adam":
                        nn.adam_step(model, g, opt, cfg.lr)
                    else:
                        nn.sgd_step(model, g, cfg.lr)
        except NonFiniteError:
            stats.diverged = True
            halted = True
            if not np.all(np.isfinite(model.flat)):
                model.flat[...] = snapshot
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        stats.epoch_losses.append(epoch_loss)
        if penalties:
            stats.epoch_penalties.append(float(np.mean(penalties)))
            stats.final_penalty = penalties[-1]
        if not np.isfinite(epoch_loss):
            stats.diverged = True
            halted = True
        elif epoch_loss > blowup:
            stats.diverged = True
            halted = True
        if halted:
            break
    stats.jacobian_norm = _measure_jacobian_norm(model, state.shard, cfg.power_iters, penalty_rng)
    stats.train_accuracy = nn.accuracy(model, state.shard)
    state.stats = stats
    return stats


def _measure_jacobian_norm(model, shard, power_iters, rng) -> float:
    """Post-training |J| diagnostic, recorded for every strategy."""
    n = len(shard)
    if n > PENALTY_EVAL_LIMIT:
        idx = rng.choice(n, size=PENALTY_EVAL_LIMIT, replace=False)
        shard = nn.Batch(shard.inputs[idx], shard.labels[idx])
    return nn.jacobian_input_spectral_norm(model, shard, power_iters, rng)
