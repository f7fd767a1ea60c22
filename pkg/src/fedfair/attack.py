"""Source inference harness.

The honest-but-curious server holds every client's pre-aggregation model
and a pool of target records known to come from the training data (a
prior membership attack is assumed to have already succeeded). Each
record is attributed to the client whose model gives it the smallest
prediction loss; per-client accuracy of that attribution is the privacy
risk signal everything else consumes.
"""

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fedfair import nn
from fedfair.errors import DataError

N_PER_CLIENT = 50


@dataclass
class TargetSet:
    """Target records with ground-truth source client ids."""

    inputs: np.ndarray  # [n, dim]
    labels: np.ndarray  # [n]
    true_source: np.ndarray  # [n] client ids
    n_per_client: int

    def __len__(self):
        return self.inputs.shape[0]

    def to_manifest(self) -> dict:
        return {
            "n_per_client": int(self.n_per_client),
            "records": [
                {
                    "input": [float(x) for x in row],
                    "label": int(lab),
                    "source": int(src),
                }
                for row, lab, src in zip(self.inputs, self.labels, self.true_source)
            ],
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "TargetSet":
        records = manifest["records"]
        if not records:
            return cls(np.zeros((0, 0)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                       int(manifest["n_per_client"]))
        return cls(
            inputs=np.array([r["input"] for r in records], dtype=np.float64),
            labels=np.array([r["label"] for r in records], dtype=np.int64),
            true_source=np.array([r["source"] for r in records], dtype=np.int64),
            n_per_client=int(manifest["n_per_client"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_manifest(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TargetSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_manifest(json.load(fh))


@dataclass
class SiaRoundResult:
    """One round of attack results.

    attribution[i, j] counts records of true source i attributed to j;
    rows sum to n_per_client. per_client_loss[i] is client i's own
    model's mean loss on its own target records. undefined is set when
    the target set is empty.
    """

    sia_acc: np.ndarray
    per_client_loss: np.ndarray
    attribution: np.ndarray
    undefined: bool = False

    @property
    def mean_acc(self) -> float:
        return float(self.sia_acc.mean())


def select_targets(shards, n_per_client: int, rng) -> TargetSet:
    """Sample n_per_client records uniformly without replacement from each
    client's shard. Sampled once per experiment, so per-round accuracies
    stay comparable over time."""
    if n_per_client < 0:
        raise DataError("n_per_client must be >= 0")
    if n_per_client == 0:
        return TargetSet(np.zeros((0, 0)), np.zeros(0, np.int64), np.zeros(0, np.int64), 0)
    inputs, labels, sources = [], [], []
    for cid, shard in enumerate(shards):
        if len(shard) < n_per_client:
            raise DataError(
                f"client {cid} shard has {len(shard)} records, need {n_per_client}"
            )
        idx = rng.choice(len(shard), size=n_per_client, replace=False)
        inputs.append(shard.inputs[idx])
        labels.append(shard.labels[idx])
        sources.append(np.full(n_per_client, cid, dtype=np.int64))
    return TargetSet(np.concatenate(inputs), np.concatenate(labels),
                     np.concatenate(sources), n_per_client)


def loss_matrix(client_models, targets: TargetSet) -> np.ndarray:
    """losses[k, t]: client k's model loss on target record t."""
    batch = nn.Batch(targets.inputs, targets.labels)
    return np.stack([
        nn.ce_per_example(nn.forward(model, batch), batch.labels)
        for model in client_models
    ])


def attribute_from_losses(losses: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Predicted source per record: argmin loss over clients.

    Ties go to the lowest client id; pass an rng to randomize them
    instead (only meaningful for bit-identical models).
    """
    if rng is None:
        return losses.argmin(axis=0)
    minima = losses.min(axis=0)
    predicted = np.empty(losses.shape[1], dtype=np.int64)
    for t in range(losses.shape[1]):
        candidates = np.nonzero(losses[:, t] == minima[t])[0]
        predicted[t] = candidates[0] if candidates.shape[0] == 1 else rng.choice(candidates)
    return predicted


def sia_round(client_models, targets: TargetSet, rng=None) -> SiaRoundResult:
    """Attack every target record against this round's client models."""
    K = len(client_models)
    if K < 2:
        raise ValueError("need at least 2 client models")
    if len(targets) == 0:
        return SiaRoundResult(np.full(K, np.nan), np.full(K, np.nan),
                              np.zeros((K, K), dtype=np.int64), undefined=True)
    losses = loss_matrix(client_models, targets)
    predicted = attribute_from_losses(losses, rng)
    attribution = np.zeros((K, K), dtype=np.int64)
    np.add.at(attribution, (targets.true_source, predicted), 1)
    per_client_loss = np.array([
        losses[k, targets.true_source == k].mean() for k in range(K)
    ])
    sia_acc = attribution.diagonal() / targets.n_per_client
    return SiaRoundResult(sia_acc, per_client_loss, attribution)
