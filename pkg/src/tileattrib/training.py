"""
Tile-classifier training: seeded SGD with momentum, multi-seed ensembles, and
the image-level model-success rule (a single false negative disqualifies a
model; survivors rank by accuracy).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .cnn import ArchitectureSpec, Network, Parameters, init_parameters

log = logging.getLogger(__name__)

MOMENTUM = 0.9


class TrainingError(RuntimeError):
    """Non-recoverable training failure (bad data, numeric blowup)."""


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class EpochStats:
    loss: float
    accuracy: float


@dataclass
class TrainedModel:
    spec: ArchitectureSpec
    params: Parameters
    hyper: Hyperparams
    history: List[EpochStats]
    provenance: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.hyper.seed

    def network(self) -> Network:
        return Network(self.spec, self.params)


def train_model(spec: ArchitectureSpec, inputs: np.ndarray, labels: np.ndarray,
                hyper: Hyperparams, provenance: Optional[dict] = None) -> TrainedModel:
    """Train one classifier. inputs: (N, 1, S, S) float32 in [0, 1]; labels 0/1.

    Fully deterministic for a given seed: initialization and every epoch's
    shuffle derive from hyper.seed. No early stopping; history records one
    entry per epoch actually run.
    """
    labels = np.asarray(labels)
    if inputs.shape[0] == 0:
        raise TrainingError("empty training set")
    if inputs.shape[0] != labels.shape[0]:
        raise TrainingError("inputs and labels disagree in length")
    uniq = set(np.unique(labels).tolist())
    if uniq != {0, 1}:
        raise TrainingError(f"training set must contain both classes, got labels {sorted(uniq)}")

    params = init_parameters(spec, hyper.seed)
    net = Network(spec, params)
    velocity = {n: np.zeros_like(params[n].values) for n in params.names()}
    shuffle_rng = np.random.default_rng((hyper.seed, 0xC0FFEE))

    n = inputs.shape[0]
    history: List[EpochStats] = []
    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(n) if hyper.shuffle else np.arange(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            xb, yb = inputs[idx], labels[idx]
            params.zero_grads()
            loss, probs, _ = net.forward_backward(xb, yb)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, "
                                    f"batch starting {start} (seed {hyper.seed})")
            total_loss += loss * len(idx)
            for name in params.names():
                t = params[name]
                g = t.grad.astype(np.float32)
                velocity[name] = MOMENTUM * velocity[name] - hyper.learning_rate * g
                t.values = t.values + velocity[name]
            # batch accuracy from the pre-update forward pass
            correct += int(((probs > 0.5) == (yb == 1)).sum())
        history.append(EpochStats(loss=total_loss / n, accuracy=correct / n))
        log.debug("seed %d epoch %d: loss %.4f acc %.3f", hyper.seed, epoch,
                  history[-1].loss, history[-1].accuracy)
    return TrainedModel(spec=spec, params=params, hyper=hyper, history=history,
                        provenance=dict(provenance or {}))


def train_ensemble(spec: ArchitectureSpec, inputs: np.ndarray, labels: np.ndarray,
                   hyper: Hyperparams, seeds: Sequence[int],
                   provenance: Optional[dict] = None) -> List[TrainedModel]:
    """One independently-seeded model per seed; each model is identical to what
    train_model would produce alone."""
    if not seeds:
        raise ValueError("at least one seed required")
    models = []
    for seed in seeds:
        h = Hyperparams(epochs=hyper.epochs, batch_size=hyper.batch_size,
                        learning_rate=hyper.learning_rate, seed=seed,
                        shuffle=hyper.shuffle)
        models.append(train_model(spec, inputs, labels, h, provenance))
    return models


def select_successful(models: Sequence[TrainedModel], test_entries,
                      classify: Callable) -> List[Tuple[TrainedModel, "object"]]:
    """Keep only models with zero image-level false negatives, ranked by
    descending accuracy, then fewer false positives, then lower seed.

    classify(model, test_entries) must return an object with accuracy,
    false_positives and false_negatives attributes (an EvaluationReport).
    Returns (model, report) pairs; empty is a valid outcome.
    """
    scored = [(m, classify(m, test_entries)) for m in models]
    survivors = [(m, r) for m, r in scored if r.false_negatives == 0]
    if not survivors:
        log.warning("no model free of false negatives among %d candidates "
                    "(FN counts: %s)", len(models),
                    [r.false_negatives for _, r in scored])
        return []
    survivors.sort(key=lambda mr: (-mr[1].accuracy, mr[1].false_positives,
                                   mr[0].seed))
    return survivors
