"""Final association classifier: few-shot fine-tuning and pair prediction.

The classifier C maps generator features of a joint pair vector to a
scalar association probability through a sigmoid. During fine-tuning every
upstream tensor (encoder, adapter, generator, subgraph encoder) stays
frozen; this is enforced by hashing them before and after.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import TransactionGraph
from .errors import ClassCoverageError, DivergenceError, IntegrityError
from .mixfusion import JointRepresentation, fuse, gnn_encode, sample_k_hop
from .seeding import rng_for
from .transfer import TransferModel

ARCHITECTURES = ("mlp", "logistic")
DEFAULT_HIDDEN = (1024, 1024, 1024, 1024)


class AssociationClassifier:
    """Binary pair scorer: relu MLP (default 4x1024) or logistic head.

    Outputs a single logit; probabilities come from a sigmoid, matching a
    scalar binary cross-entropy. Inputs are z-scored with statistics pinned
    from the fine-tune training set, which makes the head invariant to the
    scale of the frozen features it consumes.
    """

    def __init__(self, d_in: int, seed: int, architecture: str = "mlp",
                 hidden: tuple[int, ...] = DEFAULT_HIDDEN):
        if architecture not in ARCHITECTURES:
            raise ValueError(f"unknown classifier architecture {architecture!r}")
        self.architecture = architecture
        self.d_in = d_in
        rng = rng_for(seed, "association", architecture)
        if architecture == "logistic":
            self.net = nn.Chain([("lin0", nn.Linear(d_in, 1, rng))])
        else:
            self.net = nn.mlp([d_in, *hidden, 1], rng)
        self.input_mean = np.zeros(d_in)
        self.input_scale = np.ones(d_in)
        self.freeze_digest_before: str | None = None
        self.freeze_digest_after: str | None = None

    def calibrate(self, features: np.ndarray) -> None:
        """Pin the input z-scoring to a reference feature matrix."""
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        self.input_mean = feats.mean(axis=0)
        scale = feats.std(axis=0)
        # constant dims carry no signal; leave them unscaled to avoid 0/0
        self.input_scale = np.where(scale > 1e-12, scale, 1.0)

    def _standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(features) - self.input_mean) / self.input_scale

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.net.forward(self._standardize(features), train=False)[:, 0]

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return nn.sigmoid(self.logits(features))

    def params(self) -> dict[str, np.ndarray]:
        return self.net.params()


@dataclass(frozen=True)
class Prediction:
    deposit_id: str
    withdrawal_id: str
    probability: float
    label: int
    threshold: float

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")
        expected = int(self.probability >= self.threshold)
        if self.label != expected:
            raise ValueError(
                f"label {self.label} inconsistent with probability "
                f"{self.probability} at threshold {self.threshold}")


def _frozen_digest(model: TransferModel) -> str:
    flat: dict[str, np.ndarray] = {}
    for component, params in model.component_params().items():
        for name, tensor in params.items():
            flat[f"{component}.{name}"] = tensor
    return nn.params_digest(flat)


def _as_xy(labeled_pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(labeled_pairs, tuple) and len(labeled_pairs) == 2:
        joints, labels = labeled_pairs
        return (np.atleast_2d(np.asarray(joints, dtype=np.float64)),
                np.asarray(labels, dtype=np.float64))
    rows, labels = [], []
    for joint, label in labeled_pairs:
        rows.append(joint.values if isinstance(joint, JointRepresentation)
                    else np.asarray(joint, dtype=np.float64))
        labels.append(float(label))
    return np.stack(rows), np.array(labels)


def finetune(classifier: AssociationClassifier, frozen_model: TransferModel,
             labeled_pairs, epochs: int, seed: int,
             sgd: nn.SgdConfig | None = None,
             batch_size: int | None = None) -> AssociationClassifier:
    """Train C on frozen generator features with scalar binary cross-entropy.

    ``labeled_pairs`` is either a ``(joints, labels)`` pair of arrays or a
    sequence of ``(joint_vector, label)`` tuples. Only the classifier's
    parameters move; upstream tensors are digest-checked. Full-batch by
    default; pass ``batch_size`` for mini-batches.
    """
    joints, labels = _as_xy(labeled_pairs)
    if not (labels == 1).any() or not (labels == 0).any():
        raise ClassCoverageError(
            f"training set needs both classes, got labels {sorted(set(labels))}")
    digest_before = _frozen_digest(frozen_model)
    raw = frozen_model.features(joints)  # frozen path, computed once
    classifier.calibrate(raw)
    features = classifier._standardize(raw)
    optimizer = nn.Sgd(classifier.net.params(),
                       sgd if sgd is not None else frozen_model.sgd)
    rng = rng_for(seed, "finetune")
    n = features.shape[0]
    bs = batch_size if batch_size is not None else n
    for epoch in range(epochs):
        perm = rng.permutation(n) if bs < n else np.arange(n)
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            classifier.net.zero_grads()
            logits = classifier.net.forward(features[idx], train=True)[:, 0]
            loss, dlogits = nn.binary_cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError("non-finite fine-tune loss", epoch - 1)
            classifier.net.backward(dlogits[:, None])
            optimizer.step(classifier.net.grads())
    digest_after = _frozen_digest(frozen_model)
    if digest_after != digest_before:
        raise IntegrityError("frozen model tensors changed during fine-tune")
    classifier.freeze_digest_before = digest_before
    classifier.freeze_digest_after = digest_after
    return classifier


def finetune_loss(classifier: AssociationClassifier, frozen_model: TransferModel,
                  labeled_pairs) -> float:
    """Current binary cross-entropy of C on a labeled set."""
    joints, labels = _as_xy(labeled_pairs)
    logits = classifier.logits(frozen_model.features(joints))
    loss, _ = nn.binary_cross_entropy(logits, labels)
    return loss


def predict_pair(classifier: AssociationClassifier, frozen_model: TransferModel,
                 graph: TransactionGraph, deposit_id: str, withdrawal_id: str,
                 k: int | None = None, threshold: float = 0.5) -> Prediction:
    """Score one candidate pair end to end (subgraphs, fusion, F, C).

    Fusion is always deposit-first; ``k`` defaults to the sampling depth the
    model was pretrained with.
    """
    depth = frozen_model.k if k is None else k
    h_a = gnn_encode(sample_k_hop(graph, deposit_id, depth, frozen_model.cap,
                                  frozen_model.sample_seed), frozen_model.gnn)
    h_b = gnn_encode(sample_k_hop(graph, withdrawal_id, depth, frozen_model.cap,
                                  frozen_model.sample_seed), frozen_model.gnn)
    joint = fuse(h_a, h_b).values
    prob = float(classifier.predict_proba(frozen_model.features(joint))[0])
    return Prediction(deposit_id, withdrawal_id, prob,
                      int(prob >= threshold), threshold)


def write_predictions(path: str, predictions: list[Prediction]) -> None:
    """CSV export: deposit,withdrawal,probability,label."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["deposit", "withdrawal", "probability", "label"])
        for p in predictions:
            writer.writerow([p.deposit_id, p.withdrawal_id, repr(p.probability),
                             str(p.label)])
