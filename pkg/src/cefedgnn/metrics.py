"""Evaluation metrics and train/val/test target splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import NO_LABEL, PartitionedGraph

EDGE_TASK = "edge"
NODE_TASK = "node"


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Unweighted mean of per-class F1 over classes present in truth or prediction."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        return 0.0
    classes = np.union1d(np.unique(y_true), np.unique(y_pred))
    scores = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def class_weights(labels: np.ndarray, num_classes: int, enabled: bool = True) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1; absent classes get 0."""
    if not enabled:
        return np.ones(num_classes)
    labels = np.asarray(labels)
    labels = labels[labels != NO_LABEL]
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = len(labels) / (present.sum() * counts[present])
    return w


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    time_feature: int = -1

    def validate(self) -> None:
        if not (0 < self.train_frac < 1) or not (0 <= self.val_frac < 1):
            raise ValueError("split fractions must lie in (0,1)")
        if self.train_frac + self.val_frac >= 1:
            raise ValueError("train_frac + val_frac must leave room for a test split")


@dataclass
class Splits:
    """Edge splits hold graph edge indices; node splits hold node ids."""

    task: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_splits(graph: PartitionedGraph, task: str, spec: SplitSpec,
                rng: np.random.Generator) -> Splits:
    """Temporal split for edge tasks (ordered by the time feature), seeded
    random split for node tasks."""
    spec.validate()
    if task == EDGE_TASK:
        labeled = np.nonzero(graph.edge_labels != NO_LABEL)[0]
        if graph.edge_features is not None and len(labeled):
            t = graph.edge_features[labeled, spec.time_feature]
            order = np.lexsort((graph.edge_ids[labeled], t))
            labeled = labeled[order]
        n = len(labeled)
        a = int(round(spec.train_frac * n))
        b = int(round((spec.train_frac + spec.val_frac) * n))
        return Splits(task, labeled[:a], labeled[a:b], labeled[b:])
    labeled = graph.node_ids[graph.node_labels != NO_LABEL]
    perm = rng.permutation(len(labeled))
    labeled = labeled[perm]
    n = len(labeled)
    a = int(round(spec.train_frac * n))
    b = int(round((spec.train_frac + spec.val_frac) * n))
    return Splits(task, np.sort(labeled[:a]), np.sort(labeled[a:b]), np.sort(labeled[b:]))


def infer_task(graph: PartitionedGraph) -> str:
    """Edge task when edges carry labels, else node task."""
    if np.any(graph.edge_labels != NO_LABEL):
        return EDGE_TASK
    if np.any(graph.node_labels != NO_LABEL):
        return NODE_TASK
    raise ValueError("graph has neither edge nor node labels")


def num_classes_of(graph: PartitionedGraph, task: str) -> int:
    labels = graph.edge_labels if task == EDGE_TASK else graph.node_labels
    labels = labels[labels != NO_LABEL]
    if len(labels) == 0:
        raise ValueError("no labels present")
    return int(labels.max()) + 1
