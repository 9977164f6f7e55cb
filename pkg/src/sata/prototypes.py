"""Class-mean feature prototypes and nearest-prototype view assignment."""

from __future__ import annotations

import numpy as np

from .autodiff import EPS_NORM, Tensor
from .errors import DegenerateVectorError, MissingClassError, ShapeError


class PrototypeBank:
    """Immutable per-class mean source features, one row per class."""

    def __init__(self, prototypes: np.ndarray):
        proto = np.array(prototypes, dtype=np.float64)
        if proto.ndim != 2:
            raise ShapeError(f"prototypes must be (classes, features), got {proto.shape}")
        norms = np.linalg.norm(proto, axis=1)
        bad = np.nonzero(norms <= EPS_NORM)[0]
        if bad.size:
            raise DegenerateVectorError(f"prototype rows {bad.tolist()} have near-zero norm")
        proto.setflags(write=False)
        self.prototypes = proto
        self._unit = proto / norms[:, None]
        self._unit.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def save(self, path) -> None:
        np.savez(path, prototypes=self.prototypes)

    @classmethod
    def load(cls, path) -> "PrototypeBank":
        with np.load(path) as stored:
            return cls(stored["prototypes"])


def compute_prototypes(features: np.ndarray, labels: np.ndarray, n_classes: int) -> PrototypeBank:
    """Mean feature vector per class over labeled source features."""
    feats = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if feats.ndim != 2 or feats.shape[0] != y.shape[0]:
        raise ShapeError(f"features {feats.shape} do not match {y.shape[0]} labels")
    rows = []
    for c in range(n_classes):
        mask = y == c
        if not mask.any():
            raise MissingClassError(f"class {c} has no samples")
        rows.append(feats[mask].mean(axis=0))
    return PrototypeBank(np.stack(rows))


def assign_prototype_view(features, bank: PrototypeBank) -> tuple[np.ndarray, Tensor]:
    """Nearest prototype (by cosine similarity) for each feature row.

    Returns the chosen class indices and the corresponding prototype rows as
    a constant tensor: prototypes are fixed source knowledge and never
    receive gradient. Ties resolve to the lowest class index.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != bank.feature_dim:
        raise ShapeError(
            f"features {feats.shape} incompatible with {bank.feature_dim}-dim prototypes"
        )
    norms = np.linalg.norm(feats, axis=1)
    bad = np.nonzero(norms <= EPS_NORM)[0]
    if bad.size:
        raise DegenerateVectorError(f"feature rows {bad.tolist()} have near-zero norm")
    cosine = (feats / norms[:, None]) @ bank._unit.T
    indices = np.argmax(cosine, axis=1)
    return indices, Tensor(bank.prototypes[indices])
