"""Fully connected lesion graphs with distance-kernel edge weights."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .cohort import Cohort, PatientRecord
from .diffcore import NumericError

log = logging.getLogger(__name__)


class DegeneratePopulationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LesionGraph:
    patient_id: str
    node_features: np.ndarray  # (L, D_features)
    edge_weights: np.ndarray  # (L, L), symmetric, unit diagonal
    clinical: np.ndarray  # (D_clin,)
    label: int
    lesion_order: np.ndarray | None = None  # input row of each node

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]


@dataclass(frozen=True)
class PopulationStats:
    sigma1: float  # spread of centroid distances
    sigma2: float  # spread of feature distances
    gamma: float = 1.0

    def __post_init__(self):
        if not (self.sigma1 > 0 and self.sigma2 > 0 and self.gamma > 0):
            raise ValueError(f"sigma1, sigma2 and gamma must be positive: {self}")

    def with_gamma(self, gamma: float) -> "PopulationStats":
        return PopulationStats(self.sigma1, self.sigma2, float(gamma))


def _pair_distances(x: np.ndarray) -> np.ndarray:
    """Euclidean distances for i < j, row-major order."""
    i, j = np.triu_indices(x.shape[0], k=1)
    return np.linalg.norm(x[i] - x[j], axis=1)


def _distance_matrix(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    d = np.zeros((n, n))
    i, j = np.triu_indices(n, k=1)
    d[i, j] = np.linalg.norm(x[i] - x[j], axis=1)
    d[j, i] = d[i, j]
    return d


def population_stats(training: Cohort, gamma: float = 1.0) -> PopulationStats:
    """Population std of intra-patient centroid and feature distances (i < j)."""
    dp = [_pair_distances(p.centroids) for p in training if p.n_lesions > 1]
    if not dp:
        raise DegeneratePopulationError("no training patient has two or more lesions")
    dz = [_pair_distances(p.features) for p in training if p.n_lesions > 1]
    s1 = float(np.std(np.sort(np.concatenate(dp))))
    s2 = float(np.std(np.sort(np.concatenate(dz))))
    if s1 == 0.0 or s2 == 0.0:
        warnings.warn(
            f"degenerate distance spread (sigma1={s1}, sigma2={s2}); substituting 1.0",
            RuntimeWarning,
            stacklevel=2,
        )
        s1 = s1 or 1.0
        s2 = s2 or 1.0
    return PopulationStats(s1, s2, float(gamma))


def edge_weights(centroids: np.ndarray, features: np.ndarray, stats: PopulationStats) -> np.ndarray:
    # distances enter unsquared, divided by gamma * sigma^2
    dp = _distance_matrix(centroids)
    dz = _distance_matrix(features)
    w = np.exp(-dp / (stats.gamma * stats.sigma1**2)) * np.exp(-dz / (stats.gamma * stats.sigma2**2))
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite edge weight")
    return w


def canonical_order(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Lexicographic row order on (features, centroids).

    Nodes are stored in this order so that floating-point sums over lesions
    run in the same sequence whatever order the lesions arrived in.
    """
    keys = np.column_stack([features, centroids])
    return np.lexsort(keys.T[::-1])


def build_graph(patient: PatientRecord, stats: PopulationStats) -> LesionGraph:
    order = canonical_order(patient.features, patient.centroids)
    feats, cents = patient.features[order], patient.centroids[order]
    w = edge_weights(cents, feats, stats)
    return LesionGraph(patient.patient_id, feats, w, patient.clinical, patient.label, order)


def build_graphs(cohort: Iterable[PatientRecord], stats: PopulationStats) -> list[LesionGraph]:
    return [build_graph(p, stats) for p in cohort]


def write_graph_dump(graphs: Iterable[LesionGraph], path, header: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "i", "j", "w"])
        for g in graphs:
            for i in range(g.n_nodes):
                for j in range(g.n_nodes):
                    w.writerow([g.patient_id, i, j, repr(float(g.edge_weights[i, j]))])
