"""Patient records, CSV ingestion and robust (median/IQR) standardization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class IngestionError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PatientRecord:
    patient_id: str
    label: int
    clinical: np.ndarray  # (D_clin,)
    centroids: np.ndarray  # (L, 3), mm
    features: np.ndarray  # (L, D_features)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise SchemaError(f"{self.patient_id}: label must be 0 or 1, got {self.label}")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise SchemaError(f"{self.patient_id}: needs at least one lesion")
        if self.centroids.shape != (self.features.shape[0], 3):
            raise SchemaError(f"{self.patient_id}: centroids must be (L, 3), got {self.centroids.shape}")

    @property
    def n_lesions(self) -> int:
        return self.features.shape[0]

    def permuted(self, order: Sequence[int]) -> "PatientRecord":
        order = np.asarray(order)
        return replace(self, centroids=self.centroids[order], features=self.features[order])


@dataclass(frozen=True, eq=False)
class Cohort:
    patients: tuple[PatientRecord, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise SchemaError("patient ids must be unique")
        if self.patients:
            dc = {p.clinical.shape for p in self.patients}
            df = {p.features.shape[1] for p in self.patients}
            if len(dc) != 1 or len(df) != 1:
                raise SchemaError("all patients must share D_clin and D_features")

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    @property
    def ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patients], dtype=int)

    @property
    def d_clin(self) -> int:
        return self.patients[0].clinical.shape[0]

    @property
    def d_features(self) -> int:
        return self.patients[0].features.shape[1]

    @property
    def positive_ratio(self) -> float:
        return float(self.labels.mean())

    def subset(self, ids: Iterable[str]) -> "Cohort":
        by_id = {p.patient_id: p for p in self.patients}
        return Cohort(tuple(by_id[i] for i in ids), dict(self.meta))

    def by_id(self) -> dict[str, PatientRecord]:
        return {p.patient_id: p for p in self.patients}


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _rows(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.reader(lines))


def _floats(values, where):
    try:
        out = np.array([float(v) for v in values])
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from None
    if not np.all(np.isfinite(out)):
        raise SchemaError(f"{where}: missing or non-finite value")
    return out


def _indexed_columns(header, prefix, start):
    cols = header[start:]
    expected = [f"{prefix}{k}" for k in range(len(cols))]
    if cols != expected or not cols:
        raise SchemaError(f"expected columns {prefix}0..{prefix}N after {header[:start]}, got {cols}")
    return len(cols)


def load_cohort(clinical_file, lesion_file) -> Cohort:
    clin_rows = _rows(Path(clinical_file))
    les_rows = _rows(Path(lesion_file))
    if not clin_rows or clin_rows[0][:2] != ["patient_id", "label"]:
        raise SchemaError("clinical CSV must start with header patient_id,label,c0..")
    d_clin = _indexed_columns(clin_rows[0], "c", 2)
    if not les_rows or les_rows[0][:5] != ["patient_id", "lesion_id", "px", "py", "pz"]:
        raise SchemaError("lesion CSV must start with header patient_id,lesion_id,px,py,pz,f0..")
    d_feat = _indexed_columns(les_rows[0], "f", 5)

    clinical: dict[str, tuple[int, np.ndarray]] = {}
    for n, row in enumerate(clin_rows[1:], start=2):
        if len(row) != 2 + d_clin:
            raise SchemaError(f"clinical line {n}: expected {2 + d_clin} fields, got {len(row)}")
        pid = row[0]
        if pid in clinical:
            raise IngestionError(f"duplicate patient_id {pid!r}")
        try:
            label = int(row[1])
        except ValueError:
            raise SchemaError(f"clinical line {n}: label {row[1]!r} is not an integer") from None
        clinical[pid] = (label, _floats(row[2:], f"clinical line {n}"))

    lesions: dict[str, list[np.ndarray]] = {}
    for n, row in enumerate(les_rows[1:], start=2):
        if len(row) != 5 + d_feat:
            raise SchemaError(f"lesion line {n}: expected {5 + d_feat} fields, got {len(row)}")
        lesions.setdefault(row[0], []).append(_floats(row[2:], f"lesion line {n}"))

    orphans = sorted(set(lesions) - set(clinical))
    if orphans:
        raise IngestionError(f"lesion rows reference unknown patient ids: {', '.join(orphans)}")
    bare = [pid for pid in clinical if pid not in lesions]
    if bare:
        raise IngestionError(f"patients without any lesion: {', '.join(bare)}")

    patients = []
    for pid, (label, c) in clinical.items():
        arr = np.vstack(lesions[pid])
        patients.append(PatientRecord(pid, label, c, arr[:, :3].copy(), arr[:, 3:].copy()))
    return Cohort(tuple(patients))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_cohort(cohort: Cohort, clinical_file, lesion_file, header: str | None = None) -> None:
    dc, df = cohort.d_clin, cohort.d_features
    with open(clinical_file, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label"] + [f"c{k}" for k in range(dc)])
        for p in cohort:
            w.writerow([p.patient_id, p.label] + [_fmt(v) for v in p.clinical])
    with open(lesion_file, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "lesion_id", "px", "py", "pz"] + [f"f{k}" for k in range(df)])
        for p in cohort:
            for i in range(p.n_lesions):
                w.writerow(
                    [p.patient_id, i]
                    + [_fmt(v) for v in p.centroids[i]]
                    + [_fmt(v) for v in p.features[i]]
                )


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobustScaler:
    kind: str  # "clinical" | "imaging"
    median: np.ndarray
    iqr: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.median.shape[0]:
            raise SchemaError(
                f"{self.kind} scaler fitted on {self.median.shape[0]} columns, got {x.shape[-1]}"
            )
        safe = np.where(self.iqr > 0, self.iqr, 1.0)
        return np.where(self.iqr > 0, (x - self.median) / safe, 0.0)


def robust_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column median and Q3 - Q1 with linear (type-7) quantiles."""
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75], axis=0, method="linear")
    return med, q3 - q1


def fit_scaler(training: Cohort, kind: str) -> RobustScaler:
    if len(training) == 0:
        raise ValueError("cannot fit a scaler on an empty cohort")
    if kind == "clinical":
        values = np.vstack([p.clinical for p in training])
    elif kind == "imaging":
        values = np.vstack([p.features for p in training])
    else:
        raise ValueError(f"unknown feature kind {kind!r}")
    med, iqr = robust_stats(values)
    return RobustScaler(kind, med, iqr)


def transform(scaler: RobustScaler, cohort: Cohort) -> Cohort:
    if scaler.kind == "clinical":
        pts = [replace(p, clinical=scaler.apply(p.clinical)) for p in cohort]
    else:
        pts = [replace(p, features=scaler.apply(p.features)) for p in cohort]
    return Cohort(tuple(pts), dict(cohort.meta))


def scale_centroids(patient: PatientRecord) -> PatientRecord:
    """Per-patient, per-axis (x - mean) / IQR; axes with zero spread map to 0."""
    p = patient.centroids
    mean = np.sort(p, axis=0).mean(axis=0)  # sorted so lesion order cannot move the last bit
    q1, q3 = np.quantile(p, [0.25, 0.75], axis=0, method="linear")
    iqr = q3 - q1
    safe = np.where(iqr > 0, iqr, 1.0)
    scaled = np.where(iqr > 0, (p - mean) / safe, 0.0)
    return replace(patient, centroids=scaled)


def standardize(training: Cohort, *others: Cohort) -> list[Cohort]:
    """Fit clinical and imaging scalers on ``training``; apply them to every cohort."""
    sc = fit_scaler(training, "clinical")
    si = fit_scaler(training, "imaging")
    out = []
    for c in (training, *others):
        c = transform(si, transform(sc, c))
        out.append(Cohort(tuple(scale_centroids(p) for p in c), dict(c.meta)))
    return out
