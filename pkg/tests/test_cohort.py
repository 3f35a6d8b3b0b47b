from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesiongraph.cohort import (
    Cohort,
    IngestionError,
    PatientRecord,
    SchemaError,
    fit_scaler,
    load_cohort,
    robust_stats,
    scale_centroids,
    standardize,
    transform,
    write_cohort,
)
from conftest import random_cohort, random_patient


def _write(tmp_path, clinical: str, lesions: str):
    c, l = tmp_path / "clinical.csv", tmp_path / "lesions.csv"
    c.write_text(clinical)
    l.write_text(lesions)
    return c, l


def test_roundtrip_is_exact(tmp_path, rng):
    co = random_cohort(rng, n=8)
    write_cohort(co, tmp_path / "c.csv", tmp_path / "l.csv", header="lesiongraph gen seed=1")
    back = load_cohort(tmp_path / "c.csv", tmp_path / "l.csv")
    assert back.ids == co.ids
    for a, b in zip(co, back):
        assert a.label == b.label
        assert np.array_equal(a.clinical, b.clinical)
        assert np.array_equal(a.centroids, b.centroids)
        assert np.array_equal(a.features, b.features)


def test_orphan_lesion_rows_are_named(tmp_path):
    c, l = _write(
        tmp_path,
        "patient_id,label,c0\nA,1,0.5\n",
        "patient_id,lesion_id,px,py,pz,f0\nA,0,1,2,3,4\nGHOST,0,1,2,3,4\n",
    )
    with pytest.raises(IngestionError, match="GHOST"):
        load_cohort(c, l)


def test_patient_without_lesions(tmp_path):
    c, l = _write(
        tmp_path,
        "patient_id,label,c0\nA,1,0.5\nB,0,0.1\n",
        "patient_id,lesion_id,px,py,pz,f0\nA,0,1,2,3,4\n",
    )
    with pytest.raises(IngestionError, match="B"):
        load_cohort(c, l)


@pytest.mark.parametrize(
    "clinical,lesions",
    [
        ("patient_id,label,c0\nA,2,0.5\n", "patient_id,lesion_id,px,py,pz,f0\nA,0,1,2,3,4\n"),
        ("patient_id,label,c0\nA,1,\n", "patient_id,lesion_id,px,py,pz,f0\nA,0,1,2,3,4\n"),
        ("patient_id,label,c0\nA,1,nan\n", "patient_id,lesion_id,px,py,pz,f0\nA,0,1,2,3,4\n"),
        ("patient_id,label,c1\nA,1,0.5\n", "patient_id,lesion_id,px,py,pz,f0\nA,0,1,2,3,4\n"),
        ("patient_id,label,c0\nA,1,0.5\n", "patient_id,lesion_id,px,py,pz,f0\nA,0,1,2,3\n"),
    ],
)
def test_schema_violations(tmp_path, clinical, lesions):
    c, l = _write(tmp_path, clinical, lesions)
    with pytest.raises(SchemaError):
        load_cohort(c, l)


def test_duplicate_patient(tmp_path):
    c, l = _write(
        tmp_path,
        "patient_id,label,c0\nA,1,0.5\nA,0,0.2\n",
        "patient_id,lesion_id,px,py,pz,f0\nA,0,1,2,3,4\n",
    )
    with pytest.raises(IngestionError):
        load_cohort(c, l)


def test_robust_stats_hand_case():
    med, iqr = robust_stats(np.array([[1.0], [2.0], [3.0], [4.0], [100.0]]))
    # type-7: Q1 = 2, Q3 = 4
    assert med[0] == 3.0 and iqr[0] == 2.0


def test_constant_column_maps_to_zero(rng):
    co = random_cohort(rng, n=6)
    pts = tuple(PatientRecord(p.patient_id, p.label, np.r_[7.0, p.clinical[1:]], p.centroids, p.features) for p in co)
    co = Cohort(pts)
    sc = fit_scaler(co, "clinical")
    out = transform(sc, co)
    assert sc.iqr[0] == 0.0
    assert all(p.clinical[0] == 0.0 for p in out)
    assert all(np.all(np.isfinite(p.clinical)) for p in out)


def test_scaler_rejects_width_mismatch(rng):
    co = random_cohort(rng, n=6, d_clin=4)
    other = random_cohort(rng, n=6, d_clin=3)
    with pytest.raises(SchemaError):
        transform(fit_scaler(co, "clinical"), other)


def test_scaler_uses_training_only(rng):
    tr = random_cohort(rng, n=10)
    te = random_cohort(rng, n=5)
    shifted = Cohort(tuple(PatientRecord(p.patient_id, p.label, p.clinical + 1e3, p.centroids, p.features) for p in te))
    a = standardize(tr, te)[1]
    b = standardize(tr, shifted)[1]
    for x, y in zip(a, b):
        assert np.allclose(y.clinical - x.clinical, 1e3 / fit_scaler(tr, "clinical").iqr)


def test_single_lesion_centroid_is_zero(rng):
    p = scale_centroids(random_patient(rng, n_lesions=1))
    assert np.array_equal(p.centroids, np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8), shift=st.floats(-1e3, 1e3))
def test_centroid_scaling_is_translation_invariant(seed, n, shift):
    rng = np.random.default_rng(seed)
    p = random_patient(rng, n_lesions=n)
    moved = PatientRecord(p.patient_id, p.label, p.clinical, p.centroids + shift, p.features)
    assert np.allclose(scale_centroids(p).centroids, scale_centroids(moved).centroids, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8))
def test_standardized_training_has_zero_median(seed, n):
    rng = np.random.default_rng(seed)
    co = random_cohort(rng, n=n + 4)
    (tr,) = standardize(co)
    med, _ = robust_stats(np.vstack([p.clinical for p in tr]))
    assert np.allclose(med, 0.0, atol=1e-12)


def test_permuted_keeps_lesions_together(rng):
    p = random_patient(rng, n_lesions=4)
    q = p.permuted([3, 1, 0, 2])
    assert np.array_equal(q.features[0], p.features[3])
    assert np.array_equal(q.centroids[0], p.centroids[3])


def test_record_validation():
    with pytest.raises(SchemaError):
        PatientRecord("x", 1, np.zeros(2), np.zeros((0, 3)), np.zeros((0, 4)))
    with pytest.raises(SchemaError):
        PatientRecord("x", 1, np.zeros(2), np.zeros((2, 2)), np.zeros((2, 4)))
