from __future__ import annotations

import numpy as np
import pytest

from lesiongraph.metrics import roc_auc
from lesiongraph.synth import SynthConfig, generate, generate_with_signal, soft_select


def test_deterministic():
    a = generate(SynthConfig(n_patients=50, seed=3))
    b = generate(SynthConfig(n_patients=50, seed=3))
    for p, q in zip(a, b):
        assert p.label == q.label
        assert np.array_equal(p.features, q.features) and np.array_equal(p.centroids, q.centroids)


def test_default_shape_and_calibration():
    co = generate(SynthConfig())
    assert len(co) == 583 and co.d_clin == 8 and co.d_features == 40
    assert abs(co.positive_ratio - 0.194) <= 0.02
    counts = [p.n_lesions for p in co]
    assert min(counts) == 1 and max(counts) == 20
    assert all(np.all((p.centroids >= 0) & (p.centroids <= 400)) for p in co)


def test_interaction_beats_either_modality():
    co, sig = generate_with_signal(SynthConfig(n_patients=4000, seed=9))
    y = co.labels
    full = roc_auc(sig.logit, y)
    assert full > roc_auc(sig.clinical, y) + 0.1
    assert full > roc_auc(sig.imaging, y) + 0.1


def test_no_interaction_reduces_to_main_effects():
    co, sig = generate_with_signal(SynthConfig(n_patients=3000, cross_strength=0.0, seed=2))
    expected = 0.3 * sig.clinical + 0.1 * sig.imaging
    assert np.allclose(sig.logit, expected)


def test_huge_noise_erases_signal():
    co, sig = generate_with_signal(SynthConfig(n_patients=5000, noise=1e4, seed=4))
    assert abs(roc_auc(sig.logit, co.labels) - 0.5) < 0.03


def test_soft_select_limits():
    c = np.array([[1.0, -2.0, 3.0]])
    assert soft_select(c, 0.0)[0] == pytest.approx(2.0 / 3)
    assert soft_select(c, 200.0)[0] == pytest.approx(3.0)
    assert soft_select(c, -200.0)[0] == pytest.approx(-2.0)


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        SynthConfig(positive_ratio=1.5)
    with pytest.raises(ValueError):
        SynthConfig(min_lesions=3, max_lesions=2)
    cfg = SynthConfig(n_patients=10, seed=1)
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert SynthConfig.from_json(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text('{"bogus": 1}')
    with pytest.raises(ValueError, match="bogus"):
        SynthConfig.from_json(tmp_path / "bad.json")


def test_zero_interaction_clinical_oracle_close_to_full():
    co, sig = generate_with_signal(SynthConfig(n_patients=20000, cross_strength=0.0, seed=0))
    assert abs(roc_auc(sig.logit, co.labels) - roc_auc(sig.clinical, co.labels)) < 0.02
