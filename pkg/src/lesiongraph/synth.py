"""Seeded synthetic cohorts with a planted clinical x imaging signal.

The label logit has three parts:

* clinical: the standardized sum of clinical entries (an IPI-like count);
* imaging: the most aggressive lesion's score, max over lesions of a fixed
  projection of its features;
* interaction: a softmax-weighted clinical average whose temperature is that
  imaging score. An aggressive burden (score > 0) pulls the risk toward the
  patient's worst clinical factor, an indolent one toward the best, so the
  imaging score gates which clinical factor matters. Neither modality alone
  recovers this term, and it does not single out a fixed clinical column.

Each patient's clinical vector is drawn at a log-normal overall scale, so how
far the worst and best factors sit apart varies across patients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .cohort import Cohort, PatientRecord


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 583
    positive_ratio: float = 0.194
    min_lesions: int = 1
    max_lesions: int = 20
    lesion_decay: float = 0.85  # P(L = k) proportional to decay ** (k - min)
    d_features: int = 40
    d_clin: int = 8
    n_signal_features: int = 4
    clinical_strength: float = 0.3
    imaging_strength: float = 0.1
    cross_strength: float = 8.0
    temperature: float = 6.0
    clinical_dispersion: float = 1.0  # log-sd of the per-patient clinical scale
    noise: float = 0.0
    cube_mm: float = 400.0
    lesion_spread: float = 0.3  # lesion scatter around the patient latent
    seed: int = 42

    def __post_init__(self):
        if not 0.0 < self.positive_ratio < 1.0:
            raise ValueError("positive_ratio must lie in (0, 1)")
        if not 1 <= self.min_lesions <= self.max_lesions:
            raise ValueError("lesion count range must satisfy 1 <= min <= max")
        if self.n_patients < 2:
            raise ValueError("n_patients must be at least 2")
        if not 0.0 < self.lesion_decay <= 1.0:
            raise ValueError("lesion_decay must lie in (0, 1]")
        if not 1 <= self.n_signal_features <= self.d_features:
            raise ValueError("n_signal_features must lie in [1, d_features]")
        if self.d_clin < 1 or self.noise < 0:
            raise ValueError("d_clin must be positive and noise non-negative")

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class SignalParts:
    clinical: np.ndarray
    imaging: np.ndarray
    interaction: np.ndarray
    logit: np.ndarray  # noiseless, before the calibrated intercept


def soft_select(c: np.ndarray, t) -> np.ndarray:
    """Row-wise sum_k c_k softmax_k(t c_k): mean at t=0, max as t -> inf."""
    c = np.atleast_2d(c)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    a = t * c
    a = np.exp(a - a.max(axis=1, keepdims=True))
    return (a * c).sum(axis=1) / a.sum(axis=1)


def _lesion_counts(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    # stratified inverse-CDF draw: both ends of the range are hit once
    # n_patients * P(end) >= 1
    ks = np.arange(cfg.min_lesions, cfg.max_lesions + 1)
    pmf = cfg.lesion_decay ** (ks - cfg.min_lesions)
    cdf = np.cumsum(pmf / pmf.sum())
    cdf[-1] = 1.0
    u = (rng.permutation(cfg.n_patients) + rng.random(cfg.n_patients)) / cfg.n_patients
    return ks[np.searchsorted(cdf, u, side="right").clip(max=ks.size - 1)]


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def _calibrate(logit: np.ndarray, u: np.ndarray, target: float) -> np.ndarray:
    """Find an intercept so that #{u < sigmoid(logit + b)} matches target."""
    n = logit.size
    want = round(target * n)

    def count(b):
        return int((u < expit(logit + b)).sum())

    span = float(np.abs(logit).max()) + 60.0
    lo, hi = -span, span
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = count(mid)
        if c == want:
            lo = hi = mid
            break
        if c < want:
            lo = mid
        else:
            hi = mid
    b = 0.5 * (lo + hi)
    labels = (u < expit(logit + b)).astype(int)
    if abs(labels.mean() - target) > 0.02:
        raise GenerationError(
            f"could not calibrate positive ratio {target}: reached {labels.mean():.4f}"
        )
    return labels


def generate_with_signal(cfg: SynthConfig) -> tuple[Cohort, SignalParts]:
    ss = np.random.SeedSequence(cfg.seed)
    r_count, r_clin, r_img, r_pos, r_noise, r_label = (np.random.default_rng(s) for s in ss.spawn(6))
    n = cfg.n_patients
    counts = _lesion_counts(cfg, r_count)

    spread = np.exp(cfg.clinical_dispersion * r_clin.normal(size=(n, 1)))
    clinical = spread * r_clin.normal(size=(n, cfg.d_clin))
    latent = r_img.normal(size=(n, cfg.d_features))
    features = [latent[i] + cfg.lesion_spread * r_img.normal(size=(counts[i], cfg.d_features)) for i in range(n)]
    centroids = [r_pos.uniform(0.0, cfg.cube_mm, size=(counts[i], 3)) for i in range(n)]

    k = cfg.n_signal_features
    scale = np.sqrt(k * (1.0 + cfg.lesion_spread**2))
    lesion_score = [f[:, :k].sum(axis=1) / scale for f in features]
    top = np.array([s.max() for s in lesion_score])
    clin = _standardize(clinical.sum(axis=1))
    img = _standardize(top)
    # the raw score keeps 0 as the gate between indolent and aggressive
    cross = _standardize(soft_select(clinical, cfg.temperature * top))

    logit = cfg.clinical_strength * clin + cfg.imaging_strength * img + cfg.cross_strength * cross
    noisy = logit + cfg.noise * r_noise.normal(size=n)
    labels = _calibrate(noisy, r_label.random(n), cfg.positive_ratio)

    width = len(str(n - 1))
    patients = tuple(
        PatientRecord(f"P{i:0{width}d}", int(labels[i]), clinical[i], centroids[i], features[i]) for i in range(n)
    )
    cohort = Cohort(patients, {"source": "synth", "config": cfg.to_json()})
    return cohort, SignalParts(clin, img, cross, logit)


def generate(cfg: SynthConfig) -> Cohort:
    return generate_with_signal(cfg)[0]
