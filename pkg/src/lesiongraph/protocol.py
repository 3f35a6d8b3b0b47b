"""Repeated stratified splits, grid search and the cross-model comparison."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import get_variant
from .cohort import Cohort, RobustScaler, fit_scaler, scale_centroids, transform
from .graphbuild import LesionGraph, PopulationStats, build_graph, population_stats
from .metrics import ProtocolError, balanced_auc, balanced_subsets, welch_ttest
from .model import Architecture, HyperParams, TrainResult, score, train

log = logging.getLogger(__name__)

REFERENCE_VARIANT = "cross-attention"
REPORT_COLUMNS = ["variant", "repeat", "lr", "hidden", "gamma", "dropout", "val_auc", "test_auc"]
SUMMARY_COLUMNS = ["variant", "n_repeats", "mean_test_auc", "std_test_auc", "t_stat", "df", "p_value"]


def stream(name: str) -> int:
    """Stable integer id for a named RNG sub-stream."""
    return zlib.crc32(name.encode())


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    test_ids: tuple[str, ...]
    repeats: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]  # (train, val) per repeat
    seed: int

    def train_ids(self, r: int) -> tuple[str, ...]:
        return self.repeats[r][0]

    def val_ids(self, r: int) -> tuple[str, ...]:
        return self.repeats[r][1]


def _share(n: int, frac: float) -> int:
    return max(1, int(math.floor(frac * n + 0.5)))


def make_splits(cohort: Cohort, seed: int, n_repeats: int = 10, test_frac: float = 0.1, val_frac: float = 0.1) -> SplitPlan:
    """Fixed stratified test set, then ``n_repeats`` stratified train/validation reshuffles."""
    ids = np.array(cohort.ids)
    y = cohort.labels
    by_class = {c: ids[y == c] for c in (0, 1)}
    if min(len(v) for v in by_class.values()) < 2:
        raise ProtocolError("need at least two positive and two negative patients")
    rng = np.random.default_rng([seed, stream("split-test")])
    test, rest = [], {}
    for c in (1, 0):
        members = by_class[c][rng.permutation(len(by_class[c]))]
        k = _share(len(members), test_frac)
        v = _share(len(members), val_frac)
        if len(members) - k - v < 1:
            raise ProtocolError(f"class {c}: {len(members)} patients cannot fill train/validation/test")
        test.extend(members[:k])
        rest[c] = (members[k:], v)
    order = {pid: i for i, pid in enumerate(cohort.ids)}
    repeats = []
    for r in range(n_repeats):
        rr = np.random.default_rng([seed, stream("split-repeat"), r])
        tr, va = [], []
        for c in (1, 0):
            members, v = rest[c]
            members = members[rr.permutation(len(members))]
            va.extend(members[:v])
            tr.extend(members[v:])
        repeats.append((tuple(sorted(tr, key=order.get)), tuple(sorted(va, key=order.get))))
    return SplitPlan(tuple(sorted(test, key=order.get)), tuple(repeats), seed)


# ---------------------------------------------------------------------------
# preprocessing fitted on one training split
# ---------------------------------------------------------------------------


def _standardize(sc: RobustScaler, si: RobustScaler, cohort: Cohort) -> Cohort:
    c = transform(si, transform(sc, cohort))
    return Cohort(tuple(scale_centroids(p) for p in c), dict(c.meta))


@dataclass(frozen=True)
class Preprocessor:
    clinical: RobustScaler
    imaging: RobustScaler
    stats: PopulationStats

    @classmethod
    def fit(cls, training: Cohort, gamma: float = 1.0) -> "Preprocessor":
        sc = fit_scaler(training, "clinical")
        si = fit_scaler(training, "imaging")
        # distance spreads are measured on the standardized model inputs
        return cls(sc, si, population_stats(_standardize(sc, si, training), gamma))

    def _standardize(self, cohort: Cohort) -> Cohort:
        return _standardize(self.clinical, self.imaging, cohort)

    def with_gamma(self, gamma: float) -> "Preprocessor":
        return Preprocessor(self.clinical, self.imaging, self.stats.with_gamma(gamma))

    def graphs(self, cohort: Cohort) -> list[LesionGraph]:
        return [build_graph(p, self.stats) for p in self._standardize(cohort)]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "clinical.median": self.clinical.median.reshape(1, -1),
            "clinical.iqr": self.clinical.iqr.reshape(1, -1),
            "imaging.median": self.imaging.median.reshape(1, -1),
            "imaging.iqr": self.imaging.iqr.reshape(1, -1),
            "stats": np.array([[self.stats.sigma1, self.stats.sigma2, self.stats.gamma]]),
        }

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray]) -> "Preprocessor":
        s1, s2, g = a["stats"].ravel()
        return cls(
            RobustScaler("clinical", a["clinical.median"].ravel(), a["clinical.iqr"].ravel()),
            RobustScaler("imaging", a["imaging.median"].ravel(), a["imaging.iqr"].ravel()),
            PopulationStats(float(s1), float(s2), float(g)),
        )


@dataclass
class RepeatData:
    """Graphs for one repeat, keyed by gamma, built with train-only statistics."""

    train: dict[float, list[LesionGraph]]
    val: dict[float, list[LesionGraph]]
    test: dict[float, list[LesionGraph]]
    prep: dict[float, Preprocessor]


def prepare_repeat(cohort: Cohort, plan: SplitPlan, r: int, gammas: Iterable[float]) -> RepeatData:
    tr = cohort.subset(plan.train_ids(r))
    va = cohort.subset(plan.val_ids(r))
    te = cohort.subset(plan.test_ids)
    base = Preprocessor.fit(tr)
    data = RepeatData({}, {}, {}, {})
    for g in sorted(set(gammas)):
        p = base.with_gamma(g)
        data.prep[g] = p
        data.train[g] = p.graphs(tr)
        data.val[g] = p.graphs(va)
        data.test[g] = p.graphs(te)
    return data


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Hyperparameter axes. The defaults are a reduced grid sized for one CPU;
    ``Grid.full()`` gives the exhaustive sweep."""

    lr: tuple[float, ...] = (5e-4,)
    hidden: tuple[int, ...] = (16, 32)
    gamma: tuple[float, ...] = (1.0, 10.0)
    dropout: tuple[float, ...] = (0.2,)
    epochs: int = 100
    patience: int | None = 15

    @classmethod
    def full(cls) -> "Grid":
        return cls(lr=(1e-2, 1e-3, 1e-4), hidden=(16, 32, 64), gamma=(0.1, 1.0, 10.0), dropout=(0.0, 0.2), patience=None)

    def points(self, arch: Architecture) -> list[HyperParams]:
        gammas = self.gamma if arch.uses_gamma else (1.0,)
        drops = self.dropout if arch.uses_dropout else (0.0,)
        return [
            HyperParams(lr=lr, hidden=h, gamma=g, dropout=d, epochs=self.epochs, patience=self.patience)
            for lr, h, g, d in product(self.lr, self.hidden, gammas, drops)
        ]


@dataclass(frozen=True)
class ReportRow:
    variant: str
    repeat: int
    lr: float
    hidden: int
    gamma: float | None
    dropout: float | None
    val_auc: float
    test_auc: float


@dataclass
class EvalReport:
    variant: str
    rows: list[ReportRow] = field(default_factory=list)
    grid_rows: list[dict] = field(default_factory=list)

    @property
    def test_aucs(self) -> np.ndarray:
        return np.array([r.test_auc for r in self.rows])

    @property
    def mean(self) -> float:
        return float(self.test_aucs.mean())

    @property
    def std(self) -> float:
        a = self.test_aucs
        return float(a.std(ddof=1)) if a.size > 1 else 0.0


def test_auc(arch: Architecture, graphs: Sequence[LesionGraph], params, slope: float, subsets_rng, k: int = 5) -> float:
    ids = [g.patient_id for g in graphs]
    labels = {g.patient_id: g.label for g in graphs}
    subsets = balanced_subsets(ids, [labels[i] for i in ids], k, subsets_rng)
    scores = {g.patient_id: score(arch, g, params, slope) for g in graphs}
    return balanced_auc(scores, labels, subsets)


# per-process cache so workers build each repeat's graphs once
_WORKER: dict = {}


def _init_worker(cohort, plan, gammas):
    _WORKER.clear()
    _WORKER.update(cohort=cohort, plan=plan, gammas=tuple(gammas), repeats={})


def _repeat_data(r: int) -> RepeatData:
    cache = _WORKER["repeats"]
    if r not in cache:
        cache.clear()  # tasks arrive grouped by repeat; keep memory flat
        cache[r] = prepare_repeat(_WORKER["cohort"], _WORKER["plan"], r, _WORKER["gammas"])
    return cache[r]


def _run_point(task):
    tag, r, gi, hp, seed, val_k = task
    arch = get_variant(tag)
    data = _repeat_data(r)
    res = train(
        arch,
        data.train[hp.gamma],
        data.val[hp.gamma],
        hp,
        seed=(seed, r, gi, stream(tag)),
        val_seed=(seed, r, stream("validation-subsets")),
        val_k=val_k,
    )
    return (tag, r, gi), res


def grid_search(
    variant: str | Sequence[str],
    cohort: Cohort,
    plan: SplitPlan,
    grid: Grid,
    workers: int = 1,
    val_k: int = 5,
    test_k: int = 5,
) -> dict[str, EvalReport]:
    """Train every grid point on every repeat, select on validation, score on test."""
    tags = [variant] if isinstance(variant, str) else list(variant)
    archs = {t: get_variant(t) for t in tags}
    gammas = {hp.gamma for a in archs.values() for hp in grid.points(a)}
    seed = plan.seed
    tasks = []
    for r in range(len(plan.repeats)):
        for t in tags:
            for gi, hp in enumerate(grid.points(archs[t])):
                tasks.append((t, r, gi, hp, seed, val_k))

    results: dict[tuple, TrainResult] = {}
    if workers <= 1:
        _init_worker(cohort, plan, gammas)
        for task in tasks:
            key, res = _run_point(task)
            results[key] = res
            log.info("%s repeat %d point %d: val AUC %.4f (epoch %d)", *key, res.best_val_auc, res.best_epoch)
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cohort, plan, gammas)) as ex:
            for key, res in ex.map(_run_point, tasks, chunksize=1):
                results[key] = res
                log.info("%s repeat %d point %d: val AUC %.4f (epoch %d)", *key, res.best_val_auc, res.best_epoch)
        _init_worker(cohort, plan, gammas)

    reports = {t: EvalReport(t) for t in tags}
    for r in range(len(plan.repeats)):
        data = None
        for t in tags:
            arch = archs[t]
            points = grid.points(arch)
            vals = [results[(t, r, gi)].best_val_auc for gi in range(len(points))]
            best = int(np.argmax(vals))  # first maximum wins ties
            hp = points[best]
            for gi, p in enumerate(points):
                reports[t].grid_rows.append(
                    {"variant": t, "repeat": r, "point": gi, **_axes(arch, p), "val_auc": vals[gi],
                     "best_epoch": results[(t, r, gi)].best_epoch}
                )
            if data is None:
                data = _repeat_data(r)
            rng = np.random.default_rng([seed, stream("test-subsets"), r])
            auc = test_auc(arch, data.test[hp.gamma], results[(t, r, best)].params, hp.slope, rng, test_k)
            ax = _axes(arch, hp)
            reports[t].rows.append(ReportRow(t, r, hp.lr, hp.hidden, ax["gamma"], ax["dropout"], vals[best], auc))
    return reports


def _axes(arch: Architecture, hp: HyperParams) -> dict:
    return {
        "lr": hp.lr,
        "hidden": hp.hidden,
        "gamma": hp.gamma if arch.uses_gamma else None,
        "dropout": hp.dropout if arch.uses_dropout else None,
    }


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(reports: Iterable[EvalReport], path, header: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for row in rep.rows:
                w.writerow([_cell(getattr(row, c)) for c in REPORT_COLUMNS])


def write_grid(reports: Iterable[EvalReport], path, header: str | None = None) -> None:
    cols = ["variant", "repeat", "point", "lr", "hidden", "gamma", "dropout", "val_auc", "best_epoch"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rep in reports:
            for row in rep.grid_rows:
                w.writerow([_cell(row[c]) for c in cols])


def read_report(path) -> dict[str, EvalReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != REPORT_COLUMNS:
        raise ProtocolError(f"{path}: unexpected report header {reader.fieldnames}")
    out: dict[str, EvalReport] = {}
    for rec in reader:
        row = ReportRow(
            rec["variant"],
            int(rec["repeat"]),
            float(rec["lr"]),
            int(rec["hidden"]),
            float(rec["gamma"]) if rec["gamma"] else None,
            float(rec["dropout"]) if rec["dropout"] else None,
            float(rec["val_auc"]),
            float(rec["test_auc"]),
        )
        out.setdefault(row.variant, EvalReport(row.variant)).rows.append(row)
    return out


@dataclass(frozen=True)
class SummaryRow:
    variant: str
    n_repeats: int
    mean_test_auc: float
    std_test_auc: float
    t_stat: float | None
    df: float | None
    p_value: float | None


def compare(reports: dict[str, EvalReport], reference: str = REFERENCE_VARIANT) -> list[SummaryRow]:
    """mean/std of repeat-level test AUCs, Welch p-value against ``reference``."""
    ref = reports.get(reference)
    rows = []
    for tag, rep in reports.items():
        t = df = p = None
        if ref is not None and tag != reference:
            t, df, p = welch_ttest(ref.test_aucs, rep.test_aucs)
        rows.append(SummaryRow(tag, len(rep.rows), rep.mean, rep.std, t, df, p))
    return rows


def write_summary(rows: Sequence[SummaryRow], path, header: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([_cell(getattr(row, c)) for c in SUMMARY_COLUMNS])


def write_report_dir(reports: dict[str, EvalReport], out: Path, header: str | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_report(reports.values(), out / "report.csv", header)
    write_grid(reports.values(), out / "grid.csv", header)
