"""Command-line entry point: ``lesiongraph <subcommand> ...``.

Every artifact starts with a ``# lesiongraph <cmd> seed=<seed> config=<hash>``
line. The hash covers the settings and the contents of the input files, not
their paths, so a rerun anywhere reproduces the same header.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .baselines import VARIANTS, get_variant, graphconv, graphconv_shapes, linear, linear_shapes
from .cohort import Cohort, IngestionError, PatientRecord, SchemaError, load_cohort, write_cohort
from .graphbuild import DegeneratePopulationError, LesionGraph, PopulationStats, build_graph
from .metrics import ProtocolError
from .model import (
    Checkpoint,
    Dims,
    HyperParams,
    cross_attention,
    cross_attention_shapes,
    gatv2,
    gatv2_shapes,
    glorot_init,
    head,
    head_shapes,
    load_checkpoint,
    loss_graph,
    save_checkpoint,
    score,
    train,
)
from .protocol import (
    REFERENCE_VARIANT,
    Grid,
    Preprocessor,
    compare,
    grid_search,
    make_splits,
    read_report,
    stream,
    test_auc,
    write_report_dir,
    write_summary,
)
from .synth import GenerationError, SynthConfig, generate

log = logging.getLogger("lesiongraph")

ATTENTION_COLUMNS = ["patient_id", "layer", "lesion_index", "clinical_index", "attention"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(settings: dict, inputs=()) -> str:
    payload = {"settings": settings, "inputs": [file_digest(p) for p in inputs]}
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def header_line(cmd: str, seed, settings: dict, inputs=()) -> str:
    return f"lesiongraph {cmd} seed={seed} config={config_hash(settings, inputs)}"


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class GradCase:
    target: str
    report: dc.GradCheckReport


def _probe_loss(out: dc.Node, rng: np.random.Generator) -> dc.Node:
    # a random linear functional turns any layer output into a scalar
    return dc.sum_all(dc.mul(out, dc.const(rng.normal(size=out.value.shape))))


def _resolvable(root: dc.Node, h: float, floor: float) -> bool:
    """True when central differences can score every gradient entry.

    Nonzero entries must be at least ``floor``: a GATv2 coordinate whose
    pre-activations share one LeakyReLU regime over all pairs gives its source
    weights a gradient that is zero only up to roundoff (the softmax ignores
    row-constant shifts), and a difference quotient at h=1e-5 resolves about
    1e-11. Exact zeros (dead units, unselected max-pool columns) are fine as
    long as the perturbed losses are bit-identical too.
    """
    dc.backward(root)
    ok = True
    for n in dc.topo_order(root):
        if not (n.op == "input" and n.requires_grad):
            continue
        g = np.zeros_like(n.value) if n.grad is None else n.grad
        a = np.abs(g)
        if np.any((a > 0) & (a < floor)):
            return False
        for idx in zip(*np.nonzero(a == 0)):
            orig = n.value[idx]
            n.value[idx] = orig + h
            fp = dc.forward(root)[0, 0]
            n.value[idx] = orig - h
            fm = dc.forward(root)[0, 0]
            n.value[idx] = orig
            if fp != fm:
                ok = False
                break
        if not ok:
            break
    dc.forward(root)
    return ok


def _informative(build, h: float, tries: int = 400, floor: float = 1e-6) -> dc.Node:
    """First draw from ``build`` whose gradient is resolvable (see ``_resolvable``)."""
    for _ in range(tries):
        root = build()
        if _resolvable(root, h, floor):
            return root
    return root


def _jitter_biases(params: dc.ParamSet, rng: np.random.Generator) -> dc.ParamSet:
    # zero biases can park a ReLU exactly on its kink, where the one-sided
    # analytic derivative and the central difference legitimately disagree
    for name in params.names():
        if name.endswith("bias"):
            params[name][...] = rng.normal(scale=0.5, size=params[name].shape)
    return params


def _random_graph(rng: np.random.Generator, n_lesions: int, d_features: int, d_clin: int) -> LesionGraph:
    rec = PatientRecord(
        "grad",
        1,
        rng.normal(size=d_clin),
        rng.uniform(0, 3, size=(n_lesions, 3)),
        rng.normal(size=(n_lesions, d_features)),
    )
    return build_graph(rec, PopulationStats(1.5, 2.0, 1.0))


def gradient_suite(seed: int = 0, n_lesions: int = 3, d_features: int = 5, d_clin: int = 4, hidden: int = 6,
                   h: float = 1e-5, tol: float = 1e-4) -> list[GradCase]:
    """Finite-difference checks for each layer and each full variant (with its loss)."""
    rng = np.random.default_rng([seed, stream("check-grad")])
    g = _random_graph(rng, n_lesions, d_features, d_clin)
    z = dc.const(g.node_features)
    c_col = dc.const(g.clinical.reshape(-1, 1))
    zh = dc.const(rng.normal(size=(n_lesions, hidden)))
    cases = []

    def layer(target, shapes, fn):
        def build():
            params = _jitter_biases(glorot_init(dc.ParamSet(shapes), rng), rng)
            return _probe_loss(fn(params.nodes()), rng)

        cases.append(GradCase(target, dc.check_gradients(_informative(build, h), h, tol)))

    layer("layer:gatv2", gatv2_shapes("gat", d_features, hidden), lambda P: gatv2(z, g.edge_weights, P, "gat", 0.2)[0])
    layer("layer:cross-attention", cross_attention_shapes("cross", hidden, d_clin),
          lambda P: cross_attention(zh, c_col, P, "cross")[0])
    layer("layer:graphconv", graphconv_shapes("gc", d_features, hidden), lambda P: graphconv(z, g.edge_weights, P, "gc"))
    layer("layer:linear", linear_shapes("fc", d_features, hidden), lambda P: dc.relu(linear(z, P, "fc")))
    layer("layer:head", head_shapes(hidden), lambda P: dc.sigmoid(head(zh, P)))

    dims = Dims(d_features, d_clin, hidden)
    for tag, arch in VARIANTS.items():
        def build(arch=arch):
            params = _jitter_biases(arch.init_params(dims, rng), rng)
            masks = [dc.dropout_mask(rng, s, 0.2) for s in arch.mask_shapes(g, dims)] or None
            return loss_graph(arch, g, params.nodes(), 2.5, masks)

        cases.append(GradCase(f"model:{tag}", dc.check_gradients(_informative(build, h), h, tol)))
    return cases


def write_gradient_report(cases: list[GradCase], path, header: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "param", "max_rel_error", "passed"])
        for case in cases:
            for e in case.report.entries:
                w.writerow([case.target, e.name, repr(e.max_rel_error), int(e.passed)])


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def attention_rows(arch, graphs, params, slope: float = 0.2):
    """Yield (patient_id, layer, lesion_index, clinical_index, weight) per cross-attention entry.

    lesion_index refers to the row order of the input lesion file.
    """
    for g in graphs:
        trace: dict = {}
        score(arch, g, params, slope, trace)
        for k in range(1, arch.n_blocks + 1):
            a = trace.get(f"fusion{k}")
            if a is None:
                continue
            rows = g.lesion_order if g.lesion_order is not None else range(a.shape[0])
            for i, lesion in enumerate(rows):
                for j in range(a.shape[1]):
                    yield g.patient_id, k, int(lesion), j, float(a[i, j])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load(args) -> Cohort:
    for flag in ("clinical", "lesions"):
        if getattr(args, flag) is None:
            raise UsageError(f"--{flag} is required")
        if not Path(getattr(args, flag)).is_file():
            raise UsageError(f"--{flag}: no such file {getattr(args, flag)}")
    return load_cohort(args.clinical, args.lesions)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text: str | None, default):
    if text is None:
        return tuple(default)
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _variants(text: str | None, default) -> list[str]:
    if text is None:
        return list(default)
    if text == "all":
        return list(VARIANTS)
    tags = [t.strip() for t in text.split(",") if t.strip()]
    for t in tags:
        get_variant(t)
    return tags


def cmd_gen(args) -> int:
    cfg = SynthConfig.from_json(args.config) if args.config else SynthConfig()
    overrides = {"seed": args.seed}
    if args.n_patients is not None:
        overrides["n_patients"] = args.n_patients
    cfg = dataclasses.replace(cfg, **overrides)
    cohort = generate(cfg)
    out = _out_dir(args)
    header = header_line("gen", cfg.seed, json.loads(cfg.to_json()))
    write_cohort(cohort, out / "clinical.csv", out / "lesions.csv", header)
    (out / "synth_config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    log.info("wrote %d patients (%d positive) to %s", len(cohort.patients), sum(cohort.labels), out)
    return 0


def _hp_from(args) -> HyperParams:
    return HyperParams(lr=args.lr, hidden=args.hidden, gamma=args.gamma, dropout=args.dropout,
                       epochs=args.epochs, patience=args.patience)


def cmd_train(args) -> int:
    cohort = _load(args)
    arch = get_variant(args.variant)
    hp = _hp_from(args)
    plan = make_splits(cohort, args.seed, n_repeats=args.repeat + 1)
    r = args.repeat
    tr, va, te = (cohort.subset(ids) for ids in (plan.train_ids(r), plan.val_ids(r), plan.test_ids))
    prep = Preprocessor.fit(tr, hp.gamma)
    res = train(arch, prep.graphs(tr), prep.graphs(va), hp, seed=(args.seed, r, stream(arch.tag)),
                val_seed=(args.seed, r, stream("validation-subsets")))
    rng = np.random.default_rng([args.seed, stream("test-subsets"), r])
    auc = test_auc(arch, prep.graphs(te), res.params, hp.slope, rng)

    settings = {"variant": arch.tag, "repeat": r, **dataclasses.asdict(hp)}
    header = header_line("train", args.seed, settings, (args.clinical, args.lesions))
    out = _out_dir(args)
    save_checkpoint(out / "checkpoint.txt", Checkpoint(arch.tag, hp, res.params, prep.to_arrays()), header)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_auc"])
        for m in res.history:
            w.writerow([m.epoch, repr(m.loss), repr(m.val_auc)])
    with open(out / "result.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "repeat", "best_epoch", "val_auc", "test_auc"])
        w.writerow([arch.tag, r, res.best_epoch, repr(res.best_val_auc), repr(auc)])
    log.info("%s: best epoch %d, val AUC %.4f, test AUC %.4f", arch.tag, res.best_epoch, res.best_val_auc, auc)
    return 0


def _grid_from(args) -> Grid:
    base = Grid.full() if args.full_grid else Grid()
    return Grid(
        lr=_floats(args.grid_lr, base.lr),
        hidden=tuple(int(x) for x in _floats(args.grid_hidden, base.hidden)),
        gamma=_floats(args.grid_gamma, base.gamma),
        dropout=_floats(args.grid_dropout, base.dropout),
        epochs=args.epochs if args.epochs is not None else base.epochs,
        patience=base.patience if args.patience is None else (args.patience or None),
    )


def cmd_gridsearch(args) -> int:
    cohort = _load(args)
    tags = _variants(args.variant, VARIANTS)
    grid = _grid_from(args)
    plan = make_splits(cohort, args.seed, n_repeats=args.repeats)
    t0 = time.perf_counter()
    reports = grid_search(tags, cohort, plan, grid, workers=args.workers)
    settings = {"variants": tags, "repeats": args.repeats, **dataclasses.asdict(grid)}
    header = header_line("gridsearch", args.seed, settings, (args.clinical, args.lesions))
    write_report_dir(reports, _out_dir(args), header)
    for tag, rep in reports.items():
        log.info("%-28s test AUC %.3f +- %.3f", tag, rep.mean, rep.std)
    log.info("grid search finished in %.1f s", time.perf_counter() - t0)
    return 0


def cmd_compare(args) -> int:
    paths = []
    for p in args.reports:
        p = Path(p)
        p = p / "report.csv" if p.is_dir() else p
        if not p.is_file():
            raise UsageError(f"no report found at {p}")
        paths.append(p)
    reports = {}
    seeds = []
    for p in paths:
        first = p.read_text(encoding="utf-8").split("\n", 1)[0]
        m = re.search(r"seed=(\S+)", first)
        seeds.append(m.group(1) if m else "unknown")
        for tag, rep in read_report(p).items():
            if tag in reports:
                raise UsageError(f"variant {tag} appears in more than one report")
            reports[tag] = rep
    rows = compare(reports, args.reference)
    header = header_line("compare", ",".join(dict.fromkeys(seeds)), {"reference": args.reference}, paths)
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "summary.csv"
    write_summary(rows, out, header)
    for row in rows:
        p = "" if row.p_value is None else f"  p={row.p_value:.4g}"
        print(f"{row.variant:28s} {row.mean_test_auc:.3f} +- {row.std_test_auc:.3f}{p}")
    return 0


def cmd_export_attention(args) -> int:
    cohort = _load(args)
    if args.checkpoint is None or not Path(args.checkpoint).is_file():
        raise UsageError("--checkpoint must name a checkpoint written by `train`")
    ckpt = load_checkpoint(args.checkpoint)
    arch = get_variant(ckpt.variant)
    if not ckpt.extra:
        raise UsageError(f"{args.checkpoint} carries no preprocessing statistics")
    prep = Preprocessor.from_arrays(ckpt.extra)
    if args.patients:
        cohort = cohort.subset([p.strip() for p in args.patients.split(",")])
    graphs = prep.graphs(cohort)
    settings = {"variant": ckpt.variant, "checkpoint": file_digest(args.checkpoint)}
    seed = args.seed if args.seed is not None else "none"
    header = header_line("export-attention", seed, settings, (args.clinical, args.lesions))
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "attention.csv"
    n = 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTENTION_COLUMNS)
        for pid, layer, i, j, a in attention_rows(arch, graphs, ckpt.params, ckpt.hp.slope):
            w.writerow([pid, layer, i, j, repr(a)])
            n += 1
    if n == 0:
        log.warning("variant %s has no cross-attention layer; wrote header only", ckpt.variant)
    return 0


def cmd_check_grad(args) -> int:
    t0 = time.perf_counter()
    cases = gradient_suite(args.seed)
    elapsed = time.perf_counter() - t0
    failed = [c.target for c in cases if not c.report.passed]
    for c in cases:
        status = "ok  " if c.report.passed else "FAIL"
        print(f"{status} {c.target:36s} max rel error {c.report.max_rel_error:.2e}")
    print(f"{len(cases) - len(failed)}/{len(cases)} passed in {elapsed:.1f} s")
    if args.out:
        out = Path(args.out)
        if out.suffix != ".csv":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "gradcheck.csv"
        write_gradient_report(cases, out, header_line("check-grad", args.seed, {"dims": [3, 5, 4, 6]}))
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesiongraph", description="Multi-lesion graph models for treatment response.")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--clinical", help="clinical CSV: patient_id,label,c0,...")
        sp.add_argument("--lesions", help="lesion CSV: patient_id,lesion_id,px,py,pz,f0,...")

    sp = sub.add_parser("gen", help="write a synthetic cohort")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--n-patients", type=int)
    sp.add_argument("--config", help="JSON file with SynthConfig fields")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen)

    hp = HyperParams()
    sp = sub.add_parser("train", help="train one variant on one repeat")
    data_flags(sp)
    sp.add_argument("--variant", default=REFERENCE_VARIANT)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--repeat", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=hp.epochs)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--lr", type=float, default=hp.lr)
    sp.add_argument("--hidden", type=int, default=hp.hidden)
    sp.add_argument("--gamma", type=float, default=hp.gamma)
    sp.add_argument("--dropout", type=float, default=hp.dropout)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("gridsearch", help="repeated splits x grid search for one or more variants")
    data_flags(sp)
    sp.add_argument("--variant", help="comma-separated tags or 'all' (default: all)")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--patience", type=int, help="early-stopping patience; 0 disables")
    sp.add_argument("--full-grid", action="store_true", help="sweep the exhaustive grid instead of the reduced default")
    sp.add_argument("--grid-lr")
    sp.add_argument("--grid-hidden")
    sp.add_argument("--grid-gamma")
    sp.add_argument("--grid-dropout")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gridsearch)

    sp = sub.add_parser("compare", help="summary with Welch p-values against the reference variant")
    sp.add_argument("reports", nargs="+", help="gridsearch output directories or report.csv files")
    sp.add_argument("--reference", default=REFERENCE_VARIANT)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("export-attention", help="per-patient cross-attention weights")
    data_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--patients", help="comma-separated patient ids (default: all)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_attention)

    sp = sub.add_parser("check-grad", help="finite-difference check of every layer and variant")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_check_grad)
    return p


def _setup_logging() -> None:
    level = os.environ.get("LESIONGRAPH_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


EXPECTED_ERRORS = (
    UsageError,
    IngestionError,
    SchemaError,
    ProtocolError,
    GenerationError,
    DegeneratePopulationError,
    dc.NumericError,
    ValueError,
    OSError,
)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"lesiongraph {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
