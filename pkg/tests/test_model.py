from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesiongraph.baselines import VARIANTS, get_variant
from lesiongraph.graphbuild import PopulationStats, build_graph
from lesiongraph.model import (
    CROSS_ATTENTION,
    Checkpoint,
    Dims,
    HyperParams,
    load_checkpoint,
    pos_weight_for,
    save_checkpoint,
    score,
    train,
)
from conftest import random_patient

STATS = PopulationStats(60.0, 2.0, 1.0)
DIMS = Dims(5, 4, 6)


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _leaky(x, s):
    return np.where(x > 0, x, s * x)


def oracle_logit(g, P, slope=0.2):
    """Loop-based re-evaluation of the cross-attention model."""
    z = g.node_features
    c = g.clinical
    n = z.shape[0]
    for k in (1, 2):
        src, dst = z @ P[f"gat{k}.src"], z @ P[f"gat{k}.dst"]
        e = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                h = _leaky(src[i] + dst[j] + g.edge_weights[i, j] * P[f"gat{k}.edge"][0], slope)
                e[i, j] = h @ P[f"gat{k}.att"][:, 0]
        z = np.maximum(_softmax(e) @ dst, 0.0)
        q = z @ P[f"cross{k}.q"]
        keys = np.outer(c, P[f"cross{k}.k"][0])
        vals = np.outer(c, P[f"cross{k}.v"][0])
        z = _softmax(q @ keys.T / math.sqrt(c.size)) @ vals
    return float(z.max(axis=0) @ P["head.w"][:, 0] + P["head.bias"][0, 0])


def _graph(rng, n):
    return build_graph(random_patient(rng, n_lesions=n, d_features=DIMS.d_features, d_clin=DIMS.d_clin), STATS)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 7))
def test_forward_matches_loop_oracle(seed, n):
    rng = np.random.default_rng(seed)
    ps = CROSS_ATTENTION.init_params(DIMS, rng)
    ps.flat[:] += rng.normal(scale=0.3, size=ps.flat.size)
    g = _graph(rng, n)
    assert score(CROSS_ATTENTION, g, ps) == pytest.approx(oracle_logit(g, ps), rel=1e-10, abs=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ps = CROSS_ATTENTION.init_params(DIMS, rng)
        ps.flat[:] *= rng.uniform(0.5, 20.0)  # sharpen attention
        trace: dict = {}
        score(CROSS_ATTENTION, _graph(rng, int(rng.integers(1, 10))), ps, trace=trace)
        for key in ("graph1", "graph2", "fusion1", "fusion2"):
            assert np.all(np.abs(trace[key].sum(axis=1) - 1.0) <= 1e-12), key


@pytest.mark.parametrize("tag", ["cross-attention", "mil-image", "graphconv-image", "ablation-concat-fusion"])
def test_lesion_permutation_is_exact(tag):
    rng = np.random.default_rng(1)
    arch = get_variant(tag)
    ps = arch.init_params(DIMS, rng)
    for _ in range(50):
        p = random_patient(rng, n_lesions=int(rng.integers(1, 10)), d_features=5, d_clin=4)
        q = p.permuted(rng.permutation(p.n_lesions))
        assert score(arch, build_graph(p, STATS), ps) - score(arch, build_graph(q, STATS), ps) == 0.0


def test_concat_with_identity_projection_drops_clinical():
    rng = np.random.default_rng(2)
    arch = get_variant("ablation-concat-fusion")
    ps = arch.init_params(DIMS, rng)
    eye = np.vstack([np.eye(DIMS.hidden), np.zeros((DIMS.d_clin, DIMS.hidden))])
    ps["proj1"][...] = eye
    ps["proj2"][...] = eye
    p = random_patient(rng, n_lesions=4)
    other = random_patient(rng, n_lesions=4)
    from dataclasses import replace

    a = score(arch, build_graph(p, STATS), ps)
    b = score(arch, build_graph(replace(p, clinical=other.clinical), STATS), ps)
    assert a == b


def test_single_lesion_self_loop():
    # one node: alpha = [[1]], so the GAT output is just dst z
    rng = np.random.default_rng(3)
    ps = CROSS_ATTENTION.init_params(DIMS, rng)
    g = _graph(rng, 1)
    trace: dict = {}
    v = score(CROSS_ATTENTION, g, ps, trace=trace)
    assert trace["graph1"].tolist() == [[1.0]] and trace["graph2"].tolist() == [[1.0]]
    assert math.isfinite(v)
    assert v == pytest.approx(oracle_logit(g, ps), rel=1e-12)


@pytest.mark.parametrize("tag", sorted(VARIANTS))
def test_every_variant_scores_single_lesion(tag):
    rng = np.random.default_rng(4)
    arch = get_variant(tag)
    ps = arch.init_params(DIMS, rng)
    assert math.isfinite(score(arch, _graph(rng, 1), ps))


def test_pos_weight():
    assert pos_weight_for([1, 0, 0, 0]) == 3.0
    with pytest.raises(ValueError):
        pos_weight_for([0, 0])


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    ps = CROSS_ATTENTION.init_params(DIMS, rng)
    hp = HyperParams(lr=3e-3, hidden=6, patience=15)
    extra = {"median": rng.normal(size=(1, 4))}
    save_checkpoint(tmp_path / "c.txt", Checkpoint("cross-attention", hp, ps, extra), header="lesiongraph train")
    back = load_checkpoint(tmp_path / "c.txt")
    assert back.variant == "cross-attention" and back.hp == hp
    assert np.array_equal(back.params.flat, ps.flat)
    assert np.array_equal(back.extra["median"], extra["median"])


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "c.txt").write_text("variant cross-attention\nhp lr oops(\n")
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(tmp_path / "c.txt")


def _tiny_graphs(rng, n, prefix="p"):
    out = []
    for i in range(n):
        p = random_patient(rng, f"{prefix}{i}", int(rng.integers(1, 4)), 5, 4, label=i % 3 == 0)
        out.append(build_graph(p, STATS))
    return out


def test_training_is_deterministic():
    rng = np.random.default_rng(7)
    tr, va = _tiny_graphs(rng, 15, "t"), _tiny_graphs(rng, 12, "v")
    hp = HyperParams(lr=1e-2, hidden=6, epochs=3)
    a = train(CROSS_ATTENTION, tr, va, hp, seed=(1, 2))
    b = train(CROSS_ATTENTION, tr, va, hp, seed=(1, 2))
    assert np.array_equal(a.params.flat, b.params.flat)
    assert [m.loss for m in a.history] == [m.loss for m in b.history]
    c = train(CROSS_ATTENTION, tr, va, hp, seed=(1, 3))
    assert not np.array_equal(a.params.flat, c.params.flat)


def test_training_reduces_loss_on_separable_data():
    rng = np.random.default_rng(8)
    graphs = []
    for i in range(30):
        lab = i % 2
        p = random_patient(rng, f"p{i}", 2, 5, 4, label=lab)
        from dataclasses import replace

        p = replace(p, features=p.features + (2.0 if lab else -2.0))
        graphs.append(build_graph(p, STATS))
    res = train(get_variant("mil-image"), graphs[:20], graphs[20:], HyperParams(lr=1e-2, hidden=8, epochs=30), seed=0)
    assert res.history[-1].loss < res.history[0].loss
    assert res.best_val_auc == 1.0


def test_zero_epochs_returns_initial_params():
    rng = np.random.default_rng(9)
    tr, va = _tiny_graphs(rng, 8, "t"), _tiny_graphs(rng, 8, "v")
    hp = HyperParams(hidden=6, epochs=0)
    res = train(CROSS_ATTENTION, tr, va, hp, seed=4)
    init = CROSS_ATTENTION.init_params(Dims(5, 4, 6), np.random.default_rng((4, 0)))
    assert np.array_equal(res.params.flat, init.flat) and res.history == []


def test_separable_toy_loss_decreases_monotonically():
    from dataclasses import replace

    rng = np.random.default_rng(10)
    graphs = []
    for i in range(20):
        lab = int(i % 2 == 0)
        p = random_patient(rng, f"p{i}", 3, 5, 4, label=lab)
        p = replace(p, features=p.features + (1.5 if lab else -1.5), clinical=p.clinical + (1.5 if lab else -1.5))
        graphs.append(build_graph(p, STATS))
    res = train(CROSS_ATTENTION, graphs[:10], graphs[10:], HyperParams(lr=1e-3, hidden=8, epochs=5, dropout=0.0), seed=0)
    losses = [m.loss for m in res.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
