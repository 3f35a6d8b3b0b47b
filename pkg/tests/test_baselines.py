from __future__ import annotations

import numpy as np
import pytest

from lesiongraph.baselines import VARIANTS, get_variant
from lesiongraph.graphbuild import PopulationStats, build_graph
from lesiongraph.model import Dims, score
from conftest import random_patient

STATS = PopulationStats(60.0, 2.0, 1.0)
DIMS = Dims(5, 4, 6)


def _setup(tag, seed=0, n=4):
    rng = np.random.default_rng(seed)
    arch = get_variant(tag)
    ps = arch.init_params(DIMS, rng)
    ps.flat[:] += rng.normal(scale=0.2, size=ps.flat.size)
    g = build_graph(random_patient(rng, n_lesions=n), STATS)
    return arch, ps, g


def relu(x):
    return np.maximum(x, 0.0)


def test_registry_has_eight_variants():
    assert len(VARIANTS) == 8
    assert "cross-attention" in VARIANTS
    with pytest.raises(ValueError, match="choose from"):
        get_variant("transformer")


@pytest.mark.parametrize(
    "tag,vec",
    [
        ("mlp-clinical", lambda g: g.clinical),
        ("mlp-image-avg", lambda g: g.node_features.mean(axis=0)),
        ("mlp-clinical+image-avg", lambda g: np.r_[g.clinical, g.node_features.mean(axis=0)]),
    ],
)
def test_mlp_oracle(tag, vec):
    arch, P, g = _setup(tag)
    h = relu(vec(g) @ P["fc1.w"] + P["fc1.bias"][0])
    h = relu(h @ P["fc2.w"] + P["fc2.bias"][0])
    assert score(arch, g, P) == pytest.approx(float(h @ P["out.w"][:, 0] + P["out.bias"][0, 0]), rel=1e-12)


def test_mil_oracle():
    arch, P, g = _setup("mil-image")
    h = relu(g.node_features @ P["inst.w"] + P["inst.bias"][0]).max(axis=0)
    assert score(arch, g, P) == pytest.approx(float(h @ P["out.w"][:, 0] + P["out.bias"][0, 0]), rel=1e-12)


def test_graphconv_oracle():
    arch, P, g = _setup("graphconv-image")
    z, w = g.node_features, g.edge_weights
    h = np.zeros((z.shape[0], DIMS.hidden))
    for i in range(z.shape[0]):
        h[i] = z[i] @ P["gc1.root"] + sum(w[i, j] * z[j] for j in range(z.shape[0])) @ P["gc1.nbr"]
    h = relu(h)
    out = h @ P["gc2.root"] + (w @ h) @ P["gc2.nbr"]
    assert score(arch, g, P) == pytest.approx(float(out.max()), rel=1e-12)


def test_image_only_variants_ignore_clinical():
    from dataclasses import replace

    for tag in ("mlp-image-avg", "mil-image", "graphconv-image"):
        arch, P, g = _setup(tag, seed=3)
        g2 = replace(g, clinical=g.clinical + 5.0)
        assert score(arch, g, P) == score(arch, g2, P)


def test_clinical_only_variant_ignores_lesions():
    rng = np.random.default_rng(4)
    arch = get_variant("mlp-clinical")
    P = arch.init_params(DIMS, rng)
    p = random_patient(rng, n_lesions=3)
    q = random_patient(rng, n_lesions=7)
    from dataclasses import replace

    q = replace(q, clinical=p.clinical)
    assert score(arch, build_graph(p, STATS), P) == score(arch, build_graph(q, STATS), P)


def test_graphconv_swap_has_no_graph_attention():
    arch, P, g = _setup("ablation-graphconv-crossatt")
    trace: dict = {}
    score(arch, g, P, trace=trace)
    assert trace["graph1"] is None and trace["fusion1"].shape == (g.n_nodes, DIMS.d_clin)


def test_concat_has_no_cross_attention():
    arch, P, g = _setup("ablation-concat-fusion")
    trace: dict = {}
    score(arch, g, P, trace=trace)
    assert trace["fusion1"] is None and trace["graph1"].shape == (g.n_nodes, g.n_nodes)
