"""Comparison models and ablations, plus the variant registry."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .graphbuild import LesionGraph
from .model import (
    CROSS_ATTENTION,
    Architecture,
    CrossAttentionModel,
    Dims,
    cross_attention_shapes,
    gatv2_shapes,
    head,
    head_shapes,
)


def linear_shapes(prefix, d_in, d_out):
    return {f"{prefix}.w": (d_in, d_out), f"{prefix}.bias": (1, d_out)}


def linear(x: Node, P, prefix) -> Node:
    return dc.add(dc.matmul(x, P[f"{prefix}.w"]), P[f"{prefix}.bias"])


class MLP(Architecture):
    """linear -> ReLU -> linear -> ReLU -> linear(1) on a per-patient vector."""

    uses_graph = False
    uses_gamma = False
    uses_dropout = False

    def __init__(self, tag: str, clinical: bool, imaging: bool):
        self.tag = tag
        self.clinical = clinical
        self.imaging = imaging

    def input_dim(self, dims: Dims) -> int:
        return dims.d_clin * self.clinical + dims.d_features * self.imaging

    def input_vector(self, g: LesionGraph) -> np.ndarray:
        parts = []
        if self.clinical:
            parts.append(g.clinical)
        if self.imaging:
            parts.append(g.node_features.mean(axis=0))
        return np.concatenate(parts).reshape(1, -1)

    def shapes(self, dims):
        s = {}
        s.update(linear_shapes("fc1", self.input_dim(dims), dims.hidden))
        s.update(linear_shapes("fc2", dims.hidden, dims.hidden))
        s.update(linear_shapes("out", dims.hidden, 1))
        return s

    def logit(self, g, P, masks=None, slope=0.2, trace=None):
        x = dc.const(self.input_vector(g))
        h = dc.relu(linear(x, P, "fc1"))
        h = dc.relu(linear(h, P, "fc2"))
        return linear(h, P, "out")


class MIL(Architecture):
    """Per-lesion linear + ReLU, max over lesions, linear(1)."""

    tag = "mil-image"
    uses_graph = False
    uses_gamma = False
    uses_dropout = False

    def shapes(self, dims):
        s = linear_shapes("inst", dims.d_features, dims.hidden)
        s.update(linear_shapes("out", dims.hidden, 1))
        return s

    def logit(self, g, P, masks=None, slope=0.2, trace=None):
        h = dc.relu(linear(dc.const(g.node_features), P, "inst"))
        return linear(dc.row_max_pool(h), P, "out")


def graphconv_shapes(prefix, d_in, d_out):
    return {f"{prefix}.root": (d_in, d_out), f"{prefix}.nbr": (d_in, d_out)}


def graphconv(z: Node, w: np.ndarray, P, prefix) -> Node:
    """z_i' = W1 z_i + W2 sum_j w_ij z_j, neighbours include the self-loop."""
    agg = dc.matmul(dc.const(w), z)
    return dc.add(dc.matmul(z, P[f"{prefix}.root"]), dc.matmul(agg, P[f"{prefix}.nbr"]))


class GraphConvImage(Architecture):
    """GraphConv(hidden) -> ReLU -> GraphConv(1) -> max-pool."""

    tag = "graphconv-image"
    uses_dropout = False

    def shapes(self, dims):
        s = graphconv_shapes("gc1", dims.d_features, dims.hidden)
        s.update(graphconv_shapes("gc2", dims.hidden, 1))
        return s

    def logit(self, g, P, masks=None, slope=0.2, trace=None):
        h = dc.relu(graphconv(dc.const(g.node_features), g.edge_weights, P, "gc1"))
        return dc.row_max_pool(graphconv(h, g.edge_weights, P, "gc2"))


class GraphConvCrossAttention(CrossAttentionModel):
    """Proposed architecture with GraphConv in place of GATv2."""

    tag = "ablation-graphconv-crossatt"

    def shapes(self, dims):
        s = {}
        s.update(graphconv_shapes("gc1", dims.d_features, dims.hidden))
        s.update(cross_attention_shapes("cross1", dims.hidden, dims.d_clin))
        s.update(graphconv_shapes("gc2", dims.hidden, dims.hidden))
        s.update(cross_attention_shapes("cross2", dims.hidden, dims.d_clin))
        s.update(head_shapes(dims.hidden))
        return s

    def graph_layer(self, z, g, P, k, slope):
        return graphconv(z, g.edge_weights, P, f"gc{k}"), None


class ConcatFusion(CrossAttentionModel):
    """Proposed architecture with [z_i || c] @ proj instead of cross-attention."""

    tag = "ablation-concat-fusion"

    def shapes(self, dims):
        s = {}
        s.update(gatv2_shapes("gat1", dims.d_features, dims.hidden))
        s["proj1"] = (dims.hidden + dims.d_clin, dims.hidden)
        s.update(gatv2_shapes("gat2", dims.hidden, dims.hidden))
        s["proj2"] = (dims.hidden + dims.d_clin, dims.hidden)
        s.update(head_shapes(dims.hidden))
        return s

    def fuse(self, z, c_col, c_rows, P, k):
        n = z.value.shape[0]
        c_rows = dc.const(np.repeat(c_col.value.T, n, axis=0))
        return dc.matmul(dc.concat_cols(z, c_rows), P[f"proj{k}"]), None


VARIANTS: dict[str, Architecture] = {
    a.tag: a
    for a in (
        CROSS_ATTENTION,
        MLP("mlp-clinical", clinical=True, imaging=False),
        MLP("mlp-image-avg", clinical=False, imaging=True),
        MLP("mlp-clinical+image-avg", clinical=True, imaging=True),
        MIL(),
        GraphConvImage(),
        GraphConvCrossAttention(),
        ConcatFusion(),
    )
}


def get_variant(tag: str) -> Architecture:
    try:
        return VARIANTS[tag]
    except KeyError:
        raise ValueError(f"unknown variant {tag!r}; choose from {', '.join(VARIANTS)}") from None
