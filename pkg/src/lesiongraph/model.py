"""GATv2 + clinical cross-attention network, training loop and checkpoints."""

from __future__ import annotations

import ast
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamSet
from .graphbuild import LesionGraph
from .metrics import balanced_auc, balanced_subsets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dims:
    d_features: int
    d_clin: int
    hidden: int


@dataclass(frozen=True)
class HyperParams:
    lr: float = 1e-3
    hidden: int = 32
    gamma: float = 1.0
    dropout: float = 0.2
    epochs: int = 100
    slope: float = 0.2
    patience: int | None = None  # stop after this many epochs without a new best


def glorot_init(params: ParamSet, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform for weights, zeros for anything named ``*bias``."""
    for name in params.names():
        v = params[name]
        if name.endswith("bias"):
            v[...] = 0.0
            continue
        fan_in, fan_out = v.shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        v[...] = rng.uniform(-limit, limit, size=v.shape)
    return params


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def gatv2_shapes(prefix: str, d_in: int, d_out: int) -> dict[str, tuple[int, int]]:
    # stored transposed relative to the column-vector convention: rows @ W
    return {
        f"{prefix}.src": (d_in, d_out),
        f"{prefix}.dst": (d_in, d_out),
        f"{prefix}.edge": (1, d_out),
        f"{prefix}.att": (d_out, 1),
    }


def gatv2(z: Node, w: np.ndarray, P: dict[str, Node], prefix: str, slope: float) -> tuple[Node, Node]:
    """Edge-weighted GATv2 over a fully connected graph with self-loops.

    score(i, j) = att . LeakyReLU(src z_i + dst z_j + edge w_ij), softmax over j,
    output_i = sum_j alpha_ij dst z_j. Returns (output, alpha).
    """
    n = z.value.shape[0]
    s = dc.matmul(z, P[f"{prefix}.src"])
    t = dc.matmul(z, P[f"{prefix}.dst"])
    h = dc.leaky_relu(dc.pairwise_add(s, t, w, P[f"{prefix}.edge"]), slope)
    scores = dc.reshape(dc.matmul(h, P[f"{prefix}.att"]), n, n)
    alpha = dc.row_softmax(scores)
    return dc.matmul(alpha, t), alpha


def cross_attention_shapes(prefix: str, d_gat: int, d_clin: int) -> dict[str, tuple[int, int]]:
    return {f"{prefix}.q": (d_gat, d_clin), f"{prefix}.k": (1, d_clin), f"{prefix}.v": (1, d_gat)}


def cross_attention(z: Node, c_col: Node, P: dict[str, Node], prefix: str) -> tuple[Node, Node]:
    """softmax(Z Wq (c Wk)^T / sqrt(d_k)) (c Wv) with c as a column vector.

    K and V are rank-one expansions of the clinical vector, so the attention
    matrix is (L, D_clin) and the output (L, D_GAT). Returns (output, attention).
    """
    d_k = c_col.value.shape[0]
    q = dc.matmul(z, P[f"{prefix}.q"])
    k = dc.matmul(c_col, P[f"{prefix}.k"])
    v = dc.matmul(c_col, P[f"{prefix}.v"])
    a = dc.row_softmax(dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(d_k)))
    return dc.matmul(a, v), a


def head_shapes(d_in: int) -> dict[str, tuple[int, int]]:
    return {"head.w": (d_in, 1), "head.bias": (1, 1)}


def head(z: Node, P: dict[str, Node]) -> Node:
    """Max-pool over lesions, then a linear map to one logit."""
    return dc.add(dc.matmul(dc.row_max_pool(z), P["head.w"]), P["head.bias"])


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------


class Architecture:
    """A model variant: parameter layout plus a logit-producing forward graph."""

    tag = ""
    uses_graph = True
    uses_gamma = True
    uses_dropout = True
    n_blocks = 2

    def shapes(self, dims: Dims) -> dict[str, tuple[int, int]]:
        raise NotImplementedError

    def logit(self, g: LesionGraph, P: dict[str, Node], masks=None, slope: float = 0.2, trace=None) -> Node:
        raise NotImplementedError

    def mask_shapes(self, g: LesionGraph, dims: Dims) -> list[tuple[int, int]]:
        return [(g.n_nodes, dims.hidden)] * self.n_blocks if self.uses_dropout else []

    def init_params(self, dims: Dims, rng: np.random.Generator) -> ParamSet:
        return glorot_init(ParamSet(self.shapes(dims)), rng)


def _mask(masks, k):
    return None if masks is None else masks[k]


class CrossAttentionModel(Architecture):
    """Two (GATv2 -> ReLU -> clinical cross-attention) blocks and a max-pool head."""

    tag = "cross-attention"

    def shapes(self, dims: Dims) -> dict[str, tuple[int, int]]:
        s = {}
        s.update(gatv2_shapes("gat1", dims.d_features, dims.hidden))
        s.update(cross_attention_shapes("cross1", dims.hidden, dims.d_clin))
        s.update(gatv2_shapes("gat2", dims.hidden, dims.hidden))
        s.update(cross_attention_shapes("cross2", dims.hidden, dims.d_clin))
        s.update(head_shapes(dims.hidden))
        return s

    def graph_layer(self, z, g, P, k, slope):
        return gatv2(z, g.edge_weights, P, f"gat{k}", slope)

    def fuse(self, z, c_col, c_rows, P, k):
        return cross_attention(z, c_col, P, f"cross{k}")

    def logit(self, g, P, masks=None, slope=0.2, trace=None):
        z = dc.const(g.node_features)
        c_col = dc.const(g.clinical.reshape(-1, 1))
        c_rows = None
        for k in (1, 2):
            z, alpha = self.graph_layer(z, g, P, k, slope)
            z = dc.relu(dc.dropout(z, _mask(masks, k - 1)))
            z, att = self.fuse(z, c_col, c_rows, P, k)
            if trace is not None:
                trace[f"graph{k}"] = alpha.value if alpha is not None else None
                trace[f"fusion{k}"] = att.value if att is not None else None
        return head(z, P)


CROSS_ATTENTION = CrossAttentionModel()


# ---------------------------------------------------------------------------
# loss, prediction, training
# ---------------------------------------------------------------------------


def weighted_bce(pred: float, label: int, pos_weight: float) -> float:
    return float(dc.weighted_bce(dc.const(pred), label, pos_weight).value[0, 0])


def pos_weight_for(labels: Sequence[int]) -> float:
    y = np.asarray(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("training split has no positive patient")
    return float((y.size - n_pos) / n_pos)


def eval_nodes(params: ParamSet) -> dict[str, Node]:
    return {k: Node("input", (), v, False, name=k) for k, v in params.views.items()}


def score(arch: Architecture, g: LesionGraph, params: ParamSet, slope: float = 0.2, trace=None) -> float:
    """Eval-mode logit; used for ranking (AUC) since it never saturates."""
    out = arch.logit(g, eval_nodes(params), None, slope, trace)
    v = float(out.value[0, 0])
    if not math.isfinite(v):
        raise dc.NumericError(f"{arch.tag}: non-finite output for patient {g.patient_id}")
    return v


def predict(arch: Architecture, g: LesionGraph, params: ParamSet, slope: float = 0.2) -> float:
    """Eval-mode probability of progression within two years."""
    return float(dc.sigmoid(dc.const(score(arch, g, params, slope))).value[0, 0])


def loss_graph(arch, g, nodes, pos_weight, masks=None, slope=0.2) -> Node:
    prob = dc.sigmoid(arch.logit(g, nodes, masks, slope))
    return dc.weighted_bce(prob, g.label, pos_weight)


class TrainingDiverged(dc.NumericError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    val_auc: float


@dataclass
class TrainResult:
    params: ParamSet
    best_epoch: int
    best_val_auc: float
    history: list[EpochMetrics] = field(default_factory=list)


def dims_for(graphs: Sequence[LesionGraph], hidden: int) -> Dims:
    g = graphs[0]
    return Dims(g.node_features.shape[1], g.clinical.shape[0], hidden)


def train(
    arch: Architecture,
    train_graphs: Sequence[LesionGraph],
    val_graphs: Sequence[LesionGraph],
    hp: HyperParams,
    seed,
    val_seed=None,
    val_k: int = 5,
) -> TrainResult:
    """Per-patient Adam steps; keep the snapshot with the best balanced validation AUC.

    ``seed`` and ``val_seed`` are integers or integer tuples fed to
    ``np.random.default_rng``. Validation subsets for epoch e come from
    ``val_seed + (e,)`` so every grid point sees the same subsets.
    """
    seed = tuple(np.atleast_1d(seed).tolist())
    val_seed = seed if val_seed is None else tuple(np.atleast_1d(val_seed).tolist())
    train_ids = {g.patient_id for g in train_graphs}
    if train_ids & {g.patient_id for g in val_graphs}:
        raise ValueError("training and validation patients overlap")
    dims = dims_for(train_graphs, hp.hidden)
    params = arch.init_params(dims, np.random.default_rng(seed + (0,)))
    order_rng = np.random.default_rng(seed + (1,))
    drop_rng = np.random.default_rng(seed + (2,))
    pw = pos_weight_for([g.label for g in train_graphs])
    state = dc.AdamState(lr=hp.lr)
    p_drop = hp.dropout if arch.uses_dropout else 0.0

    val_ids = [g.patient_id for g in val_graphs]
    val_labels = {g.patient_id: g.label for g in val_graphs}

    def val_auc(ps: ParamSet, epoch: int) -> float:
        rng = np.random.default_rng(val_seed + (epoch,))
        subsets = balanced_subsets(val_ids, [val_labels[i] for i in val_ids], val_k, rng)
        scores = {g.patient_id: score(arch, g, ps, hp.slope) for g in val_graphs}
        return balanced_auc(scores, val_labels, subsets)

    best = params.copy()
    best_epoch = 0
    best_auc = -math.inf
    history: list[EpochMetrics] = []
    for epoch in range(1, hp.epochs + 1):
        total = 0.0
        for idx in order_rng.permutation(len(train_graphs)):
            g = train_graphs[idx]
            nodes = params.nodes()
            masks = None
            if p_drop > 0:
                masks = [dc.dropout_mask(drop_rng, s, p_drop) for s in arch.mask_shapes(g, dims)]
            loss = loss_graph(arch, g, nodes, pw, masks, hp.slope)
            lv = float(loss.value[0, 0])
            if not math.isfinite(lv):
                raise TrainingDiverged(
                    f"{arch.tag}: non-finite loss at epoch {epoch}, patient {g.patient_id}, "
                    f"lr={hp.lr}, hidden={hp.hidden}, |params|max={np.abs(params.flat).max():.3g}"
                )
            total += lv
            dc.backward(loss)
            dc.adam_step(state, params, params.gather_grads(nodes))
        auc = val_auc(params, epoch)
        history.append(EpochMetrics(epoch, total / len(train_graphs), auc))
        if auc > best_auc:
            best_auc, best_epoch, best = auc, epoch, params.copy()
        elif hp.patience is not None and epoch - best_epoch >= hp.patience:
            break
    if hp.epochs == 0:
        best_auc = val_auc(params, 0) if val_graphs else math.nan
    return TrainResult(best, best_epoch, best_auc, history)


# ---------------------------------------------------------------------------
# checkpoints: textual key -> matrix map
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    variant: str
    hp: HyperParams
    params: ParamSet
    extra: dict[str, np.ndarray] = field(default_factory=dict)  # e.g. preprocessing statistics


def _matrix_lines(kind: str, name: str, m: np.ndarray) -> list[str]:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    return [f"{kind} {name} {m.shape[0]} {m.shape[1]}"] + [" ".join(repr(float(x)) for x in row) for row in m]


def save_checkpoint(path, ckpt: Checkpoint, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines.append(f"variant {ckpt.variant}")
    for k, v in asdict(ckpt.hp).items():
        lines.append(f"hp {k} {v!r}")
    for name in ckpt.params.names():
        lines += _matrix_lines("param", name, ckpt.params[name])
    for name, m in ckpt.extra.items():
        lines += _matrix_lines("array", name, m)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    variant = None
    hp_fields: dict = {}
    mats: dict[str, dict[str, np.ndarray]] = {"param": {}, "array": {}}
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    i = 0
    try:
        while i < len(lines):
            parts = lines[i].split()
            if parts[0] == "variant":
                variant = parts[1]
            elif parts[0] == "hp":
                hp_fields[parts[1]] = ast.literal_eval(parts[2])
            elif parts[0] in mats:
                r, c = int(parts[2]), int(parts[3])
                rows = [[float(x) for x in lines[i + 1 + k].split()] for k in range(r)]
                mats[parts[0]][parts[1]] = np.array(rows, dtype=np.float64).reshape(r, c)
                i += r
            else:
                raise ValueError(f"unexpected line {lines[i]!r}")
            i += 1
        hp = HyperParams(**hp_fields)
    except (IndexError, ValueError, SyntaxError, TypeError) as exc:
        raise ValueError(f"checkpoint {path}: {exc}") from None
    if variant is None:
        raise ValueError(f"checkpoint {path}: missing variant line")
    params = ParamSet({k: v.shape for k, v in mats["param"].items()})
    for k, v in mats["param"].items():
        params[k][...] = v
    return Checkpoint(variant, hp, params, mats["array"])
