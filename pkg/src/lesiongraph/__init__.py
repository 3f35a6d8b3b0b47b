"""Lesion graphs, GATv2 message passing and clinical cross-attention fusion.

Modules:
    diffcore    reverse-mode autodiff over 2-D float64 arrays, gradient checks, Adam
    cohort      patient records, CSV ingestion, robust scaling
    graphbuild  fully connected lesion graphs with distance-kernel edge weights
    model       the GATv2 + cross-attention network, training, checkpoints
    baselines   MLPs, MIL, GraphConv and the two ablations
    metrics     ROC AUC, balanced subsets, Welch's t-test
    protocol    repeated splits, grid search, reports
    synth       seeded synthetic cohorts with a planted signal
    cli         the ``lesiongraph`` command
"""

__version__ = "0.1.0"
