"""gridmil: spatially regularized multiple-instance learning on patch graphs.

A from-scratch graph-attention MIL model trained with joint masked feature
reconstruction and bag-level classification, plus a synthetic benchmark
generator and an evaluation kit (AUC, KNN probe, attention diagnostics,
ablations).
"""

__version__ = "0.1.0"
