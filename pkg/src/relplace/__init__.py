"""Cross-pose prediction for relative placement tasks.

Predicts the SE(3) transform that moves one object into a demonstrated goal
configuration relative to another, from their point clouds alone. The pipeline
is invariant per-point features -> cross-attention -> a symmetric positive
kernel of pairwise goal distances -> closed-form multilateration -> weighted
Procrustes alignment, and is SE(3)-equivariant end to end by construction.
"""

__version__ = "0.1.0"
