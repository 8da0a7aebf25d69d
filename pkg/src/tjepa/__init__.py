"""Self-supervised trajectory embeddings over grid cells.

Pipeline: map GPS trajectories onto a grid, pretrain cell embeddings from
random walks, enrich them with a learned neighborhood mix, then train a
joint-embedding predictive model whose context encoder doubles as the
trajectory embedder. Heuristic distances (EDR, LCSS, Hausdorff, discrete
Frechet) serve as ground truth for search and fine-tuning protocols.
"""

__version__ = "0.1.0"
