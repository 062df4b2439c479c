"""Similarity, redundancy-aware fusion and downstream evaluation for multi-encoder embeddings."""

from .store import EmbeddingMatrix, SlideBag, BagDataset, SlideVectorDataset
from .simgauge import MetricConfig, linear_cka, svcca, procrustes_distance, knn_jaccard, ridge_cross_r2, similarity_report
from .prune import concat_encoders, rank_features, correlation_prune, sweep_thetas, apply_signature, majority_vote, common_features
from .evalkit import make_splits, compute_metrics, bootstrap_compare, significance_tier
from .lens import percentile_mask, dice, region_coverage, silhouette, compactness, clustering_bootstrap
from .tsne import tsne

__version__ = "0.1.0"
