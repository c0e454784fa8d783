"""Point cloud instance segmentation with a shared 3D/text embedding space."""

from ._core import (
    Checkpoint,
    Error,
    PointCloud,
    TextEmbeddingTable,
    adjusted_rand_index,
    category_names,
    dbscan,
    generate_scene,
    gradcheck,
    knn,
    label,
    mean_shift,
    query,
    radius_linkage,
    read_cloud,
    read_scene,
    segment,
    train_alignment,
    train_segnet,
    write_cloud,
)

__all__ = [
    "Checkpoint",
    "Error",
    "PointCloud",
    "TextEmbeddingTable",
    "adjusted_rand_index",
    "category_names",
    "dbscan",
    "generate_scene",
    "gradcheck",
    "knn",
    "label",
    "mean_shift",
    "query",
    "radius_linkage",
    "read_cloud",
    "read_scene",
    "segment",
    "train_alignment",
    "train_segnet",
    "write_cloud",
]
