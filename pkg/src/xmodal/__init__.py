"""Cross-modal embedding alignment toolkit.

Aligns the embedding spaces of two modalities with training-free linear
maps (normal-equation least squares, orthogonal Procrustes via SVD), runs
exact cosine top-k retrieval with recall@k scoring over caption groups, and
optionally trains a gated-MLP projection head with an in-batch-negative
contrastive loss.
"""

__version__ = "0.1.0"

from .embstore import (
    EmbeddingMatrix,
    PairEntry,
    PairManifest,
    PairedDataset,
    PairedSide,
    align_pairs,
    l2_normalize_rows,
    load_emb,
    load_manifest,
    save_emb,
    save_manifest,
    split,
)
from .mapping import (
    LinearMap,
    SvdResult,
    apply_map,
    fit_least_squares,
    fit_procrustes,
    load_map,
    residual_frobenius,
    save_map,
    svd,
)
from .retrieval import (
    RecallReport,
    RetrievalIndex,
    build_index,
    evaluate_direction,
    recall_at_k,
    topk,
)
from .gmlp import (
    GmlpConfig,
    GmlpParams,
    TrainConfig,
    TrainResult,
    apply_head,
    backward,
    contrastive_loss,
    gmlp_forward,
    init_params,
    load_head,
    pool,
    save_head,
    train_head,
)

__all__ = [name for name in dir() if not name.startswith("_")]
