"""Exact top-k search over a gallery and recall@k scoring.

Similarity is cosine: rows are normalized when the index is built, queries
at search time, and scores are plain inner products after that. Raw inner
product is available behind ``metric="inner_product"`` for ablations (the
index keeps the original row norms, so nothing is lost by normalizing).

Ground truth for recall comes from group ids: a query scores a hit at k if
any gallery row sharing its group appears among the top k. Ties are broken
by ascending gallery row position, which keeps every ranking reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, NumericalError, ValidationError
from .embstore import EmbeddingMatrix, PairedDataset, PairedSide
from .mapping import LinearMap, apply_map

DIRECTION_TEXT_TO_IMAGE = "text_to_image"
DIRECTION_IMAGE_TO_TEXT = "image_to_text"
_DIRECTIONS = (DIRECTION_TEXT_TO_IMAGE, DIRECTION_IMAGE_TO_TEXT)

METRIC_COSINE = "cosine"
METRIC_INNER_PRODUCT = "inner_product"
_METRICS = (METRIC_COSINE, METRIC_INNER_PRODUCT)


@dataclass(frozen=True)
class RetrievalIndex:
    """Immutable gallery prepared for exact search: unit-norm rows plus groups."""

    values: np.ndarray  # (n, d) float64, rows unit norm
    row_norms: np.ndarray  # original norms, for the inner-product metric
    ids: tuple[str, ...]
    groups: tuple[str, ...]

    def __post_init__(self):
        for name in ("values", "row_norms"):
            arr = getattr(self, name)
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class RecallReport:
    """Recall values keyed by k for one retrieval direction."""

    per_k: dict[int, float]
    n_queries: int
    direction: str | None = None

    def __post_init__(self):
        ordered = dict(sorted(self.per_k.items()))
        values = list(ordered.values())
        if any(r < 0.0 or r > 1.0 for r in values):
            raise ValidationError("recall values must lie in [0, 1]")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValidationError("recall must be non-decreasing in k")
        object.__setattr__(self, "per_k", ordered)

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "n_queries": self.n_queries,
            "recall": {str(k): v for k, v in self.per_k.items()},
        }


def build_index(gallery: EmbeddingMatrix, groups) -> RetrievalIndex:
    """Normalize a copy of the gallery. The input matrix is left untouched."""
    groups = tuple(groups)
    if len(groups) != gallery.n:
        raise ArgumentError(
            f"got {len(groups)} groups for a gallery of {gallery.n} rows"
        )
    vals = gallery.values.astype(np.float64)
    norms = np.linalg.norm(vals, axis=1)
    if np.any(norms == 0.0):
        row = int(np.flatnonzero(norms == 0.0)[0])
        raise ValidationError(
            f"gallery row {row} ({gallery.ids[row]!r}) has zero norm and cannot be indexed"
        )
    return RetrievalIndex(
        values=vals / norms[:, None],
        row_norms=norms,
        ids=gallery.ids,
        groups=groups,
    )


def _normalized_queries(values: np.ndarray, ids) -> tuple[np.ndarray, np.ndarray]:
    vals = np.asarray(values, dtype=np.float64)
    norms = np.linalg.norm(vals, axis=1)
    if np.any(norms == 0.0):
        row = int(np.flatnonzero(norms == 0.0)[0])
        label = f" ({ids[row]!r})" if ids is not None else ""
        raise NumericalError(f"query row {row}{label} has zero norm")
    return vals / norms[:, None], norms


def _score(queries_unit, query_norms, index: RetrievalIndex, metric: str) -> np.ndarray:
    if metric not in _METRICS:
        raise ArgumentError(f"unknown metric {metric!r}")
    scores = queries_unit @ index.values.T
    if metric == METRIC_INNER_PRODUCT:
        scores = scores * query_norms[:, None] * index.row_norms[None, :]
    return scores


def topk(query, index: RetrievalIndex, k: int, metric: str = METRIC_COSINE):
    """Exact top-k rows for one query, as (row id, score) pairs, best first."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.d:
        raise ArgumentError(
            f"query dimension {q.shape[0]} does not match gallery dimension {index.d}"
        )
    if not 1 <= k <= index.n:
        raise ArgumentError(f"k={k} out of range for a gallery of {index.n} rows")
    unit, norms = _normalized_queries(q[None, :], None)
    scores = _score(unit, norms, index, metric)[0]
    order = np.argsort(-scores, kind="stable")[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def recall_at_k(
    queries: EmbeddingMatrix,
    query_groups,
    index: RetrievalIndex,
    ks,
    direction: str | None = None,
    metric: str = METRIC_COSINE,
) -> RecallReport:
    """Fraction of queries with at least one same-group gallery row in the top k."""
    query_groups = tuple(query_groups)
    if queries.n == 0:
        raise ArgumentError("no queries to evaluate")
    if len(query_groups) != queries.n:
        raise ArgumentError(
            f"got {len(query_groups)} query groups for {queries.n} queries"
        )
    ks = [int(k) for k in ks]
    if not ks:
        raise ArgumentError("need at least one k")
    for k in ks:
        if not 1 <= k <= index.n:
            raise ArgumentError(f"k={k} out of range for a gallery of {index.n} rows")

    unit, norms = _normalized_queries(queries.values, queries.ids)
    scores = _score(unit, norms, index, metric)
    order = np.argsort(-scores, axis=1, kind="stable")

    gallery_groups = np.asarray(index.groups, dtype=object)
    relevant = gallery_groups[order] == np.asarray(query_groups, dtype=object)[:, None]
    any_hit = relevant.any(axis=1)
    first_hit = np.where(any_hit, relevant.argmax(axis=1), index.n)

    per_k = {k: float(np.mean(first_hit < k)) for k in ks}
    return RecallReport(per_k=per_k, n_queries=queries.n, direction=direction)


def _dedup_side(side: PairedSide, groups) -> tuple[EmbeddingMatrix, tuple[str, ...]]:
    """Collapse repeated ids (one image paired with five captions) to single rows."""
    seen: dict[str, int] = {}
    keep, keep_groups = [], []
    for i, row_id in enumerate(side.ids):
        if row_id in seen:
            if groups[seen[row_id]] != groups[i]:
                raise ValidationError(
                    f"row id {row_id!r} appears in conflicting groups "
                    f"{groups[seen[row_id]]!r} and {groups[i]!r}"
                )
            continue
        seen[row_id] = i
        keep.append(i)
        keep_groups.append(groups[i])
    matrix = EmbeddingMatrix(
        values=side.values[np.asarray(keep, dtype=np.intp)],
        ids=tuple(side.ids[i] for i in keep),
    )
    return matrix, tuple(keep_groups)


def evaluate_direction(
    test: PairedDataset,
    linmap: LinearMap,
    direction: str,
    ks,
    metric: str = METRIC_COSINE,
) -> RecallReport:
    """Score one retrieval direction of a held-out paired dataset.

    The source side is mapped and queries the target side. Repeated rows on
    either side (a target image listed once per caption) are collapsed before
    evaluation, so an image-to-text gallery holds every caption exactly once
    and a text-to-image gallery holds each image once.
    """
    if direction not in _DIRECTIONS:
        raise ArgumentError(f"unknown direction {direction!r}")
    if test.n == 0:
        raise ArgumentError("empty paired dataset")
    if linmap.d_src != test.src.d or linmap.d_tgt != test.tgt.d:
        raise ArgumentError(
            f"map is {linmap.d_src}x{linmap.d_tgt} but the dataset pairs "
            f"{test.src.d}-dim sources with {test.tgt.d}-dim targets"
        )
    queries, query_groups = _dedup_side(test.src, test.groups)
    gallery, gallery_groups = _dedup_side(test.tgt, test.groups)
    mapped = apply_map(linmap, queries)
    index = build_index(gallery, gallery_groups)
    return recall_at_k(
        mapped, query_groups, index, ks, direction=direction, metric=metric
    )
