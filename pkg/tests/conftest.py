import numpy as np

from xmodal import EmbeddingMatrix, PairedDataset, PairedSide


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-fixed QR."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def make_matrix(values, prefix="r") -> EmbeddingMatrix:
    values = np.asarray(values, dtype=np.float32)
    return EmbeddingMatrix(values, tuple(f"{prefix}{i}" for i in range(len(values))))


def make_paired(src_values, tgt_values, groups=None) -> PairedDataset:
    src_values = np.asarray(src_values, dtype=np.float32)
    tgt_values = np.asarray(tgt_values, dtype=np.float32)
    n = len(src_values)
    if groups is None:
        groups = tuple(f"g{i}" for i in range(n))
    return PairedDataset(
        src=PairedSide(src_values, tuple(f"s{i}" for i in range(n))),
        tgt=PairedSide(tgt_values, tuple(f"t{i}" for i in range(n))),
        groups=tuple(groups),
    )
