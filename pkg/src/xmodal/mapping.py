"""Training-free linear maps between two embedding spaces.

Two fitting routes, both closed-form:

* ridge-regularized least squares through the normal equations,
  (src' src + lambda I) M = src' tgt, solved by Cholesky;
* orthogonal Procrustes, min ||src M - tgt||_F subject to M' M = I,
  whose minimizer is U V' from the SVD of src' tgt.

The SVD is a from-scratch one-sided Jacobi: cyclic plane rotations
orthogonalize the columns of a working copy until every column pair's
relative inner product falls below 1e-12, capped at 60 sweeps. Simple,
dependency-free, and accurate well past the tolerances required here for
matrices up to ~1024 x 1024. Left singular vectors get a deterministic sign
(largest-magnitude entry positive, ties to the lower index) so repeated fits
are bitwise identical.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    ArgumentError,
    CorruptionError,
    FormatError,
    IllConditionedError,
    NumericalError,
    ValidationError,
)
from .embstore import EmbeddingMatrix

METHOD_LEAST_SQUARES = "least_squares"
METHOD_PROCRUSTES = "procrustes"
_METHODS = (METHOD_LEAST_SQUARES, METHOD_PROCRUSTES)

_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60
_COND_LIMIT = 1e12
_ORTHO_TOL = 1e-6

_MAP_MAGIC = b"XMAP"
_MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sIBdQQ")
_METHOD_CODES = {METHOD_LEAST_SQUARES: 1, METHOD_PROCRUSTES: 2}
_CODE_METHODS = {v: k for k, v in _METHOD_CODES.items()}


@dataclass(frozen=True)
class LinearMap:
    """A fitted d_src x d_tgt map, stored in float64.

    Procrustes maps are validated to be orthogonal (||M'M - I||_F < 1e-6) on
    construction and again whenever one is loaded from disk.
    """

    matrix: np.ndarray
    method: str
    lam: float = 0.0

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ArgumentError(f"unknown map method {self.method!r}")
        if self.lam < 0:
            raise ArgumentError("ridge coefficient must be >= 0")
        mat = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if mat.ndim != 2:
            raise ValidationError(f"map matrix must be 2-D, got shape {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise ValidationError("map matrix contains non-finite entries")
        if self.method == METHOD_PROCRUSTES:
            if mat.shape[0] != mat.shape[1]:
                raise ValidationError("a procrustes map must be square")
            dev = np.linalg.norm(mat.T @ mat - np.eye(mat.shape[0]))
            if dev >= _ORTHO_TOL:
                raise ValidationError(
                    f"procrustes map is not orthogonal (||M'M - I||_F = {dev:.3e})"
                )
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)

    @property
    def d_src(self) -> int:
        return self.matrix.shape[0]

    @property
    def d_tgt(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class SvdResult:
    """Factorization a = u @ diag(sigma) @ v.T with orthogonal u, v."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(sigma < 0):
            raise ValidationError("singular values must be non-negative")
        if np.any(np.diff(sigma) > 0):
            raise ValidationError("singular values must be sorted descending")
        object.__setattr__(self, "sigma", sigma)


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ArgumentError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def svd(a) -> SvdResult:
    """One-sided Jacobi SVD of a square matrix.

    Raises :class:`NumericalError` if the sweep cap is hit before the largest
    relative off-diagonal inner product drops below 1e-12.
    """
    a = _as_matrix(a, "svd input")
    if a.shape[0] != a.shape[1]:
        raise ArgumentError(f"svd expects a square matrix, got {a.shape}")
    d = a.shape[0]
    m = a.copy()
    v = np.eye(d)

    off = 0.0
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = 0.0
        for p in range(d - 1):
            for q in range(p + 1, d):
                mp = m[:, p]
                mq = m[:, q]
                gamma = float(mp @ mq)
                alpha = float(mp @ mp)
                beta = float(mq @ mq)
                denom = math.sqrt(alpha * beta)
                if denom == 0.0:
                    continue  # a zero column is orthogonal to everything
                rel = abs(gamma) / denom
                if rel <= _JACOBI_TOL:
                    continue
                off = max(off, rel)
                theta = 0.5 * math.atan2(2.0 * gamma, alpha - beta)
                c = math.cos(theta)
                s = math.sin(theta)
                m[:, p], m[:, q] = c * mp + s * mq, c * mq - s * mp
                v[:, p], v[:, q] = c * v[:, p] + s * v[:, q], c * v[:, q] - s * v[:, p]
        if off == 0.0:
            break
    else:
        raise NumericalError(
            f"jacobi svd did not converge in {_JACOBI_MAX_SWEEPS} sweeps "
            f"(off-diagonal residual {off:.3e})"
        )

    sigma = np.linalg.norm(m, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    m = m[:, order]
    v = v[:, order]

    u = np.zeros_like(m)
    nonzero = sigma > 0.0
    u[:, nonzero] = m[:, nonzero] / sigma[nonzero]
    for j in np.flatnonzero(~nonzero):
        u[:, j] = _orthonormal_filler(u, j)

    # Deterministic sign: largest-magnitude entry of each left vector positive.
    for j in range(d):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]

    return SvdResult(u=u, sigma=sigma, v=v)


def _orthonormal_filler(u: np.ndarray, j: int) -> np.ndarray:
    """Unit vector orthogonal to u[:, :j], built from the first viable basis vector."""
    d = u.shape[0]
    basis = u[:, :j]
    for i in range(d):
        cand = np.zeros(d)
        cand[i] = 1.0
        cand -= basis @ (basis.T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            return cand / norm
    raise NumericalError("failed to complete an orthonormal basis")  # pragma: no cover


def fit_least_squares(src, tgt, lam: float = 0.0) -> LinearMap:
    """Solve (src' src + lambda I) M = src' tgt for the map M.

    With lambda = 0 this is the plain normal-equation solution, and the Gram
    matrix must be comfortably invertible: a condition estimate above 1e12
    raises :class:`IllConditionedError` instead of silently falling back to a
    pseudo-inverse.
    """
    src = _as_matrix(src, "src")
    tgt = _as_matrix(tgt, "tgt")
    if src.shape[0] != tgt.shape[0]:
        raise ArgumentError(
            f"src has {src.shape[0]} rows but tgt has {tgt.shape[0]}"
        )
    if src.shape[0] < 1:
        raise ArgumentError("need at least one paired row to fit")
    if lam < 0:
        raise ArgumentError("ridge coefficient must be >= 0")

    gram = src.T @ src
    if lam == 0.0:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise IllConditionedError(
                f"gram matrix condition estimate {cond:.3e} exceeds {_COND_LIMIT:.0e}; "
                "pass a ridge coefficient > 0"
            )
    else:
        gram = gram + lam * np.eye(src.shape[1])
    rhs = src.T @ tgt
    try:
        chol = scipy.linalg.cho_factor(gram, lower=True)
        phi = scipy.linalg.cho_solve(chol, rhs)
    except scipy.linalg.LinAlgError:
        phi = np.linalg.solve(gram, rhs)
    return LinearMap(matrix=phi, method=METHOD_LEAST_SQUARES, lam=float(lam))


def fit_procrustes(src, tgt) -> LinearMap:
    """Closed-form orthogonal map minimizing ||src M - tgt||_F over M'M = I."""
    src = _as_matrix(src, "src")
    tgt = _as_matrix(tgt, "tgt")
    if src.shape[0] != tgt.shape[0]:
        raise ArgumentError(
            f"src has {src.shape[0]} rows but tgt has {tgt.shape[0]}"
        )
    if src.shape[1] != tgt.shape[1]:
        raise ArgumentError(
            f"procrustes needs equal dimensions, got {src.shape[1]} and {tgt.shape[1]}"
        )
    if src.shape[0] < 1:
        raise ArgumentError("need at least one paired row to fit")
    result = svd(src.T @ tgt)
    psi = result.u @ result.v.T
    return LinearMap(matrix=psi, method=METHOD_PROCRUSTES)


def apply_map(linmap: LinearMap, src: EmbeddingMatrix) -> EmbeddingMatrix:
    """Project every row of ``src`` through the map, keeping ids."""
    if src.d != linmap.d_src:
        raise ArgumentError(
            f"matrix dimension {src.d} does not match map input dimension {linmap.d_src}"
        )
    out = src.values.astype(np.float64) @ linmap.matrix
    return EmbeddingMatrix(values=out.astype(np.float32), ids=src.ids)


def residual_frobenius(linmap: LinearMap, src, tgt) -> float:
    """||src M - tgt||_F in float64, the quantity both fits minimize."""
    src = _as_matrix(src, "src")
    tgt = _as_matrix(tgt, "tgt")
    return float(np.linalg.norm(src @ linmap.matrix - tgt))


def save_map(linmap: LinearMap, path) -> None:
    """Write a map in the XMAP container (lossless float64)."""
    header = _MAP_HEADER.pack(
        _MAP_MAGIC,
        _MAP_VERSION,
        _METHOD_CODES[linmap.method],
        linmap.lam,
        linmap.d_src,
        linmap.d_tgt,
    )
    Path(path).write_bytes(header + linmap.matrix.astype("<f8").tobytes(order="C"))


def load_map(path) -> LinearMap:
    data = Path(path).read_bytes()
    if data[:4] != _MAP_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {_MAP_MAGIC!r}")
    if len(data) < _MAP_HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, version, code, lam, d_src, d_tgt = _MAP_HEADER.unpack_from(data, 0)
    if version != _MAP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_METHODS:
        raise FormatError(f"{path}: unknown method code {code}")
    expected = _MAP_HEADER.size + d_src * d_tgt * 8
    if len(data) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} bytes for a {d_src}x{d_tgt} map, got {len(data)}"
        )
    matrix = np.frombuffer(data, dtype="<f8", count=d_src * d_tgt, offset=_MAP_HEADER.size)
    return LinearMap(
        matrix=matrix.reshape(d_src, d_tgt).copy(),
        method=_CODE_METHODS[code],
        lam=lam,
    )
