"""Embedding matrices: on-disk format, normalization, pairing, and splits.

The EMB1 container (all little-endian):

    magic     4 bytes   b"EMB1"
    version   u32       1
    n         u64       row count
    d         u64       embedding dimension
    dtype     u8        1 = float32
    reserved  7 bytes   zeros
    payload   n*d float32 values, row-major
    id table  per row: u16 byte length, then that many UTF-8 bytes

Values are stored in 32-bit precision (matching what encoders emit);
solvers upcast to 64-bit internally. Encoding is canonical, so writing a
loaded matrix reproduces the input file byte for byte.

Pair manifests are JSONL sidecars: one object per line with keys
"src", "tgt", "group". Keeping them outside EMB1 lets one embedding file
serve multiple pairings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArgumentError,
    CorruptionError,
    FormatError,
    UnknownIdError,
    ValidationError,
)

_MAGIC = b"EMB1"
_VERSION = 1
_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIQQB7x")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """An n x d block of embedding vectors with one unique string id per row.

    ``values`` is float32, C-contiguous, and marked read-only; instances are
    safe to share across threads.
    """

    values: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise ValidationError(f"embedding values must be 2-D, got shape {vals.shape}")
        if vals.shape[1] < 1:
            raise ValidationError("embedding dimension must be >= 1")
        ids = tuple(self.ids)
        if len(ids) != vals.shape[0]:
            raise ValidationError(
                f"id count {len(ids)} does not match row count {vals.shape[0]}"
            )
        if len(set(ids)) != len(ids):
            dup = _first_duplicate(ids)
            raise ValidationError(f"duplicate row id {dup!r}")
        if vals.size and not np.all(np.isfinite(vals)):
            row = int(np.argwhere(~np.isfinite(vals))[0][0])
            raise ValidationError(f"non-finite value in row {row} ({ids[row]!r})")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def row(self, row_id: str) -> np.ndarray:
        try:
            return self.values[self.ids.index(row_id)]
        except ValueError:
            raise UnknownIdError(f"unknown row id {row_id!r}") from None


@dataclass(frozen=True)
class PairEntry:
    src_id: str
    tgt_id: str
    group_id: str


@dataclass(frozen=True)
class PairManifest:
    """Row correspondence between a source and a target matrix.

    A group is one semantic unit: it may pair several source rows (e.g. five
    captions) with a single target row (their image), or vice versa.
    """

    entries: tuple[PairEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        for i, e in enumerate(entries):
            if not e.group_id:
                raise ValidationError(f"manifest entry {i} has an empty group id")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class PairedSide:
    """One side of a paired dataset.

    Unlike :class:`EmbeddingMatrix`, ids may repeat: a target row paired with
    five captions appears five times, once per pair.
    """

    values: np.ndarray
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise ValidationError(f"paired values must be 2-D, got shape {vals.shape}")
        ids = tuple(self.ids)
        if len(ids) != vals.shape[0]:
            raise ValidationError("paired side ids do not match row count")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PairedDataset:
    """Row-aligned source/target pairs; row i of src corresponds to row i of tgt."""

    src: PairedSide
    tgt: PairedSide
    groups: tuple[str, ...]

    def __post_init__(self):
        groups = tuple(self.groups)
        if not (self.src.n == self.tgt.n == len(groups)):
            raise ValidationError(
                f"paired dataset misaligned: src {self.src.n} rows, "
                f"tgt {self.tgt.n} rows, {len(groups)} groups"
            )
        object.__setattr__(self, "groups", groups)

    @property
    def n(self) -> int:
        return self.src.n

    def take(self, rows: np.ndarray) -> "PairedDataset":
        """New dataset containing the given rows, in the given order."""
        idx = np.asarray(rows, dtype=np.intp)
        return PairedDataset(
            src=PairedSide(self.src.values[idx], tuple(self.src.ids[i] for i in idx)),
            tgt=PairedSide(self.tgt.values[idx], tuple(self.tgt.ids[i] for i in idx)),
            groups=tuple(self.groups[i] for i in idx),
        )


def _first_duplicate(ids):
    seen = set()
    for s in ids:
        if s in seen:
            return s
        seen.add(s)
    return None


def save_emb(m: EmbeddingMatrix, path) -> None:
    """Write ``m`` to ``path`` in EMB1 format."""
    if m.n < 1:
        raise ValidationError("refusing to save an empty matrix")
    parts = [_HEADER.pack(_MAGIC, _VERSION, m.n, m.d, _DTYPE_F32)]
    parts.append(m.values.astype("<f4", copy=False).tobytes(order="C"))
    for row_id in m.ids:
        enc = row_id.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise ValidationError(f"row id longer than 65535 bytes: {row_id[:40]!r}...")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
    Path(path).write_bytes(b"".join(parts))


def load_emb(path) -> EmbeddingMatrix:
    """Read an EMB1 file, validating every invariant of the format."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header ({len(data)} bytes)")
    _, version, n, d, dtype = _HEADER.unpack_from(data, 0)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if data[25:32] != b"\x00" * 7:
        raise FormatError(f"{path}: reserved header bytes are not zero")
    if n < 1 or d < 1:
        raise ValidationError(f"{path}: invalid dimensions n={n}, d={d}")

    offset = _HEADER.size
    payload_bytes = n * d * 4
    if len(data) < offset + payload_bytes:
        raise CorruptionError(
            f"{path}: payload truncated, need {payload_bytes} bytes after header, "
            f"have {len(data) - offset}"
        )
    values = np.frombuffer(data, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += payload_bytes

    ids = []
    for i in range(n):
        if offset + 2 > len(data):
            raise CorruptionError(f"{path}: id table truncated at record {i}")
        (length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + length > len(data):
            raise CorruptionError(f"{path}: id {i} truncated")
        try:
            ids.append(data[offset : offset + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"{path}: id {i} is not valid UTF-8") from exc
        offset += length
    if offset != len(data):
        raise CorruptionError(f"{path}: {len(data) - offset} trailing bytes after id table")

    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise ValidationError(f"{path}: non-finite value at row {bad[0]}, column {bad[1]}")
    return EmbeddingMatrix(values=values.copy(), ids=tuple(ids))


def l2_normalize_rows(m: EmbeddingMatrix) -> tuple[EmbeddingMatrix, int]:
    """Scale each row to unit Euclidean norm.

    Zero rows cannot be normalized; they are kept as zeros and counted in the
    returned warning count rather than dropped, which would desynchronize any
    pairing that refers to this matrix by row.
    """
    vals = m.values.astype(np.float64)
    norms = np.linalg.norm(vals, axis=1)
    zero = norms == 0.0
    out = vals / np.where(zero, 1.0, norms)[:, None]
    return EmbeddingMatrix(out.astype(np.float32), m.ids), int(np.count_nonzero(zero))


def load_manifest(path) -> PairManifest:
    """Parse a JSONL pair manifest."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                entries.append(
                    PairEntry(str(obj["src"]), str(obj["tgt"]), str(obj["group"]))
                )
            except (KeyError, TypeError) as exc:
                raise FormatError(
                    f'{path}:{lineno}: expected object with "src", "tgt", "group"'
                ) from exc
    return PairManifest(entries=tuple(entries))


def save_manifest(manifest: PairManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(
                json.dumps(
                    {"src": e.src_id, "tgt": e.tgt_id, "group": e.group_id},
                    separators=(", ", ": "),
                )
                + "\n"
            )


def align_pairs(
    src: EmbeddingMatrix, tgt: EmbeddingMatrix, manifest: PairManifest
) -> PairedDataset:
    """Materialize manifest entries as row-aligned source/target matrices.

    Rows come out in manifest order; an id referenced several times is copied
    once per entry.
    """
    src_pos = {row_id: i for i, row_id in enumerate(src.ids)}
    tgt_pos = {row_id: i for i, row_id in enumerate(tgt.ids)}
    src_rows, tgt_rows, groups = [], [], []
    for e in manifest.entries:
        if e.src_id not in src_pos:
            raise UnknownIdError(f"manifest src id {e.src_id!r} not found in source matrix")
        if e.tgt_id not in tgt_pos:
            raise UnknownIdError(f"manifest tgt id {e.tgt_id!r} not found in target matrix")
        src_rows.append(src_pos[e.src_id])
        tgt_rows.append(tgt_pos[e.tgt_id])
        groups.append(e.group_id)
    src_idx = np.asarray(src_rows, dtype=np.intp)
    tgt_idx = np.asarray(tgt_rows, dtype=np.intp)
    return PairedDataset(
        src=PairedSide(
            src.values[src_idx] if len(src_idx) else np.zeros((0, src.d), np.float32),
            tuple(e.src_id for e in manifest.entries),
        ),
        tgt=PairedSide(
            tgt.values[tgt_idx] if len(tgt_idx) else np.zeros((0, tgt.d), np.float32),
            tuple(e.tgt_id for e in manifest.entries),
        ),
        groups=tuple(groups),
    )


def split(
    ds: PairedDataset, n_test_groups: int, seed: int
) -> tuple[PairedDataset, PairedDataset]:
    """Deterministic group-wise train/test split.

    Whole groups go to one side or the other, so captions of a held-out image
    can never leak into training. Row order within each side is preserved.
    """
    distinct = list(dict.fromkeys(ds.groups))
    if n_test_groups < 0:
        raise ArgumentError("n_test_groups must be >= 0")
    if n_test_groups > len(distinct):
        raise ArgumentError(
            f"n_test_groups={n_test_groups} exceeds the {len(distinct)} distinct groups"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(distinct))
    test_groups = {distinct[i] for i in perm[:n_test_groups]}
    in_test = np.fromiter((g in test_groups for g in ds.groups), dtype=bool, count=ds.n)
    rows = np.arange(ds.n)
    return ds.take(rows[~in_test]), ds.take(rows[in_test])
