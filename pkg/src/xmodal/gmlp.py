"""Gated-MLP projection head trained with an in-batch-negative contrastive loss.

One block, acting on an L x d_model sequence x (pre-norm, residual):

    a    = layer_norm(x) @ w_u + b_u          # expand channels to d_ffn
    z    = gelu(a)
    z1, z2 = split(z)                         # channel halves, d_ffn/2 each
    gate = z1 * (w_s @ z2 + b_s[:, None])     # cross-token gating
    y    = x + gate @ w_o + b_o

With w_s = 0 and b_s = 1 the gate passes z1 through untouched, which is also
how blocks are initialized (w_s ~ uniform(+-1e-3), b_s = 1) so early training
starts from a near-plain MLP.

Everything here is float64 numpy with hand-written backprop; gradients are
checked against central finite differences in the test suite, which is the
reason for avoiding framework autograd and low precision.

The loss over a batch of pooled vectors h_i (source) and h_i+ (target):

    L = (1/B) sum_i -log( exp(cos(h_i, h_i+)/tau) / sum_j exp(cos(h_i, h_j+)/tau) )

i.e. cross entropy where the other B-1 targets in the batch are negatives.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.special import erf

from .errors import (
    ArgumentError,
    CorruptionError,
    FormatError,
    NumericalError,
    TrainingError,
    ValidationError,
)
from .embstore import EmbeddingMatrix, PairedDataset

POOL_MEAN = "mean"
POOL_FIRST_TOKEN = "first_token"
_POOLINGS = (POOL_MEAN, POOL_FIRST_TOKEN)

_LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_TENSOR_FIELDS = ("ln_scale", "ln_bias", "w_u", "b_u", "w_s", "b_s", "w_o", "b_o")

_HEAD_MAGIC = b"XGML"
_HEAD_VERSION = 1
_HEAD_HEADER = struct.Struct("<4sIQQQQB7x")
_POOL_CODES = {POOL_MEAN: 1, POOL_FIRST_TOKEN: 2}
_CODE_POOLS = {v: k for k, v in _POOL_CODES.items()}


@dataclass(frozen=True)
class GmlpConfig:
    seq_len: int
    d_model: int
    d_ffn: int
    n_blocks: int = 2
    pooling: str = POOL_MEAN

    def __post_init__(self):
        if self.seq_len < 1:
            raise ArgumentError("seq_len must be >= 1")
        if self.d_model < 1:
            raise ArgumentError("d_model must be >= 1")
        if self.d_ffn < 2 or self.d_ffn % 2 != 0:
            raise ArgumentError("d_ffn must be even and >= 2 (the gate splits it in half)")
        if self.n_blocks < 1:
            raise ArgumentError("n_blocks must be >= 1")
        if self.pooling not in _POOLINGS:
            raise ArgumentError(f"unknown pooling {self.pooling!r}")

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        half = self.d_ffn // 2
        return [
            ("ln_scale", (self.d_model,)),
            ("ln_bias", (self.d_model,)),
            ("w_u", (self.d_model, self.d_ffn)),
            ("b_u", (self.d_ffn,)),
            ("w_s", (self.seq_len, self.seq_len)),
            ("b_s", (self.seq_len,)),
            ("w_o", (half, self.d_model)),
            ("b_o", (self.d_model,)),
        ]


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.05
    batch_size: int = 128
    lr: float = 1e-4
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    symmetric: bool = False
    shared_head: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ArgumentError("temperature must be > 0")
        if self.batch_size < 2:
            raise ArgumentError("batch_size must be >= 2 to have in-batch negatives")
        if self.lr <= 0:
            raise ArgumentError("learning rate must be > 0")
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ArgumentError("adam betas must lie in [0, 1)")


@dataclass
class BlockParams:
    ln_scale: np.ndarray
    ln_bias: np.ndarray
    w_u: np.ndarray
    b_u: np.ndarray
    w_s: np.ndarray
    b_s: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray


@dataclass
class GmlpParams:
    """All parameters of one projection head. Arrays are float64 and mutable
    (training updates them in place)."""

    config: GmlpConfig
    blocks: list[BlockParams]

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, block in enumerate(self.blocks):
            for name in _TENSOR_FIELDS:
                yield f"block{i}.{name}", getattr(block, name)

    def copy(self) -> "GmlpParams":
        return GmlpParams(
            config=self.config,
            blocks=[
                BlockParams(**{f: getattr(b, f).copy() for f in _TENSOR_FIELDS})
                for b in self.blocks
            ],
        )

    def zeros_like(self) -> "GmlpParams":
        return GmlpParams(
            config=self.config,
            blocks=[
                BlockParams(**{f: np.zeros_like(getattr(b, f)) for f in _TENSOR_FIELDS})
                for b in self.blocks
            ],
        )

    def validate(self) -> None:
        expected = dict(self.config.tensor_shapes())
        if len(self.blocks) != self.config.n_blocks:
            raise ValidationError(
                f"{len(self.blocks)} blocks but config says {self.config.n_blocks}"
            )
        for name, arr in self.tensors():
            field_name = name.split(".", 1)[1]
            if arr.shape != expected[field_name]:
                raise ValidationError(
                    f"{name} has shape {arr.shape}, expected {expected[field_name]}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")


def init_params(config: GmlpConfig, rng: np.random.Generator) -> GmlpParams:
    """Fresh parameters: 1/sqrt(fan-in) normal projections and the
    near-identity gate (w_s ~ 0, b_s = 1)."""
    half = config.d_ffn // 2
    blocks = []
    for _ in range(config.n_blocks):
        blocks.append(
            BlockParams(
                ln_scale=np.ones(config.d_model),
                ln_bias=np.zeros(config.d_model),
                w_u=rng.normal(0.0, 1.0 / math.sqrt(config.d_model), (config.d_model, config.d_ffn)),
                b_u=np.zeros(config.d_ffn),
                w_s=rng.uniform(-1e-3, 1e-3, (config.seq_len, config.seq_len)),
                b_s=np.ones(config.seq_len),
                w_o=rng.normal(0.0, 1.0 / math.sqrt(half), (half, config.d_model)),
                b_o=np.zeros(config.d_model),
            )
        )
    return GmlpParams(config=config, blocks=blocks)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _forward_block(bp: BlockParams, x: np.ndarray, caches: list | None):
    """x: (B, L, d_model). Appends the intermediates needed for backprop."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    ln = xhat * bp.ln_scale + bp.ln_bias

    a = ln @ bp.w_u + bp.b_u
    z = _gelu(a)
    half = z.shape[-1] // 2
    z1, z2 = z[..., :half], z[..., half:]
    t = np.matmul(bp.w_s, z2) + bp.b_s[:, None]
    gate = z1 * t
    y = x + gate @ bp.w_o + bp.b_o
    if caches is not None:
        caches.append({"inv": inv, "xhat": xhat, "ln": ln, "a": a, "z1": z1, "z2": z2, "t": t, "gate": gate})
    return y


def _forward_batch(params: GmlpParams, x: np.ndarray, caches: list | None = None) -> np.ndarray:
    for bp in params.blocks:
        x = _forward_block(bp, x, caches)
    return x


def _backward_block(bp: BlockParams, grads: BlockParams, cache: dict, dy: np.ndarray) -> np.ndarray:
    c = cache
    grads.w_o += np.einsum("blh,bld->hd", c["gate"], dy)
    grads.b_o += dy.sum(axis=(0, 1))
    dgate = dy @ bp.w_o.T

    dz1 = dgate * c["t"]
    dt = dgate * c["z1"]
    grads.w_s += np.einsum("blh,bmh->lm", dt, c["z2"])
    grads.b_s += dt.sum(axis=(0, 2))
    dz2 = np.matmul(bp.w_s.T, dt)

    da = np.concatenate([dz1, dz2], axis=-1) * _gelu_grad(c["a"])
    grads.w_u += np.einsum("bld,blf->df", c["ln"], da)
    grads.b_u += da.sum(axis=(0, 1))
    dln = da @ bp.w_u.T

    grads.ln_scale += (dln * c["xhat"]).sum(axis=(0, 1))
    grads.ln_bias += dln.sum(axis=(0, 1))
    dxhat = dln * bp.ln_scale
    dx_ln = c["inv"] * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - c["xhat"] * (dxhat * c["xhat"]).mean(axis=-1, keepdims=True)
    )
    return dy + dx_ln


def _backward_batch(params: GmlpParams, grads: GmlpParams, caches: list, dy: np.ndarray) -> np.ndarray:
    for bp, gb, cache in zip(reversed(params.blocks), reversed(grads.blocks), reversed(caches)):
        dy = _backward_block(bp, gb, cache, dy)
    return dy


def gmlp_forward(params: GmlpParams, x) -> np.ndarray:
    """Run one L x d_model sequence through the head. Output has the input's shape."""
    x = np.asarray(x, dtype=np.float64)
    cfg = params.config
    if x.shape != (cfg.seq_len, cfg.d_model):
        raise ArgumentError(
            f"input shape {x.shape} does not match (seq_len, d_model) = "
            f"({cfg.seq_len}, {cfg.d_model})"
        )
    return _forward_batch(params, x[None, :, :])[0]


def pool(y, mode: str) -> np.ndarray:
    """Collapse an L x d_model sequence to one vector: column means or row 0."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ArgumentError(f"pool expects a 2-D sequence, got shape {y.shape}")
    if mode == POOL_MEAN:
        return y.mean(axis=0)
    if mode == POOL_FIRST_TOKEN:
        return y[0].copy()
    raise ArgumentError(f"unknown pooling {mode!r}")


def _pool_batch(y: np.ndarray, mode: str) -> np.ndarray:
    return y.mean(axis=1) if mode == POOL_MEAN else y[:, 0, :].copy()


def _unpool_batch(dh: np.ndarray, mode: str, seq_len: int) -> np.ndarray:
    b, d = dh.shape
    if mode == POOL_MEAN:
        return np.repeat(dh[:, None, :] / seq_len, seq_len, axis=1)
    dy = np.zeros((b, seq_len, d))
    dy[:, 0, :] = dh
    return dy


def contrastive_loss(h_src, h_tgt, tau: float):
    """Loss plus exact gradients with respect to both raw batches.

    Returns ``(loss, d_h_src, d_h_tgt)``. Gradients flow through the cosine
    normalization, so they are valid for unnormalized inputs.
    """
    hs_raw = np.asarray(h_src, dtype=np.float64)
    ht_raw = np.asarray(h_tgt, dtype=np.float64)
    if hs_raw.ndim != 2 or ht_raw.ndim != 2 or hs_raw.shape != ht_raw.shape:
        raise ArgumentError(
            f"expected two equal-shape batches, got {hs_raw.shape} and {ht_raw.shape}"
        )
    if hs_raw.shape[0] < 1:
        raise ArgumentError("batch must contain at least one pair")
    if tau <= 0:
        raise ArgumentError("temperature must be > 0")

    b = hs_raw.shape[0]
    for name, batch in (("source", hs_raw), ("target", ht_raw)):
        norms = np.linalg.norm(batch, axis=1)
        if np.any(norms == 0.0):
            row = int(np.flatnonzero(norms == 0.0)[0])
            raise NumericalError(f"zero-norm row {row} in {name} batch")

    ns = np.linalg.norm(hs_raw, axis=1, keepdims=True)
    nt = np.linalg.norm(ht_raw, axis=1, keepdims=True)
    hs = hs_raw / ns
    ht = ht_raw / nt

    logits = (hs @ ht.T) / tau
    m = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - m)
    denom = exp.sum(axis=1, keepdims=True)
    p = exp / denom
    lse = m[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - np.diag(logits)))

    dlogits = (p - np.eye(b)) / b
    ds = dlogits / tau
    dhs_hat = ds @ ht
    dht_hat = ds.T @ hs
    dhs = (dhs_hat - (dhs_hat * hs).sum(axis=1, keepdims=True) * hs) / ns
    dht = (dht_hat - (dht_hat * ht).sum(axis=1, keepdims=True) * ht) / nt
    return loss, dhs, dht


def backward(
    params_src: GmlpParams,
    params_tgt: GmlpParams,
    x_src,
    x_tgt,
    tau: float,
    symmetric: bool = False,
):
    """Loss and gradients for every parameter tensor of both heads.

    ``x_src``/``x_tgt``: (B, seq_len, d_model) batches of paired sequences.
    With ``symmetric`` the loss is the mean of both retrieval directions.
    Returns ``(grads_src, grads_tgt, loss)`` where the grads mirror the
    parameter structure.
    """
    x_src = np.asarray(x_src, dtype=np.float64)
    x_tgt = np.asarray(x_tgt, dtype=np.float64)
    if x_src.ndim != 3 or x_tgt.ndim != 3 or x_src.shape[0] != x_tgt.shape[0]:
        raise ArgumentError("expected two (B, seq_len, d_model) batches of equal length")
    pooling = params_src.config.pooling

    caches_src: list = []
    caches_tgt: list = []
    y_src = _forward_batch(params_src, x_src, caches_src)
    y_tgt = _forward_batch(params_tgt, x_tgt, caches_tgt)
    h_src = _pool_batch(y_src, pooling)
    h_tgt = _pool_batch(y_tgt, params_tgt.config.pooling)

    loss, dhs, dht = contrastive_loss(h_src, h_tgt, tau)
    if symmetric:
        loss_rev, dht_rev, dhs_rev = contrastive_loss(h_tgt, h_src, tau)
        loss = 0.5 * (loss + loss_rev)
        dhs = 0.5 * (dhs + dhs_rev)
        dht = 0.5 * (dht + dht_rev)

    grads_src = params_src.zeros_like()
    grads_tgt = params_tgt.zeros_like()
    _backward_batch(params_src, grads_src, caches_src, _unpool_batch(dhs, pooling, x_src.shape[1]))
    _backward_batch(params_tgt, grads_tgt, caches_tgt, _unpool_batch(dht, params_tgt.config.pooling, x_tgt.shape[1]))

    for _, g in list(grads_src.tensors()) + list(grads_tgt.tensors()):
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    return grads_src, grads_tgt, loss


class _Adam:
    def __init__(self, params: GmlpParams, cfg: TrainConfig):
        self.lr = cfg.lr
        self.b1 = cfg.beta1
        self.b2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: GmlpParams, grads: GmlpParams) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for pb, gb, mb, vb in zip(params.blocks, grads.blocks, self.m.blocks, self.v.blocks):
            for name in _TENSOR_FIELDS:
                g = getattr(gb, name)
                m = getattr(mb, name)
                v = getattr(vb, name)
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                getattr(pb, name)[...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sequences_from_rows(values: np.ndarray, config: GmlpConfig) -> np.ndarray:
    """Reinterpret (n, d) embedding rows as (n, seq_len, d_model) sequences.

    A row is a flattened sequence; plain vector embeddings use seq_len = 1.
    """
    values = np.asarray(values, dtype=np.float64)
    n, d = values.shape
    if d != config.seq_len * config.d_model:
        raise ArgumentError(
            f"row width {d} does not factor as seq_len*d_model = "
            f"{config.seq_len}*{config.d_model}"
        )
    return values.reshape(n, config.seq_len, config.d_model)


@dataclass
class TrainResult:
    params_src: GmlpParams
    params_tgt: GmlpParams
    epoch_losses: list[float]


def train_head(train: PairedDataset, gcfg: GmlpConfig, tcfg: TrainConfig) -> TrainResult:
    """Train source and target heads with Adam on the contrastive objective.

    Deterministic for a fixed seed: initialization, epoch shuffles, and
    batch order all come from one seeded generator. Batches are consecutive
    slices of each epoch's permutation; a trailing slice of fewer than two
    rows is dropped (no negatives to contrast against).
    """
    if train.n == 0:
        raise ArgumentError("training dataset is empty")
    if train.src.d != train.tgt.d and tcfg.shared_head:
        raise ArgumentError("shared head requires equal source/target dimensions")
    x_src = sequences_from_rows(train.src.values, gcfg)
    x_tgt = sequences_from_rows(train.tgt.values, gcfg)

    rng = np.random.default_rng(tcfg.seed)
    params_src = init_params(gcfg, rng)
    params_tgt = params_src if tcfg.shared_head else init_params(gcfg, rng)
    opt_src = _Adam(params_src, tcfg)
    opt_tgt = None if tcfg.shared_head else _Adam(params_tgt, tcfg)

    epoch_losses: list[float] = []
    n = train.n
    for epoch in range(tcfg.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start : start + tcfg.batch_size]
            if len(idx) < 2:
                continue
            grads_src, grads_tgt, loss = backward(
                params_src, params_tgt, x_src[idx], x_tgt[idx], tcfg.tau,
                symmetric=tcfg.symmetric,
            )
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            if tcfg.shared_head:
                for (_, g), (_, g2) in zip(grads_src.tensors(), grads_tgt.tensors()):
                    g += g2
                opt_src.step(params_src, grads_src)
            else:
                opt_src.step(params_src, grads_src)
                opt_tgt.step(params_tgt, grads_tgt)
            total += loss * len(idx)
            count += len(idx)
        if count == 0:
            raise ArgumentError(
                f"batch_size {tcfg.batch_size} leaves no usable batch for {n} rows"
            )
        epoch_losses.append(total / count)
    return TrainResult(params_src=params_src, params_tgt=params_tgt, epoch_losses=epoch_losses)


def apply_head(params: GmlpParams, m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Project every row of an embedding matrix through a trained head."""
    x = sequences_from_rows(m.values, params.config)
    h = _pool_batch(_forward_batch(params, x), params.config.pooling)
    return EmbeddingMatrix(values=h.astype(np.float32), ids=m.ids)


def save_head(params: GmlpParams, path) -> None:
    """Write head parameters in the XGML container (float64, declaration order)."""
    params.validate()
    cfg = params.config
    parts = [
        _HEAD_HEADER.pack(
            _HEAD_MAGIC, _HEAD_VERSION,
            cfg.seq_len, cfg.d_model, cfg.d_ffn, cfg.n_blocks,
            _POOL_CODES[cfg.pooling],
        )
    ]
    for _, arr in params.tensors():
        parts.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_head(path) -> GmlpParams:
    data = Path(path).read_bytes()
    if data[:4] != _HEAD_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {_HEAD_MAGIC!r}")
    if len(data) < _HEAD_HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, version, seq_len, d_model, d_ffn, n_blocks, pool_code = _HEAD_HEADER.unpack_from(data, 0)
    if version != _HEAD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if pool_code not in _CODE_POOLS:
        raise FormatError(f"{path}: unknown pooling code {pool_code}")
    config = GmlpConfig(
        seq_len=seq_len, d_model=d_model, d_ffn=d_ffn,
        n_blocks=n_blocks, pooling=_CODE_POOLS[pool_code],
    )
    shapes = config.tensor_shapes()
    per_block = sum(int(np.prod(shape)) for _, shape in shapes)
    expected = _HEAD_HEADER.size + n_blocks * per_block * 8
    if len(data) != expected:
        raise CorruptionError(f"{path}: expected {expected} bytes, got {len(data)}")

    offset = _HEAD_HEADER.size
    blocks = []
    for _ in range(n_blocks):
        fields = {}
        for name, shape in shapes:
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            fields[name] = arr.reshape(shape).copy()
            offset += count * 8
        blocks.append(BlockParams(**fields))
    params = GmlpParams(config=config, blocks=blocks)
    params.validate()
    return params
