"""Dense float64 tensors with an explicit reverse-mode gradient tape.

The training stack here is small enough that a handful of primitives covers
all of it: matmul, broadcasted add/mul, relu/sigmoid/clamp, row softmax,
embedding gather, cross-entropy and clamped binary cross-entropy. Each
primitive computes its output eagerly with numpy and, when a Tape is
supplied, records a closure that scatters gradients back to its inputs.
``backward`` replays those closures in exact reverse execution order, so
gradients accumulate additively no matter how often a tensor is reused.

Conventions:

* activations are row-major: one sequence is ``[positions, dim]``, a batch
  of sequences ``[batch, positions, dim]`` (rank <= 3 everywhere);
* parameters are rank-1 or rank-2 and broadcast against batched
  activations; backward sums gradients over the broadcast axes;
* any op that produces NaN or Inf raises NonFiniteError on the spot.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

from .errors import FullyMaskedError, IntegrityError, NonFiniteError
from .util import sha256_bytes

MASK_BIAS = -1e9  # large finite negative: exp() underflows to exactly 0.0


def _require_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """A rank-0..3 float64 array plus a gradient accumulator."""

    __slots__ = ("data", "grad")

    def __init__(self, data, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ValueError(f"rank {arr.ndim} tensor not supported (max 3)")
        if check:
            _require_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # first contribution: own a copy (g may alias another grad buffer)
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Ordered record of executed primitives; replayed once, in reverse."""

    __slots__ = ("_ops", "_consumed")

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._consumed = False

    def record(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)

    def __len__(self) -> int:
        return len(self._ops)


def backward(tape: Tape, loss: Tensor) -> None:
    """Seed d(loss)/d(loss)=1 and run the tape backwards.

    Parameters never touched by the forward pass keep a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if tape._consumed:
        raise ValueError("tape already consumed by a previous backward pass")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._ops):
        fn()


def _emit(out_data: np.ndarray, tape: Tape | None, bwd: Callable[[Tensor], Callable[[], None]], where: str) -> Tensor:
    _require_finite(out_data, where)
    out = Tensor(out_data, check=False)
    if tape is not None:
        tape.record(bwd(out))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix product; batched on the left operand via numpy broadcasting.

    Backward: dA = dC @ B^T, dB = A^T @ dC (summed over broadcast axes).
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least rank 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    folded = a.data.ndim == 3 and b.data.ndim == 2
    if folded:
        # batched activations x parameter matrix: one big gemm beats a loop
        # of tiny per-batch gemms
        bsz, m, k = a.shape
        out_data = (a.data.reshape(bsz * m, k) @ b.data).reshape(bsz, m, -1)
    else:
        out_data = np.matmul(a.data, b.data)

    def bwd(out: Tensor):
        def run():
            g = out.grad
            if g is None:
                return
            if folded:
                bsz, m, k = a.shape
                n = g.shape[-1]
                g2 = g.reshape(bsz * m, n)
                _accum(a, (g2 @ b.data.T).reshape(bsz, m, k))
                _accum(b, a.data.reshape(bsz * m, k).T @ g2)
            else:
                _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)),
                                       a.data.shape))
                _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                                       b.data.shape))
        return run

    return _emit(out_data, tape, bwd, "matmul")


def transpose(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ValueError("transpose needs rank >= 2")
    out_data = np.swapaxes(a.data, -1, -2).copy()

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, np.swapaxes(out.grad, -1, -2))
        return run

    return _emit(out_data, tape, bwd, "transpose")


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out_data = a.data + b.data

    def bwd(out: Tensor):
        def run():
            g = out.grad
            if g is None:
                return
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        return run

    return _emit(out_data, tape, bwd, "add")


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out_data = a.data * b.data

    def bwd(out: Tensor):
        def run():
            g = out.grad
            if g is None:
                return
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        return run

    return _emit(out_data, tape, bwd, "mul")


def scale(a: Tensor, s: float, tape: Tape | None = None) -> Tensor:
    out_data = a.data * s

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, out.grad * s)
        return run

    return _emit(out_data, tape, bwd, "scale")


def relu(a: Tensor, tape: Tape | None = None) -> Tensor:
    keep = a.data > 0.0
    out_data = np.where(keep, a.data, 0.0)

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, out.grad * keep)
        return run

    return _emit(out_data, tape, bwd, "relu")


def sigmoid(a: Tensor, tape: Tape | None = None) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, out.grad * out.data * (1.0 - out.data))
        return run

    return _emit(out_data, tape, bwd, "sigmoid")


def clamp(a: Tensor, lo: float, hi: float, tape: Tape | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the interior."""
    inside = (a.data > lo) & (a.data < hi)
    out_data = np.clip(a.data, lo, hi)

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, out.grad * inside)
        return run

    return _emit(out_data, tape, bwd, "clamp")


def softmax_rows(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Stable softmax over the last axis (rows sum to 1)."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(out: Tensor):
        def run():
            g = out.grad
            if g is None:
                return
            p = out.data
            _accum(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))
        return run

    return _emit(out_data, tape, bwd, "softmax_rows")


def gather_rows(table: Tensor, indices: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Embedding lookup: ``out[...] = table[indices[...]]``.

    ``indices`` may be rank 1 or 2; the output appends the embedding dim.
    Backward scatters with np.add.at so repeated indices accumulate.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather indices must be integers")
    if table.data.ndim != 2:
        raise ValueError("gather table must be rank 2")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"gather index out of range [0, {table.shape[0]}): "
            f"min={idx.min()} max={idx.max()}"
        )
    out_data = table.data[idx]

    def bwd(out: Tensor):
        def run():
            if out.grad is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, out.grad)
        return run

    return _emit(out_data, tape, bwd, "gather_rows")


def expand_batch(a: Tensor, batch: int, tape: Tape | None = None) -> Tensor:
    """Prepend a batch axis of size ``batch`` by copying; backward sums it."""
    out_data = np.broadcast_to(a.data, (batch,) + a.shape).copy()

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, out.grad.sum(axis=0))
        return run

    return _emit(out_data, tape, bwd, "expand_batch")


def reshape(a: Tensor, shape: tuple[int, ...], tape: Tape | None = None) -> Tensor:
    out_data = a.data.reshape(shape).copy()

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, out.grad.reshape(a.data.shape))
        return run

    return _emit(out_data, tape, bwd, "reshape")


def concat_cols(parts: list[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate along the last axis; backward splits the gradient."""
    if not parts:
        raise ValueError("concat of nothing")
    out_data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def bwd(out: Tensor):
        def run():
            g = out.grad
            if g is None:
                return
            lo = 0
            for p, w in zip(parts, widths):
                _accum(p, g[..., lo:lo + w])
                lo += w
        return run

    return _emit(out_data, tape, bwd, "concat_cols")


def slice_cols(a: Tensor, lo: int, hi: int, tape: Tape | None = None) -> Tensor:
    """Take columns [lo, hi) of the last axis."""
    if not 0 <= lo < hi <= a.shape[-1]:
        raise ValueError(f"column slice [{lo}, {hi}) out of range for {a.shape}")
    out_data = a.data[..., lo:hi].copy()

    def bwd(out: Tensor):
        def run():
            g = out.grad
            if g is None:
                return
            full = np.zeros_like(a.data)
            full[..., lo:hi] = g
            _accum(a, full)
        return run

    return _emit(out_data, tape, bwd, "slice_cols")


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, np.full_like(a.data, float(out.grad)))
        return run

    return _emit(out_data, tape, bwd, "sum_all")


def mean_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def bwd(out: Tensor):
        def run():
            if out.grad is not None:
                _accum(a, np.full_like(a.data, float(out.grad) / n))
        return run

    return _emit(out_data, tape, bwd, "mean_all")


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_mean(logits: Tensor, targets: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target].

    ``logits`` is [batch, classes]; gradient is (softmax - onehot) / batch.
    """
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy_mean expects [batch, classes] logits")
    t = np.asarray(targets)
    n_batch, n_classes = logits.shape
    if t.shape != (n_batch,):
        raise ValueError(f"targets shape {t.shape} != ({n_batch},)")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ValueError(f"target out of range [0, {n_classes})")
    logp = _log_softmax(logits.data)
    out_data = np.asarray(-logp[np.arange(n_batch), t].mean())

    def bwd(out: Tensor):
        def run():
            if out.grad is None:
                return
            p = np.exp(logp)
            p[np.arange(n_batch), t] -= 1.0
            _accum(logits, p * (float(out.grad) / n_batch))
        return run

    return _emit(out_data, tape, bwd, "cross_entropy")


def cross_entropy(logits: Tensor, target: int, tape: Tape | None = None) -> Tensor:
    """Single-sample cross-entropy on [1, classes] logits."""
    if logits.data.ndim != 2 or logits.shape[0] != 1:
        raise ValueError("cross_entropy expects [1, classes] logits")
    return cross_entropy_mean(logits, np.asarray([target]), tape)


def bce_loss(probs: Tensor, labels: np.ndarray, tape: Tape | None = None,
             eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy on probabilities, clamped away from {0, 1}.

    Reduction: sum over the trailing axes, mean over the leading (batch)
    axis. Elements clamped to [eps, 1-eps] get zero gradient, matching the
    clamp semantics elsewhere.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ValueError(f"labels shape {y.shape} != probs shape {probs.shape}")
    n_batch = probs.shape[0] if probs.data.ndim > 0 else 1
    p = np.clip(probs.data, eps, 1.0 - eps)
    inside = (probs.data > eps) & (probs.data < 1.0 - eps)
    elems = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    out_data = np.asarray(elems.sum() / n_batch)

    def bwd(out: Tensor):
        def run():
            if out.grad is None:
                return
            d = (p - y) / (p * (1.0 - p))
            _accum(probs, d * inside * (float(out.grad) / n_batch))
        return run

    return _emit(out_data, tape, bwd, "bce_loss")


# ---------------------------------------------------------------------------
# composed blocks
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, key_valid: np.ndarray,
              tape: Tape | None = None) -> Tensor:
    """Scaled dot-product attention with masked keys.

    softmax(q k^T / sqrt(d) + bias) v, where bias is 0 at valid keys and
    MASK_BIAS at invalid ones so masked weights underflow to exactly 0.
    ``key_valid`` is boolean, [keys] or [batch, keys]; a row with no valid
    key raises FullyMaskedError.
    """
    valid = np.asarray(key_valid, dtype=bool)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ValueError("attention q/k/v dims disagree")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("attention key/value counts disagree")
    if valid.shape[-1] != k.shape[-2]:
        raise ValueError("key_valid length does not match key count")
    if not valid.any(axis=-1).all():
        raise FullyMaskedError("attention row with no valid keys")
    bias = np.where(valid, 0.0, MASK_BIAS)
    # broadcast over query positions: [keys] -> [1, keys], [B, keys] -> [B, 1, keys]
    bias = Tensor(bias[..., None, :], check=False)
    scores = matmul(q, transpose(k, tape), tape)
    scaled = scale(scores, 1.0 / np.sqrt(d), tape)
    weights = softmax_rows(add(scaled, bias, tape), tape)
    return matmul(weights, v, tape)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
        tape: Tape | None = None) -> Tensor:
    """Two-layer feed-forward: relu(x w1 + b1) w2 + b2."""
    h = relu(add(matmul(x, w1, tape), b1, tape), tape)
    return add(matmul(h, w2, tape), b2, tape)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters plus their Adam state; insertion-ordered."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, init: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(init, dtype=np.float64))
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())


def optimizer_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update over every parameter; gradients are zeroed after."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store._params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        _require_finite(p.data, f"optimizer update of {name}")
    store.zero_grads()


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"FSK1"


def _store_payload(store: ParamStore) -> bytes:
    parts = [_CKPT_MAGIC, struct.pack("<II", 1, len(store._params))]
    for name, t in store.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        parts.append(t.data.astype("<f8").tobytes())
    return b"".join(parts)


def store_digest(store: ParamStore) -> str:
    """Content hash of parameter names, shapes and values."""
    return sha256_bytes(_store_payload(store))


def save_checkpoint(store: ParamStore, path: str) -> str:
    """Write the named-tensor container; returns its content digest.

    Layout: magic, version, count, then per tensor (name, rank, dims,
    float64 little-endian data), then a sha256 footer over everything
    before it.
    """
    payload = _store_payload(store)
    digest = sha256_bytes(payload)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(bytes.fromhex(digest))
    return digest


def read_checkpoint_digest(path: str) -> str:
    """Verify the footer hash and return it."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 32 + len(_CKPT_MAGIC):
        raise IntegrityError(f"checkpoint {path} truncated")
    payload, footer = blob[:-32], blob[-32:]
    if not payload.startswith(_CKPT_MAGIC):
        raise IntegrityError(f"checkpoint {path} has wrong magic bytes")
    digest = sha256_bytes(payload)
    if bytes.fromhex(digest) != footer:
        raise IntegrityError(f"checkpoint {path} failed its hash check")
    return digest


def load_checkpoint(path: str) -> ParamStore:
    """Read a container back into a fresh ParamStore (optimizer state reset)."""
    read_checkpoint_digest(path)
    with open(path, "rb") as f:
        blob = f.read()[:-32]
    off = len(_CKPT_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    if version != 1:
        raise IntegrityError(f"checkpoint {path}: unsupported version {version}")
    off += 8
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        store.add(name, arr.astype(np.float64))
    return store
