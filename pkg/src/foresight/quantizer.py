"""K-Means codebook over segment embeddings; indices are Semantic ids.

Lloyd iterations from k-means++ style seeding, with an empty-cluster
repair rule (re-seed a dead centroid to the point farthest from its
nearest centroid) so every code stays live -- the predictor's
classification head needs all N classes reachable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError
from .synth import SegmentEvent

_CODEBOOK_MAGIC = b"FSCB"
_CHUNK = 4096


@dataclass(frozen=True)
class Codebook:
    """Ordered centroid table; row i is the centroid of Sid i.

    Centroids are stored as float32 -- the same precision as the on-disk
    format -- so a save/load roundtrip is bit-exact.
    """
    centroids: np.ndarray  # [N, d_e] float32
    train_inertia: float

    @property
    def num_codes(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def validate(self) -> None:
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("codebook must be a nonempty [N, d] matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("codebook contains non-finite centroids")
        if not (np.isfinite(self.train_inertia) and self.train_inertia >= 0):
            raise ValueError("train_inertia must be a nonnegative real")


def _pairwise_sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact squared distances via explicit differences, [m, N].

    Chunk sizes keep the [chunk, N, d] intermediate small. The expanded
    (x2 + c2 - 2xc) form is faster but loses a few ulps; codes must agree
    exactly with a per-element nearest_code scan, so we pay for exactness.
    """
    out = np.empty((x.shape[0], c.shape[0]))
    for lo in range(0, x.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, x.shape[0])
        diff = x[lo:hi, None, :] - c[None, :, :]
        out[lo:hi] = np.einsum("mnd,mnd->mn", diff, diff)
    return out


def _assign(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = _pairwise_sq_dists(x, c)
    codes = d2.argmin(axis=1)
    return codes, d2[np.arange(x.shape[0]), codes]


def train_kmeans(embeddings, n_codes: int, max_iters: int = 100,
                 tol: float = 1e-7, seed: int = 0) -> Codebook:
    """Cluster embeddings into a codebook of n_codes centroids.

    Stops when the relative inertia improvement drops below ``tol`` or
    after ``max_iters`` Lloyd iterations; inertia is checked to be
    non-increasing at every iteration. Deterministic for a fixed seed.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("embeddings must be a nonempty [m, d] array")
    if n_codes < 1:
        raise ValueError("need at least one code")
    if x.shape[0] < n_codes:
        raise ValueError(f"{x.shape[0]} points cannot fill {n_codes} clusters")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol < 0:
        raise ValueError("tol must be >= 0")

    rng = np.random.default_rng(seed)
    centroids = _seed_plus_plus(x, n_codes, rng)

    prev_inertia = None
    for _ in range(max_iters):
        codes, min_d2 = _assign(x, centroids)
        inertia = float(min_d2.sum())
        if prev_inertia is not None:
            if inertia > prev_inertia * (1.0 + 1e-12) + 1e-12:
                raise AssertionError(
                    f"inertia increased: {prev_inertia} -> {inertia}")
            if prev_inertia - inertia <= tol * prev_inertia:
                break
        prev_inertia = inertia
        centroids = _update_means(x, codes, centroids, min_d2, n_codes)

    codes, min_d2 = _assign(x, centroids)
    final_inertia = float(min_d2.sum())
    cb = Codebook(centroids.astype(np.float32), final_inertia)
    cb.validate()
    return cb


def _seed_plus_plus(x: np.ndarray, n_codes: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    centroids = np.empty((n_codes, x.shape[1]))
    centroids[0] = x[rng.integers(m)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, n_codes):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on already-chosen points; fall back to uniform
            idx = int(rng.integers(m))
        else:
            idx = int(rng.choice(m, p=d2 / total))
        centroids[i] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _update_means(x, codes, centroids, min_d2, n_codes):
    new = centroids.copy()
    counts = np.bincount(codes, minlength=n_codes)
    sums = np.zeros_like(centroids)
    np.add.at(sums, codes, x)
    live = counts > 0
    new[live] = sums[live] / counts[live, None]
    # dead clusters grab the point currently worst-served by its centroid
    repair_d2 = min_d2.copy()
    for j in np.flatnonzero(~live):
        idx = int(repair_d2.argmax())
        new[j] = x[idx]
        repair_d2[idx] = 0.0
    return new


def nearest_code(e, codebook: Codebook) -> int:
    """Index of the closest centroid (squared Euclidean, lowest index wins ties)."""
    v = np.asarray(e, dtype=np.float64)
    if v.shape != (codebook.dim,):
        raise ValueError(f"embedding dim {v.shape} != codebook dim ({codebook.dim},)")
    d2 = ((codebook.centroids.astype(np.float64) - v) ** 2).sum(axis=1)
    return int(d2.argmin())


def quantize_stream(events: list[SegmentEvent], codebook: Codebook) -> list[tuple[int, int, int]]:
    """Map segment events to (author_id, seq_index, sid), order preserved."""
    if not events:
        return []
    x = np.stack([ev.embedding for ev in events]).astype(np.float64)
    if x.shape[1] != codebook.dim:
        raise ValueError(f"embedding dim {x.shape[1]} != codebook dim {codebook.dim}")
    codes, _ = _assign(x, codebook.centroids.astype(np.float64))
    return [(ev.author_id, ev.seq_index, int(c)) for ev, c in zip(events, codes)]


# ---------------------------------------------------------------------------
# codebook file: fixed header + float32 rows + float64 inertia
# ---------------------------------------------------------------------------

def save_codebook(codebook: Codebook, path: str) -> None:
    codebook.validate()
    with open(path, "wb") as f:
        f.write(_CODEBOOK_MAGIC)
        f.write(struct.pack("<III", 1, codebook.num_codes, codebook.dim))
        f.write(codebook.centroids.astype("<f4").tobytes())
        f.write(struct.pack("<d", codebook.train_inertia))


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(_CODEBOOK_MAGIC):
        raise IntegrityError(f"{path} is not a codebook file (bad magic)")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != 1:
        raise IntegrityError(f"{path}: unsupported codebook version {version}")
    expected = 16 + 4 * n * d + 8
    if len(blob) != expected:
        raise IntegrityError(f"{path}: size {len(blob)} != expected {expected}")
    cents = np.frombuffer(blob, dtype="<f4", count=n * d, offset=16).reshape(n, d)
    (inertia,) = struct.unpack_from("<d", blob, 16 + 4 * n * d)
    cb = Codebook(cents.astype(np.float32), inertia)
    cb.validate()
    return cb
