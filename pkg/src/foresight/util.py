"""Small shared helpers: seed derivation, hashing, stable float text."""

from __future__ import annotations

import hashlib


def derive_seed(base_seed: int, label: str) -> int:
    """Derive a named 32-bit sub-seed from a base seed.

    Every stage and every stochastic sub-task gets its own stream via
    sha256(f"{base_seed}:{label}"); nothing in the package touches the
    global numpy RNG.
    """
    digest = hashlib.sha256(f"{base_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: str, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def float_text(x: float) -> str:
    # 17 significant digits: lossless float64 text roundtrip, stable bytes.
    return format(float(x), ".17g")
