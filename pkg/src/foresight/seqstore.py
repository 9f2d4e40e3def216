"""Per-author streaming store of Semantic ids.

Raw sid streams are kept run-length encoded: a distinct sequence (each
unique consecutive sid) plus a parallel frequency sequence (how many times
it repeated). Appends extend the last run or open a new one, and are
written to a line-delimited log before in-memory state advances, so
replaying the log always reproduces the store. Fixed-length model windows
are cut from the tail of the compressed sequence and front-padded with a
reserved pad code (= number of real codes).
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, StorageError

PAD_FREQ = 0


@dataclass
class CompressedSidSequence:
    """Run-length encoded sid stream: distinct sids + consecutive counts."""
    distinct: list[int]
    freq: list[int]
    total_len: int

    def validate(self) -> None:
        if len(self.distinct) != len(self.freq):
            raise ValueError("distinct/freq length mismatch")
        if any(f < 1 for f in self.freq):
            raise ValueError("every run frequency must be >= 1")
        if sum(self.freq) != self.total_len:
            raise ValueError("freq sum does not match total_len")
        for a, b in zip(self.distinct, self.distinct[1:]):
            if a == b:
                raise ValueError("adjacent runs must have distinct sids")


def compress(raw: list[int]) -> CompressedSidSequence:
    """Run-length encode a raw sid list (empty input allowed)."""
    distinct: list[int] = []
    freq: list[int] = []
    for sid in raw:
        if distinct and distinct[-1] == sid:
            freq[-1] += 1
        else:
            distinct.append(sid)
            freq.append(1)
    return CompressedSidSequence(distinct, freq, len(raw))


def decompress(c: CompressedSidSequence) -> list[int]:
    """Expand runs back to the raw sid list; validates invariants first."""
    c.validate()
    out: list[int] = []
    for sid, f in zip(c.distinct, c.freq):
        out.extend([sid] * f)
    return out


@dataclass
class HistoryWindow:
    """Tail of a compressed sequence, front-padded to a fixed length.

    ``sids``/``freqs`` always have length l_max; the first
    ``l_max - valid_len`` positions hold the pad code with frequency 0 and
    are excluded by ``mask()``.
    """
    sids: list[int]
    freqs: list[int]
    valid_len: int
    pad_code: int

    def mask(self) -> np.ndarray:
        m = np.zeros(len(self.sids), dtype=bool)
        if self.valid_len:
            m[-self.valid_len:] = True
        return m

    def valid_sids(self) -> list[int]:
        return self.sids[len(self.sids) - self.valid_len:]

    def valid_freqs(self) -> list[int]:
        return self.freqs[len(self.freqs) - self.valid_len:]


def make_window(distinct: list[int], freq: list[int], l_max: int,
                pad_code: int) -> HistoryWindow:
    """Window over the last min(len, l_max) runs, front-padded to l_max."""
    if l_max < 1:
        raise ValueError("window length must be >= 1")
    take = min(len(distinct), l_max)
    pad = l_max - take
    sids = [pad_code] * pad + list(distinct[len(distinct) - take:])
    freqs = [PAD_FREQ] * pad + list(freq[len(freq) - take:])
    return HistoryWindow(sids, freqs, take, pad_code)


class AuthorStore:
    """Append-only per-author sid database with a write-ahead log.

    A single lock serializes appends; reads copy state under the lock so a
    concurrent window() never observes a half-applied append. The log line
    format is "author_id seq_index sid"; seq_index is the author's append
    count at write time.
    """

    def __init__(self, num_codes: int, log_path: str | None = None):
        if num_codes < 1:
            raise ValueError("num_codes must be >= 1")
        self.num_codes = num_codes
        self.pad_code = num_codes
        self._seqs: dict[int, CompressedSidSequence] = {}
        self._lock = threading.Lock()
        self._log = open(log_path, "a", encoding="utf-8") if log_path else None

    def close(self) -> None:
        if self._log:
            self._log.close()
            self._log = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def authors(self) -> list[int]:
        with self._lock:
            return sorted(self._seqs)

    def append(self, author_id: int, sid: int) -> None:
        """Extend the author's stream by one sid; logged before applied."""
        if not 0 <= sid < self.num_codes:
            raise ValueError(f"sid {sid} out of range [0, {self.num_codes})")
        with self._lock:
            seq = self._seqs.get(author_id)
            seq_index = seq.total_len if seq else 0
            if self._log:
                try:
                    self._log.write(f"{author_id} {seq_index} {sid}\n")
                    self._log.flush()
                except (OSError, ValueError) as exc:  # ValueError: closed file
                    raise StorageError(f"append log write failed: {exc}") from exc
            if seq is None:
                seq = CompressedSidSequence([], [], 0)
                self._seqs[author_id] = seq
            if seq.distinct and seq.distinct[-1] == sid:
                seq.freq[-1] += 1
            else:
                seq.distinct.append(sid)
                seq.freq.append(1)
            seq.total_len += 1

    def sequence(self, author_id: int) -> CompressedSidSequence:
        """Copy of the author's compressed sequence (empty if unknown)."""
        with self._lock:
            seq = self._seqs.get(author_id)
            if seq is None:
                return CompressedSidSequence([], [], 0)
            return CompressedSidSequence(list(seq.distinct), list(seq.freq), seq.total_len)

    def window(self, author_id: int, l_max: int) -> HistoryWindow:
        """Last min(l', l_max) runs, front-padded; all-pad for unknown authors."""
        with self._lock:
            seq = self._seqs.get(author_id)
            if seq is None:
                return make_window([], [], l_max, self.pad_code)
            return make_window(seq.distinct, seq.freq, l_max, self.pad_code)

    @classmethod
    def replay_log(cls, path: str, num_codes: int,
                   log_path: str | None = None) -> "AuthorStore":
        """Rebuild a store by replaying an append log in file order."""
        store = cls(num_codes, log_path=log_path)
        expected: dict[int, int] = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                aid, seq_index, sid = int(parts[0]), int(parts[1]), int(parts[2])
                if seq_index != expected.get(aid, 0):
                    raise IntegrityError(
                        f"log {path}: author {aid} expected seq "
                        f"{expected.get(aid, 0)}, saw {seq_index}")
                store.append(aid, sid)
                expected[aid] = seq_index + 1
        return store


def windows_at(sids: list[int], indices: list[int], l_max: int,
               pad_code: int) -> dict[int, HistoryWindow]:
    """Windows over the compressed prefix ending at each raw index.

    For every t in ``indices`` the window reflects the store as of segment
    t inclusive, i.e. the final run's frequency counts only occurrences up
    to t. One pass over the raw stream, so bulk feature extraction stays
    linear.
    """
    wanted = sorted(set(indices))
    for t in wanted:
        if not 0 <= t < len(sids):
            raise ValueError(f"index {t} outside stream of length {len(sids)}")
    out: dict[int, HistoryWindow] = {}
    distinct: list[int] = []
    freq: list[int] = []
    k = 0
    for i, sid in enumerate(sids):
        if distinct and distinct[-1] == sid:
            freq[-1] += 1
        else:
            distinct.append(sid)
            freq.append(1)
        while k < len(wanted) and wanted[k] == i:
            out[i] = make_window(distinct, freq, l_max, pad_code)
            k += 1
    return out


# ---------------------------------------------------------------------------
# snapshot file: binary per-author compressed pairs
# ---------------------------------------------------------------------------

_SNAPSHOT_MAGIC = b"FSSS"


def save_snapshot(store: AuthorStore, path: str) -> None:
    """Binary snapshot: per author, run count then (sid, freq) u32 pairs."""
    authors = store.authors()
    with open(path, "wb") as f:
        f.write(_SNAPSHOT_MAGIC)
        f.write(struct.pack("<III", 1, store.num_codes, len(authors)))
        for aid in authors:
            seq = store.sequence(aid)
            f.write(struct.pack("<qI", aid, len(seq.distinct)))
            if seq.distinct:
                pairs = np.empty(2 * len(seq.distinct), dtype="<u4")
                pairs[0::2] = seq.distinct
                pairs[1::2] = seq.freq
                f.write(pairs.tobytes())


def load_snapshot(path: str) -> AuthorStore:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(_SNAPSHOT_MAGIC):
        raise IntegrityError(f"{path} is not a snapshot file (bad magic)")
    version, num_codes, n_authors = struct.unpack_from("<III", blob, 4)
    if version != 1:
        raise IntegrityError(f"{path}: unsupported snapshot version {version}")
    store = AuthorStore(num_codes)
    off = 16
    for _ in range(n_authors):
        aid, n_runs = struct.unpack_from("<qI", blob, off)
        off += 12
        pairs = np.frombuffer(blob, dtype="<u4", count=2 * n_runs, offset=off)
        off += 8 * n_runs
        seq = CompressedSidSequence(
            [int(s) for s in pairs[0::2]],
            [int(f) for f in pairs[1::2]],
            int(pairs[1::2].sum()) if n_runs else 0,
        )
        seq.validate()
        store._seqs[aid] = seq
    return store
