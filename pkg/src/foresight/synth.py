"""Synthetic live-stream corpus generator.

Authors emit 30-second content segments whose hidden topic follows a
Markov chain with a tunable self-stay probability (content continuity).
Each segment is observed as its topic centroid plus isotropic Gaussian
noise. Users carry per-topic affinities, and their interaction labels at
segment t are drawn from a logistic model of the affinity to the topic at
t+1 -- engagement peaks just before the content users care about airs,
which is exactly the effect the downstream ranker is supposed to exploit.
For negative-control experiments the label horizon can be switched to the
current segment's topic instead.

Hidden topics are written to a separate ground-truth file that only the
evaluation layer may read.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .util import derive_seed, float_text

TASKS = ("ctr", "wtr", "lvtr", "gtr")

# Default per-task logit offsets (positives get rarer down the list) and
# affinity weights. Overridable per corpus via keyword arguments.
DEFAULT_BASE_RATES = {"ctr": -0.5, "wtr": -1.5, "lvtr": -1.0, "gtr": -2.0}
DEFAULT_TASK_WEIGHTS = {"ctr": 1.0, "wtr": 0.7, "lvtr": 0.9, "gtr": 0.5}

HORIZON_NEXT = "next"
HORIZON_CURRENT = "current"


@dataclass(frozen=True)
class TopicModel:
    num_topics: int
    topic_centroids: np.ndarray  # [K, d_e]
    transition: np.ndarray       # [K, K], rows sum to 1
    self_stay: float
    noise_sigma: float

    def validate(self) -> None:
        k = self.num_topics
        if self.topic_centroids.shape[0] != k or self.transition.shape != (k, k):
            raise ValueError("topic model shapes inconsistent")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        row_err = np.abs(self.transition.sum(axis=1) - 1.0).max()
        if row_err > 1e-9:
            raise ValueError(f"transition rows not stochastic (err={row_err:g})")
        diffs = self.topic_centroids[:, None, :] - self.topic_centroids[None, :, :]
        d2 = (diffs ** 2).sum(axis=-1)
        np.fill_diagonal(d2, np.inf)
        if d2.min() <= 0.0:
            raise ValueError("topic centroids are not pairwise distinct")


@dataclass(frozen=True)
class SegmentEvent:
    author_id: int
    seq_index: int
    embedding: np.ndarray
    true_topic: int


@dataclass(frozen=True)
class UserModel:
    user_id: int
    affinity: np.ndarray               # [K]
    base_rate: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BASE_RATES))


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    author_id: int
    at_seq_index: int
    labels: dict[str, int]

    def validate(self) -> None:
        if set(self.labels) != set(TASKS):
            raise ValueError(f"labels must cover tasks {TASKS}")
        if any(v not in (0, 1) for v in self.labels.values()):
            raise ValueError("labels must be binary")


def gen_topic_model(num_topics: int, d_e: int, self_stay: float, seed: int,
                    noise_sigma: float = 0.25,
                    concentration: float = 0.0) -> TopicModel:
    """Build a random topic model with the requested content continuity.

    The transition matrix is self_stay * I + (1 - self_stay) * R with R a
    random row-stochastic matrix, so every diagonal entry is at least
    self_stay and every row sums to 1. With concentration = 0, R rows are
    normalized uniforms (flat topic hand-offs); a positive value draws
    Dirichlet(concentration) rows instead, and small values (< 1) give
    peaky hand-offs where each topic has a few favored successors -- the
    regime where foreseeing the next topic actually pays. A sliver of
    uniform mass keeps every hand-off possible.
    """
    if num_topics < 2:
        raise ValueError("need at least 2 topics")
    if d_e < 2:
        raise ValueError("embedding dim must be >= 2")
    if not 0.0 <= self_stay < 1.0:
        raise ValueError("self_stay must be in [0, 1); 1 freezes the chain")
    if concentration < 0.0:
        raise ValueError("concentration must be >= 0")
    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(num_topics, d_e))
    if concentration > 0.0:
        raw = rng.dirichlet(np.full(num_topics, concentration), size=num_topics)
        raw = 0.99 * raw + 0.01 / num_topics
    else:
        raw = rng.uniform(size=(num_topics, num_topics))
        raw /= raw.sum(axis=1, keepdims=True)
    transition = self_stay * np.eye(num_topics) + (1.0 - self_stay) * raw
    transition /= transition.sum(axis=1, keepdims=True)
    tm = TopicModel(num_topics, centroids, transition, self_stay, noise_sigma)
    tm.validate()
    return tm


def cycle_topic_model(num_topics: int, d_e: int, seed: int,
                      noise_sigma: float = 0.0) -> TopicModel:
    """Deterministic cyclic chain: topic i always hands off to i+1 mod K."""
    if num_topics < 2:
        raise ValueError("need at least 2 topics")
    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(num_topics, d_e))
    transition = np.zeros((num_topics, num_topics))
    for i in range(num_topics):
        transition[i, (i + 1) % num_topics] = 1.0
    tm = TopicModel(num_topics, centroids, transition, 0.0, noise_sigma)
    tm.validate()
    return tm


def gen_author_stream(topic_model: TopicModel, author_id: int, length: int,
                      seed: int) -> list[SegmentEvent]:
    """Sample one author's segment stream of the given length."""
    if length < 1:
        raise ValueError("stream length must be >= 1")
    tm = topic_model
    rng = np.random.default_rng(seed)
    cum = tm.transition.cumsum(axis=1)
    topics = np.empty(length, dtype=np.int64)
    topics[0] = rng.integers(tm.num_topics)
    draws = rng.uniform(size=length - 1) if length > 1 else np.empty(0)
    for i in range(1, length):
        topics[i] = np.searchsorted(cum[topics[i - 1]], draws[i - 1], side="right")
    emb = tm.topic_centroids[topics].copy()
    if tm.noise_sigma > 0:
        emb += rng.normal(scale=tm.noise_sigma, size=emb.shape)
    return [SegmentEvent(author_id, i, emb[i], int(topics[i])) for i in range(length)]


def gen_streams(topic_model: TopicModel, num_authors: int, length: int,
                seed: int) -> dict[int, list[SegmentEvent]]:
    """Streams for authors 0..num_authors-1, each from its own sub-seed."""
    return {
        aid: gen_author_stream(topic_model, aid, length, derive_seed(seed, f"author:{aid}"))
        for aid in range(num_authors)
    }


def gen_users(num_users: int, num_topics: int, seed: int,
              affinity_scale: float = 2.0,
              base_rates: dict[str, float] | None = None) -> list[UserModel]:
    """Users with Gaussian per-topic affinities and shared base rates."""
    rates = dict(DEFAULT_BASE_RATES if base_rates is None else base_rates)
    rng = np.random.default_rng(seed)
    return [
        UserModel(uid, rng.normal(scale=affinity_scale, size=num_topics), dict(rates))
        for uid in range(num_users)
    ]


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def draw_labels(user: UserModel, stream: list[SegmentEvent], t: int,
                horizon_rule: str, rng: np.random.Generator,
                task_weights: dict[str, float]) -> dict[str, int]:
    """Bernoulli task labels for one (user, stream, position) triple.

    Label probability is sigmoid(base_rate[task] + affinity[topic] * weight)
    where the topic is taken at t+1 under the "next" horizon rule (the
    default foresight-dependent corpus) or at t under "current" (negative
    control). The final segment is rejected under either rule so corpora
    built with different rules stay index-for-index comparable.
    """
    if horizon_rule not in (HORIZON_NEXT, HORIZON_CURRENT):
        raise ValueError(f"unknown horizon rule: {horizon_rule!r}")
    if t + 1 >= len(stream):
        raise ValueError("interaction at final segment has no next segment")
    topic = stream[t + 1].true_topic if horizon_rule == HORIZON_NEXT else stream[t].true_topic
    labels = {}
    for task in TASKS:
        p = _sigmoid(user.base_rate[task] + user.affinity[topic] * task_weights[task])
        labels[task] = int(rng.uniform() < p)
    return labels


def gen_interactions(users: list[UserModel], streams: dict[int, list[SegmentEvent]],
                     horizon_rule: str, seed: int, num_per_user: int = 50,
                     task_weights: dict[str, float] | None = None) -> list[InteractionRecord]:
    """Draw per-user interaction records via ``draw_labels``."""
    if horizon_rule not in (HORIZON_NEXT, HORIZON_CURRENT):
        raise ValueError(f"unknown horizon rule: {horizon_rule!r}")
    weights = dict(DEFAULT_TASK_WEIGHTS if task_weights is None else task_weights)
    author_ids = sorted(streams)
    for aid in author_ids:
        if len(streams[aid]) < 2:
            raise ValueError(f"author {aid} stream too short for interactions")
    records = []
    for user in sorted(users, key=lambda u: u.user_id):
        rng = np.random.default_rng(derive_seed(seed, f"user:{user.user_id}"))
        for _ in range(num_per_user):
            aid = author_ids[rng.integers(len(author_ids))]
            stream = streams[aid]
            t = int(rng.integers(len(stream) - 1))  # never the final segment
            rec = InteractionRecord(user.user_id, aid, t,
                                    draw_labels(user, stream, t, horizon_rule, rng, weights))
            rec.validate()
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# corpus files: line-delimited, UTF-8, documented field order
# ---------------------------------------------------------------------------

def write_segments(path: str, streams: dict[int, list[SegmentEvent]],
                   binary_embeddings: bool = False) -> None:
    """Segments file: one line per segment, "author seq v0 v1 ... v{d-1}".

    With binary_embeddings=True the text file keeps only "author seq" and
    the vectors go to ``path + '.bin'`` as row-major little-endian float64
    in the same line order.
    """
    buf = io.StringIO()
    vecs = []
    for aid in sorted(streams):
        for ev in streams[aid]:
            if binary_embeddings:
                buf.write(f"{ev.author_id} {ev.seq_index}\n")
                vecs.append(ev.embedding)
            else:
                vals = " ".join(float_text(x) for x in ev.embedding)
                buf.write(f"{ev.author_id} {ev.seq_index} {vals}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(buf.getvalue())
    if binary_embeddings:
        arr = np.asarray(vecs, dtype="<f8")
        with open(path + ".bin", "wb") as f:
            f.write(arr.tobytes())


def read_segments(path: str) -> dict[int, list[SegmentEvent]]:
    """Read a segments file (text or text+binary); true_topic comes back -1."""
    bin_path = path + ".bin"
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                rows.append(parts)
    streams: dict[int, list[SegmentEvent]] = {}
    if rows and len(rows[0]) == 2:
        if not os.path.exists(bin_path):
            raise FileNotFoundError(f"segments index {path} has no {bin_path}")
        flat = np.frombuffer(open(bin_path, "rb").read(), dtype="<f8")
        d = flat.size // len(rows)
        arr = flat.reshape(len(rows), d)
        for i, (aid_s, seq_s) in enumerate(rows):
            ev = SegmentEvent(int(aid_s), int(seq_s), arr[i].astype(np.float64), -1)
            streams.setdefault(ev.author_id, []).append(ev)
    else:
        for parts in rows:
            aid, seq = int(parts[0]), int(parts[1])
            emb = np.array([float(x) for x in parts[2:]], dtype=np.float64)
            streams.setdefault(aid, []).append(SegmentEvent(aid, seq, emb, -1))
    for aid, evs in streams.items():
        evs.sort(key=lambda e: e.seq_index)
    return streams


def write_interactions(path: str, records: list[InteractionRecord]) -> None:
    """Interactions file: "user author at_seq ctr wtr lvtr gtr" per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            labels = " ".join(str(r.labels[t]) for t in TASKS)
            f.write(f"{r.user_id} {r.author_id} {r.at_seq_index} {labels}\n")


def read_interactions(path: str) -> list[InteractionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            labels = {t: int(v) for t, v in zip(TASKS, parts[3:])}
            rec = InteractionRecord(int(parts[0]), int(parts[1]), int(parts[2]), labels)
            rec.validate()
            records.append(rec)
    return records


def write_ground_truth(path: str, topic_model: TopicModel,
                       streams: dict[int, list[SegmentEvent]]) -> None:
    """Hidden-state file: header, transition rows, then per-segment topics.

    Only the evaluation layer is allowed to read this; the quantizer,
    predictor and ranker must never see true topics.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"H {topic_model.num_topics} {float_text(topic_model.self_stay)} "
                f"{float_text(topic_model.noise_sigma)}\n")
        for i, row in enumerate(topic_model.transition):
            f.write("T " + str(i) + " " + " ".join(float_text(x) for x in row) + "\n")
        for aid in sorted(streams):
            for ev in streams[aid]:
                f.write(f"E {ev.author_id} {ev.seq_index} {ev.true_topic}\n")


def read_ground_truth(path: str) -> tuple[np.ndarray, dict[int, list[int]]]:
    """Returns (transition matrix, author -> per-segment true topics)."""
    transition_rows: dict[int, list[float]] = {}
    topics: dict[int, list[tuple[int, int]]] = {}
    num_topics = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "H":
                num_topics = int(parts[1])
            elif parts[0] == "T":
                transition_rows[int(parts[1])] = [float(x) for x in parts[2:]]
            elif parts[0] == "E":
                topics.setdefault(int(parts[1]), []).append((int(parts[2]), int(parts[3])))
    transition = np.array([transition_rows[i] for i in range(num_topics)])
    by_author = {}
    for aid, pairs in topics.items():
        pairs.sort()
        by_author[aid] = [topic for _, topic in pairs]
    return transition, by_author
