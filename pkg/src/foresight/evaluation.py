"""Metrics, rule baselines and the ranking ablation harness.

Covers: next-sid rule baselines (last run, modal raw sid, heaviest run),
a Bayes reference computed from the generator's true transition matrix,
exact-match accuracy, tie-aware AUC via rank sums, impression-weighted
per-user GAUC, and an ablation runner that trains one ranker per feature
arm on identical data order and reports per-task AUC/GAUC deltas.

This is the only module allowed to look at ground-truth topic files.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFiniteError
from .predictor import ForesightOutput
from .ranker import RankerConfig, RankerModel, RankSample, build_sample, predict_probs, train_step
from .seqstore import HistoryWindow, decompress, CompressedSidSequence
from .synth import InteractionRecord
from .util import derive_seed


@dataclass(frozen=True)
class ScoredExample:
    user_id: int
    score: float
    label: int
    task: str = ""


# ---------------------------------------------------------------------------
# rule baselines (next-sid strategies needing no model)
# ---------------------------------------------------------------------------

def baseline_last(window: HistoryWindow) -> int:
    """Predict the sid of the final run."""
    if window.valid_len < 1:
        raise ValueError("empty window")
    return window.sids[-1]


def baseline_max_freq(window: HistoryWindow, l_raw: int) -> int:
    """Predict the modal sid of the last l_raw raw segments.

    The raw stream is reconstructed from the window's runs; count ties go
    to the sid whose latest occurrence is most recent.
    """
    if window.valid_len < 1:
        raise ValueError("empty window")
    if l_raw < 1:
        raise ValueError("l_raw must be >= 1")
    seq = CompressedSidSequence(window.valid_sids(), window.valid_freqs(),
                                sum(window.valid_freqs()))
    raw = decompress(seq)[-l_raw:]
    counts: dict[int, int] = {}
    last_pos: dict[int, int] = {}
    for pos, sid in enumerate(raw):
        counts[sid] = counts.get(sid, 0) + 1
        last_pos[sid] = pos
    return max(counts, key=lambda sid: (counts[sid], last_pos[sid]))


def baseline_max_weight(window: HistoryWindow) -> int:
    """Predict the sid with the largest summed run weight in the window.

    Weight ties go to the sid whose latest run is most recent.
    """
    if window.valid_len < 1:
        raise ValueError("empty window")
    weights: dict[int, int] = {}
    last_run: dict[int, int] = {}
    for run_idx, (sid, f) in enumerate(zip(window.valid_sids(), window.valid_freqs())):
        weights[sid] = weights.get(sid, 0) + f
        last_run[sid] = run_idx
    return max(weights, key=lambda sid: (weights[sid], last_run[sid]))


# ---------------------------------------------------------------------------
# Bayes reference from ground truth
# ---------------------------------------------------------------------------

def majority_mappings(pairs: list[tuple[int, int]]) -> tuple[dict[int, int], dict[int, int]]:
    """Majority-vote maps sid->topic and topic->sid from observed pairs.

    Count ties resolve to the lowest id so the mapping is deterministic.
    """
    sid_votes: dict[int, dict[int, int]] = {}
    topic_votes: dict[int, dict[int, int]] = {}
    for sid, topic in pairs:
        sid_votes.setdefault(sid, {}).setdefault(topic, 0)
        sid_votes[sid][topic] += 1
        topic_votes.setdefault(topic, {}).setdefault(sid, 0)
        topic_votes[topic][sid] += 1

    def best(votes: dict[int, int]) -> int:
        return max(sorted(votes), key=lambda k: votes[k])

    sid_to_topic = {sid: best(v) for sid, v in sid_votes.items()}
    topic_to_sid = {topic: best(v) for topic, v in topic_votes.items()}
    return sid_to_topic, topic_to_sid


def bayes_oracle(window: HistoryWindow, true_transition: np.ndarray,
                 sid_to_topic: dict[int, int], topic_to_sid: dict[int, int]) -> int:
    """Best possible next-run guess given the true topic dynamics.

    The target is the next *distinct* run, so the current topic's
    self-transition mass is excluded before taking the argmax; the winning
    topic maps back through the majority topic->sid table.
    """
    if window.valid_len < 1:
        raise ValueError("empty window")
    cur_sid = window.sids[-1]
    if cur_sid not in sid_to_topic:
        raise ValueError(f"sid {cur_sid} missing from ground-truth mapping")
    cur_topic = sid_to_topic[cur_sid]
    row = np.array(true_transition[cur_topic], dtype=np.float64)
    row[cur_topic] = 0.0
    if row.sum() <= 0.0:
        raise ValueError(f"topic {cur_topic} never leaves itself")
    return topic_to_sid[int(row.argmax())]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(predictions: list[int], targets: list[int]) -> float:
    """Fraction of exact matches."""
    if len(predictions) != len(targets):
        raise ValueError("prediction/target length mismatch")
    if not predictions:
        raise ValueError("empty inputs")
    hits = sum(1 for p, t in zip(predictions, targets) if p == t)
    return hits / len(predictions)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    srt = scores[order]
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and srt[j + 1] == srt[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of ranks i+1 .. j+1
        i = j + 1
    return ranks


def auc(examples: list[ScoredExample]) -> float | None:
    """P(random positive outranks random negative), ties counting half.

    Computed from rank sums (Mann-Whitney). Returns None when only one
    class is present: undefined, not zero.
    """
    scores = np.array([e.score for e in examples], dtype=np.float64)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return _auc_arrays(scores, labels)


def _auc_arrays(scores: np.ndarray, labels: np.ndarray) -> float | None:
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(examples: list[ScoredExample]) -> float | None:
    """Impression-weighted mean of per-user AUC.

    Users whose labels are single-class have no defined AUC and drop out
    of both the numerator and the weights. None if nobody qualifies.
    """
    by_user: dict[int, list[ScoredExample]] = {}
    for e in examples:
        by_user.setdefault(e.user_id, []).append(e)
    total_weight = 0
    total = 0.0
    for uid, exs in by_user.items():
        a = auc(exs)
        if a is None:
            continue
        total += len(exs) * a
        total_weight += len(exs)
    if total_weight == 0:
        return None
    return total / total_weight


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

DEFAULT_ARMS: tuple[tuple[str, bool, bool], ...] = (
    ("base", False, False),
    ("history", True, False),
    ("foresight", True, True),
)


@dataclass
class AblationData:
    """Interactions paired with the predictor output at their moment."""
    interactions: list[InteractionRecord]
    features: list[ForesightOutput]

    def __post_init__(self):
        if len(self.interactions) != len(self.features):
            raise ValueError("interactions/features length mismatch")


@dataclass
class AblationResult:
    arms: list[str]
    tasks: tuple[str, ...]
    seeds: list[int]
    # arm -> task -> metric -> per-seed values (None = undefined metric)
    metrics: dict[str, dict[str, dict[str, list[float | None]]]]
    failures: dict[str, str] = field(default_factory=dict)

    def mean(self, arm: str, task: str, metric: str) -> float | None:
        vals = [v for v in self.metrics[arm][task][metric] if v is not None]
        return sum(vals) / len(vals) if vals else None

    def per_seed_delta(self, arm: str, base_arm: str, task: str,
                       metric: str) -> list[float]:
        out = []
        for a, b in zip(self.metrics[arm][task][metric],
                        self.metrics[base_arm][task][metric]):
            if a is not None and b is not None:
                out.append(a - b)
        return out


def run_ablation(data: AblationData, ranker_cfg: RankerConfig,
                 arms: tuple[tuple[str, bool, bool], ...] = DEFAULT_ARMS,
                 seeds: tuple[int, ...] = (0,), steps: int = 800,
                 batch_size: int = 128, train_fraction: float = 0.8,
                 split_seed: int = 0) -> AblationResult:
    """Train one ranker per arm per seed and measure test AUC/GAUC.

    All arms of a given seed share the train/test split, the parameter
    init seed and the exact batch order, so the only difference between
    them is which feature slots carry live values. An arm whose training
    goes non-finite is recorded as failed; the others continue.
    """
    n = len(data.interactions)
    if n < 10:
        raise ValueError("too few interactions for an ablation")
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    if len(test_idx) == 0:
        raise ValueError("empty test split")

    tasks = ranker_cfg.tasks
    metrics: dict[str, dict[str, dict[str, list[float | None]]]] = {
        name: {t: {"auc": [], "gauc": []} for t in tasks} for name, _, _ in arms}
    failures: dict[str, str] = {}

    for seed in seeds:
        batch_rng = np.random.default_rng(derive_seed(seed, "ablation-batches"))
        batches = [batch_rng.integers(0, len(train_idx), size=batch_size)
                   for _ in range(steps)]
        init_seed = derive_seed(seed, "ablation-init")
        for name, use_hist, use_fore in arms:
            cfg = replace(ranker_cfg, use_history=use_hist,
                          use_foresight=use_fore, seed=init_seed)
            train_samples = [build_sample(data.interactions[i], data.features[i],
                                          use_hist, use_fore) for i in train_idx]
            test_samples = [build_sample(data.interactions[i], data.features[i],
                                         use_hist, use_fore) for i in test_idx]
            model = RankerModel.create(cfg)
            try:
                for idx in batches:
                    train_step(model, [train_samples[i] for i in idx])
            except NonFiniteError as exc:
                failures[f"{name}@seed{seed}"] = str(exc)
                for t in tasks:
                    metrics[name][t]["auc"].append(None)
                    metrics[name][t]["gauc"].append(None)
                continue
            probs = predict_probs(model, test_samples)
            for t in tasks:
                exs = [ScoredExample(s.user_id, float(p), s.labels[t], t)
                       for s, p in zip(test_samples, probs[t])]
                metrics[name][t]["auc"].append(auc(exs))
                metrics[name][t]["gauc"].append(gauc(exs))

    return AblationResult([name for name, _, _ in arms], tasks, list(seeds),
                          metrics, failures)


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

_SCHEMA_VERSION = 1


@dataclass
class EvalReport:
    provenance: dict[str, str]
    accuracy_table: dict[str, float]
    ablation: AblationResult | None = None

    def to_tsv(self) -> str:
        """Machine-readable rows: kind, arm, task, metric, seed, value."""
        lines = [f"foresight-report\t{_SCHEMA_VERSION}"]
        lines.append("kind\tarm\ttask\tmetric\tseed\tvalue")
        for key in sorted(self.provenance):
            lines.append(f"meta\t-\t-\t{key}\t-\t{self.provenance[key]}")
        for strategy in sorted(self.accuracy_table):
            lines.append(
                f"accuracy\t-\t-\t{strategy}\t-\t{self.accuracy_table[strategy]:.6f}")
        ab = self.ablation
        if ab is not None:
            for arm in ab.arms:
                for task in ab.tasks:
                    for metric in ("auc", "gauc"):
                        for seed, val in zip(ab.seeds, ab.metrics[arm][task][metric]):
                            sval = "na" if val is None else f"{val:.6f}"
                            lines.append(
                                f"ablation\t{arm}\t{task}\t{metric}\t{seed}\t{sval}")
            for arm_key in sorted(ab.failures):
                lines.append(f"failure\t{arm_key}\t-\t-\t-\t{ab.failures[arm_key]}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = ["== Foresight evaluation report =="]
        if self.provenance:
            out.append("")
            for key in sorted(self.provenance):
                out.append(f"  {key}: {self.provenance[key]}")
        if self.accuracy_table:
            out.append("")
            out.append("-- Next-sid prediction accuracy --")
            width = max(len(s) for s in self.accuracy_table)
            for strategy in sorted(self.accuracy_table,
                                   key=lambda s: -self.accuracy_table[s]):
                out.append(f"  {strategy:<{width}}  {self.accuracy_table[strategy]:.4f}")
        ab = self.ablation
        if ab is not None:
            out.append("")
            out.append(f"-- Ranking ablation ({len(ab.seeds)} seed(s), "
                       f"mean over seeds) --")
            header = f"  {'arm':<12}{'task':<6}{'AUC':>9}{'dAUC':>9}{'GAUC':>9}{'dGAUC':>9}"
            out.append(header)
            base = ab.arms[0]
            for arm in ab.arms:
                for task in ab.tasks:
                    cells = [f"  {arm:<12}{task:<6}"]
                    for metric in ("auc", "gauc"):
                        m = ab.mean(arm, task, metric)
                        cells.append("       na" if m is None else f"{m:>9.4f}")
                        if arm == base:
                            cells.append(f"{'-':>9}")
                        else:
                            deltas = ab.per_seed_delta(arm, base, task, metric)
                            if deltas:
                                d = sum(deltas) / len(deltas)
                                cells.append(f"{d:>+9.4f}")
                            else:
                                cells.append(f"{'na':>9}")
                    out.append("".join(cells))
            for arm_key in sorted(ab.failures):
                out.append(f"  FAILED {arm_key}: {ab.failures[arm_key]}")
        out.append("")
        return "\n".join(out)


def render_tsv(tsv_text: str) -> str:
    """Re-render a machine-readable report as the human-readable table."""
    lines = tsv_text.splitlines()
    if not lines or not lines[0].startswith("foresight-report\t"):
        raise ValueError("not a foresight report file")
    version = int(lines[0].split("\t")[1])
    if version != _SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema version {version}")
    provenance: dict[str, str] = {}
    acc: dict[str, float] = {}
    arms: list[str] = []
    tasks: list[str] = []
    seeds: list[int] = []
    cells: dict[tuple[str, str, str, int], float | None] = {}
    failures: dict[str, str] = {}
    for line in lines[2:]:
        if not line.strip():
            continue
        kind, arm, task, metric, seed, value = line.split("\t")
        if kind == "meta":
            provenance[metric] = value
        elif kind == "accuracy":
            acc[metric] = float(value)
        elif kind == "ablation":
            if arm not in arms:
                arms.append(arm)
            if task not in tasks:
                tasks.append(task)
            s = int(seed)
            if s not in seeds:
                seeds.append(s)
            cells[(arm, task, metric, s)] = None if value == "na" else float(value)
        elif kind == "failure":
            failures[arm] = value
    ablation = None
    if arms:
        metrics = {
            arm: {task: {metric: [cells.get((arm, task, metric, s)) for s in seeds]
                         for metric in ("auc", "gauc")}
                  for task in tasks}
            for arm in arms}
        ablation = AblationResult(arms, tuple(tasks), seeds, metrics, failures)
    return EvalReport(provenance, acc, ablation).to_text()
