"""Multi-gate mixture-of-experts ranking model.

Per sample, the input is the concatenation of a user id embedding, an
author id embedding, and two detached predictor features: the pooled
history encoding and the foresight embedding. Shared experts feed
per-task softmax gates and per-task sigmoid towers, one head per
interaction task (ctr, wtr, lvtr, gtr).

The predictor features enter by value only -- build_sample copies the
arrays -- so no amount of ranker training can move predictor parameters.
Ablation arms are expressed purely through the two feature flags, which
zero the corresponding slots instead of changing the input layout, so
every arm trains an identically-shaped model from identical seeds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .errors import IntegrityError
from .predictor import ForesightOutput
from .synth import TASKS, InteractionRecord

PROB_EPS = 1e-7


@dataclass(frozen=True)
class RankerConfig:
    num_users: int
    num_authors: int
    feature_dim: int
    tasks: tuple[str, ...] = TASKS
    num_experts: int = 4
    expert_hidden: int = 64
    expert_out: int = 32
    tower_hidden: int = 32
    id_dim: int = 16
    use_history: bool = True
    use_foresight: bool = True
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ValueError("need at least one expert")
        if not self.tasks:
            raise ValueError("need at least one task")
        if min(self.num_users, self.num_authors, self.feature_dim, self.id_dim) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def input_dim(self) -> int:
        return 2 * self.id_dim + 2 * self.feature_dim


@dataclass
class RankSample:
    user_id: int
    author_id: int
    history_feature: np.ndarray
    foresight_feature: np.ndarray
    labels: dict[str, int] | None = field(default=None)


def build_sample(interaction: InteractionRecord, predicted: ForesightOutput,
                 use_history: bool, use_foresight: bool) -> RankSample:
    """Detach predictor outputs into a training sample.

    Disabled flags zero the corresponding feature slot; enabled flags copy
    the arrays by value, cutting any gradient path back to the predictor.
    """
    hist = predicted.history_encoding.copy() if use_history else np.zeros_like(
        predicted.history_encoding)
    fore = predicted.foresight_embedding.copy() if use_foresight else np.zeros_like(
        predicted.foresight_embedding)
    return RankSample(interaction.user_id, interaction.author_id, hist, fore,
                      dict(interaction.labels))


class RankerModel:

    def __init__(self, cfg: RankerConfig, store: nm.ParamStore):
        cfg.validate()
        self.cfg = cfg
        self.store = store

    @classmethod
    def create(cls, cfg: RankerConfig) -> "RankerModel":
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        store = nm.ParamStore()
        d_in = cfg.input_dim

        def normal(*shape):
            return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)

        # +1 row: shared out-of-vocabulary slot for unknown ids
        store.add("user_table", rng.normal(0.0, 0.1, size=(cfg.num_users + 1, cfg.id_dim)))
        store.add("author_table", rng.normal(0.0, 0.1, size=(cfg.num_authors + 1, cfg.id_dim)))
        for k in range(cfg.num_experts):
            store.add(f"expert{k}.w1", normal(d_in, cfg.expert_hidden))
            store.add(f"expert{k}.b1", np.zeros(cfg.expert_hidden))
            store.add(f"expert{k}.w2", normal(cfg.expert_hidden, cfg.expert_out))
            store.add(f"expert{k}.b2", np.zeros(cfg.expert_out))
        for task in cfg.tasks:
            store.add(f"gate.{task}.w", normal(d_in, cfg.num_experts))
            store.add(f"gate.{task}.b", np.zeros(cfg.num_experts))
            store.add(f"tower.{task}.w1", normal(cfg.expert_out, cfg.tower_hidden))
            store.add(f"tower.{task}.b1", np.zeros(cfg.tower_hidden))
            # zero output layer: an untrained ranker scores 0.5 everywhere
            store.add(f"tower.{task}.w2", np.zeros((cfg.tower_hidden, 1)))
            store.add(f"tower.{task}.b2", np.zeros(1))
        return cls(cfg, store)


def _id_rows(ids: np.ndarray, table_rows: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    oov = table_rows - 1
    return np.where((ids >= 0) & (ids < oov), ids, oov)


def _forward_batch(model: RankerModel, samples: list[RankSample],
                   tape: nm.Tape | None) -> dict[str, nm.Tensor]:
    cfg = model.cfg
    s = model.store
    uids = _id_rows([x.user_id for x in samples], cfg.num_users + 1)
    aids = _id_rows([x.author_id for x in samples], cfg.num_authors + 1)
    hist = nm.Tensor(np.stack([x.history_feature for x in samples]))
    fore = nm.Tensor(np.stack([x.foresight_feature for x in samples]))
    x = nm.concat_cols([
        nm.gather_rows(s["user_table"], uids, tape),
        nm.gather_rows(s["author_table"], aids, tape),
        hist, fore,
    ], tape)

    experts = [
        nm.ffn(x, s[f"expert{k}.w1"], s[f"expert{k}.b1"],
               s[f"expert{k}.w2"], s[f"expert{k}.b2"], tape)
        for k in range(cfg.num_experts)
    ]
    probs: dict[str, nm.Tensor] = {}
    for task in cfg.tasks:
        gate = nm.softmax_rows(
            nm.add(nm.matmul(x, s[f"gate.{task}.w"], tape), s[f"gate.{task}.b"], tape),
            tape)
        mixed = None
        for k, expert in enumerate(experts):
            term = nm.mul(expert, nm.slice_cols(gate, k, k + 1, tape), tape)
            mixed = term if mixed is None else nm.add(mixed, term, tape)
        h = nm.relu(nm.add(nm.matmul(mixed, s[f"tower.{task}.w1"], tape),
                           s[f"tower.{task}.b1"], tape), tape)
        logit = nm.add(nm.matmul(h, s[f"tower.{task}.w2"], tape),
                       s[f"tower.{task}.b2"], tape)
        probs[task] = nm.clamp(nm.sigmoid(logit, tape), PROB_EPS, 1.0 - PROB_EPS, tape)
    return probs


def forward(model: RankerModel, sample: RankSample) -> dict[str, float]:
    """Per-task probabilities for one sample."""
    probs = _forward_batch(model, [sample], None)
    return {task: float(t.data[0, 0]) for task, t in probs.items()}


def train_step(model: RankerModel, batch: list[RankSample],
               lr: float | None = None) -> float:
    """One optimizer step; loss is mean over batch, summed over tasks."""
    if not batch:
        raise ValueError("empty training batch")
    for x in batch:
        if x.labels is None:
            raise ValueError("training sample without labels")
    tape = nm.Tape()
    probs = _forward_batch(model, batch, tape)
    loss = None
    for task in model.cfg.tasks:
        y = np.array([[x.labels[task]] for x in batch], dtype=np.float64)
        term = nm.bce_loss(probs[task], y, tape, eps=PROB_EPS)
        loss = term if loss is None else nm.add(loss, term, tape)
    nm.backward(tape, loss)
    nm.optimizer_step(model.store, lr=model.cfg.learning_rate if lr is None else lr)
    return loss.item()


def predict_probs(model: RankerModel, samples: list[RankSample]) -> dict[str, np.ndarray]:
    """Batched inference; arrays of per-task probabilities."""
    if not samples:
        return {task: np.empty(0) for task in model.cfg.tasks}
    probs = _forward_batch(model, samples, None)
    return {task: t.data[:, 0].copy() for task, t in probs.items()}


def score(model: RankerModel, user_id: int,
          candidates: list[tuple[int, np.ndarray, np.ndarray]],
          task: str = "ctr") -> list[tuple[int, float]]:
    """Rank candidate (author, history, foresight) triples for one user.

    Descending by the chosen task's probability; ties fall back to
    ascending author id.
    """
    if not candidates:
        raise ValueError("no candidates to score")
    if task not in model.cfg.tasks:
        raise ValueError(f"unknown task {task!r}")
    samples = [RankSample(user_id, aid, np.asarray(h, dtype=np.float64),
                          np.asarray(f, dtype=np.float64))
               for aid, h, f in candidates]
    probs = predict_probs(model, samples)[task]
    order = sorted(range(len(candidates)),
                   key=lambda i: (-probs[i], candidates[i][0]))
    return [(candidates[i][0], float(probs[i])) for i in order]


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_ranker(model: RankerModel, ckpt_path: str, meta_path: str,
                predictor_sha256: str | None = None) -> str:
    digest = nm.save_checkpoint(model.store, ckpt_path)
    meta = {
        "config": asdict(model.cfg),
        "predictor_sha256": predictor_sha256,
        "checkpoint_sha256": digest,
    }
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return digest


def load_ranker(ckpt_path: str, meta_path: str) -> RankerModel:
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    digest = nm.read_checkpoint_digest(ckpt_path)
    if digest != meta["checkpoint_sha256"]:
        raise IntegrityError(f"{ckpt_path}: digest does not match sidecar")
    cfg_dict = dict(meta["config"])
    cfg_dict["tasks"] = tuple(cfg_dict["tasks"])
    cfg = RankerConfig(**cfg_dict)
    return RankerModel(cfg, nm.load_checkpoint(ckpt_path))
