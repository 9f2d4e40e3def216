"""Next-Sid prediction model.

A window of (sid, frequency) runs is embedded through two lookup tables
plus learned positions, encoded by residual self-attention blocks, then a
single learnable begin-of-sequence query cross-attends over the encoding
to produce a foresight embedding. That embedding is classified against
the sid embedding table (the same table used for lookup) to give a
distribution over the next run's Sid.

Initialization zeroes the output path (BOS vector, decoder value
projections, decoder FFN output layers), so an untrained model scores
every class identically: the first training loss is exactly ln(N). The
table rows for real sids can be seeded from quantizer centroids via a
fixed random projection.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .errors import IntegrityError
from .quantizer import Codebook
from .seqstore import CompressedSidSequence, HistoryWindow, make_window


@dataclass(frozen=True)
class PredictorConfig:
    num_codes: int
    model_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    window_runs: int = 100
    freq_cap: int = 512
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.model_dim < 2:
            raise ValueError("model_dim must be >= 2")
        if self.window_runs < 1:
            raise ValueError("window_runs must be >= 1")
        if self.num_codes < 2:
            raise ValueError("num_codes must be >= 2")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if self.freq_cap < 1:
            raise ValueError("freq_cap must be >= 1")


@dataclass(frozen=True)
class ForesightOutput:
    """Inference products: pooled history encoding, foresight embedding,
    next-sid distribution and its argmax (lowest index wins ties)."""
    history_encoding: np.ndarray
    foresight_embedding: np.ndarray
    probs: np.ndarray
    predicted: int


class PredictorModel:
    """Parameter container plus the config it was built under.

    The sid table has num_codes + 2 rows: row N is the window pad code,
    row N+1 is reserved so pad/BOS bookkeeping stays inside one table.
    Classification logits only ever touch rows [0, N).
    """

    def __init__(self, cfg: PredictorConfig, store: nm.ParamStore):
        cfg.validate()
        self.cfg = cfg
        self.store = store
        self.pad_code = cfg.num_codes

    @classmethod
    def create(cls, cfg: PredictorConfig, codebook: Codebook | None = None) -> "PredictorModel":
        cfg.validate()
        if codebook is not None and codebook.num_codes != cfg.num_codes:
            raise ValueError(
                f"codebook has {codebook.num_codes} codes, config says {cfg.num_codes}")
        rng = np.random.default_rng(cfg.seed)
        d = cfg.model_dim
        hidden = 4 * d
        store = nm.ParamStore()

        sid_rows = np.zeros((cfg.num_codes + 2, d))
        if codebook is None:
            sid_rows[: cfg.num_codes] = rng.normal(0.0, 1.0 / np.sqrt(d),
                                                   size=(cfg.num_codes, d))
        else:
            cents = codebook.centroids.astype(np.float64)
            proj = rng.normal(0.0, 1.0 / np.sqrt(codebook.dim), size=(codebook.dim, d))
            sid_rows[: cfg.num_codes] = cents @ proj
        store.add("sid_table", sid_rows)
        store.add("freq_table", rng.normal(0.0, 1.0 / np.sqrt(d),
                                           size=(cfg.freq_cap + 1, d)))
        store.add("pos_table", rng.normal(0.0, 1.0 / np.sqrt(d),
                                          size=(cfg.window_runs, d)))
        store.add("bos", np.zeros((1, d)))

        def make_block(prefix: str, zero_output: bool) -> None:
            store.add(f"{prefix}.wq", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))
            store.add(f"{prefix}.wk", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))
            wv = np.zeros((d, d)) if zero_output else rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
            store.add(f"{prefix}.wv", wv)
            store.add(f"{prefix}.ffn_w1", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden)))
            store.add(f"{prefix}.ffn_b1", np.zeros(hidden))
            w2 = np.zeros((hidden, d)) if zero_output else rng.normal(
                0.0, 1.0 / np.sqrt(hidden), size=(hidden, d))
            store.add(f"{prefix}.ffn_w2", w2)
            store.add(f"{prefix}.ffn_b2", np.zeros(d))

        for i in range(cfg.encoder_layers):
            make_block(f"enc{i}", zero_output=False)
        for i in range(cfg.decoder_layers):
            make_block(f"dec{i}", zero_output=True)
        return cls(cfg, store)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _window_arrays(windows: list[HistoryWindow], cfg: PredictorConfig):
    l = cfg.window_runs
    sids = np.empty((len(windows), l), dtype=np.int64)
    freqs = np.empty((len(windows), l), dtype=np.int64)
    mask = np.empty((len(windows), l), dtype=bool)
    for i, w in enumerate(windows):
        if len(w.sids) != l:
            raise ValueError(f"window length {len(w.sids)} != configured {l}")
        sids[i] = w.sids
        freqs[i] = np.minimum(w.freqs, cfg.freq_cap)
        mask[i] = w.mask()
    return sids, freqs, mask


def _embed_batch(model: PredictorModel, sids: np.ndarray, freqs: np.ndarray,
                 tape: nm.Tape | None) -> nm.Tensor:
    s = model.store
    looked = nm.add(nm.gather_rows(s["sid_table"], sids, tape),
                    nm.gather_rows(s["freq_table"], freqs, tape), tape)
    return nm.add(looked, s["pos_table"], tape)


def embed_window(model: PredictorModel, window: HistoryWindow,
                 tape: nm.Tape | None = None) -> nm.Tensor:
    """Sid + frequency + position embedding of one window, [l_max, d]."""
    sids, freqs, _ = _window_arrays([window], model.cfg)
    out = _embed_batch(model, sids, freqs, tape)
    return nm.reshape(out, (model.cfg.window_runs, model.cfg.model_dim), tape)


def _encode_core(model: PredictorModel, x: nm.Tensor, mask: np.ndarray,
                 tape: nm.Tape | None) -> nm.Tensor:
    s = model.store
    for i in range(model.cfg.encoder_layers):
        p = f"enc{i}"
        att = nm.attention(nm.matmul(x, s[f"{p}.wq"], tape),
                           nm.matmul(x, s[f"{p}.wk"], tape),
                           nm.matmul(x, s[f"{p}.wv"], tape), mask, tape)
        x = nm.add(x, att, tape)
        x = nm.add(x, nm.ffn(x, s[f"{p}.ffn_w1"], s[f"{p}.ffn_b1"],
                             s[f"{p}.ffn_w2"], s[f"{p}.ffn_b2"], tape), tape)
    return x


def encode(model: PredictorModel, embedded: nm.Tensor, mask: np.ndarray,
           tape: nm.Tape | None = None) -> nm.Tensor:
    """Residual self-attention + FFN blocks; zero layers = identity."""
    valid = np.asarray(mask, dtype=bool)
    if not valid.any(axis=-1).all():
        raise nm.FullyMaskedError("encode: window with no valid positions")
    return _encode_core(model, embedded, valid, tape)


def _decode_core(model: PredictorModel, encoded: nm.Tensor, mask: np.ndarray,
                 tape: nm.Tape | None) -> nm.Tensor:
    s = model.store
    if encoded.data.ndim == 3:
        d = nm.expand_batch(s["bos"], encoded.shape[0], tape)
    else:
        d = s["bos"]
    for i in range(model.cfg.decoder_layers):
        p = f"dec{i}"
        att = nm.attention(nm.matmul(d, s[f"{p}.wq"], tape),
                           nm.matmul(encoded, s[f"{p}.wk"], tape),
                           nm.matmul(encoded, s[f"{p}.wv"], tape), mask, tape)
        d = nm.add(d, att, tape)
        d = nm.add(d, nm.ffn(d, s[f"{p}.ffn_w1"], s[f"{p}.ffn_b1"],
                             s[f"{p}.ffn_w2"], s[f"{p}.ffn_b2"], tape), tape)
    return d


def decode(model: PredictorModel, encoded: nm.Tensor, mask: np.ndarray,
           tape: nm.Tape | None = None) -> nm.Tensor:
    """Cross-attention stack driven by the BOS query; output is [.., 1, d]."""
    valid = np.asarray(mask, dtype=bool)
    if not valid.any(axis=-1).all():
        raise nm.FullyMaskedError("decode: no valid encoder positions")
    return _decode_core(model, encoded, valid, tape)


def _sid_logits(model: PredictorModel, d_hat: nm.Tensor,
                tape: nm.Tape | None) -> nm.Tensor:
    rows = nm.gather_rows(model.store["sid_table"],
                          np.arange(model.cfg.num_codes), tape)
    logits = nm.matmul(d_hat, nm.transpose(rows, tape), tape)
    if logits.data.ndim == 3:
        logits = nm.reshape(logits, (logits.shape[0], model.cfg.num_codes), tape)
    return logits


def classify(model: PredictorModel, d_hat: nm.Tensor,
             tape: nm.Tape | None = None) -> nm.Tensor:
    """Softmax of d_hat against the real-sid rows (pad/reserved excluded)."""
    return nm.softmax_rows(_sid_logits(model, d_hat, tape), tape)


def _forward_logits(model: PredictorModel, windows: list[HistoryWindow],
                    tape: nm.Tape | None):
    sids, freqs, mask = _window_arrays(windows, model.cfg)
    embedded = _embed_batch(model, sids, freqs, tape)
    encoded = encode(model, embedded, mask, tape)
    d_hat = decode(model, encoded, mask, tape)
    return encoded, d_hat, _sid_logits(model, d_hat, tape), mask


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

def train_step(model: PredictorModel, batch: list[tuple[HistoryWindow, int]],
               lr: float | None = None) -> float:
    """One optimizer step on a batch of (window, next-sid) pairs.

    Returns the pre-step mean cross-entropy.
    """
    if not batch:
        raise ValueError("empty training batch")
    targets = np.array([t for _, t in batch], dtype=np.int64)
    if targets.min() < 0 or targets.max() >= model.cfg.num_codes:
        raise ValueError("target sid outside the real-code range")
    tape = nm.Tape()
    _, _, logits, _ = _forward_logits(model, [w for w, _ in batch], tape)
    loss = nm.cross_entropy_mean(logits, targets, tape)
    nm.backward(tape, loss)
    nm.optimizer_step(model.store, lr=model.cfg.learning_rate if lr is None else lr)
    return loss.item()


_PREDICT_CHUNK = 512


def predict_batch(model: PredictorModel, windows: list[HistoryWindow]) -> list[ForesightOutput]:
    """Pure inference on a batch of non-empty windows; memory stays bounded
    by processing at most _PREDICT_CHUNK windows at a time."""
    if not windows:
        return []
    for w in windows:
        if w.valid_len < 1:
            raise ValueError("predict on an empty window")
    if len(windows) > _PREDICT_CHUNK:
        out: list[ForesightOutput] = []
        for lo in range(0, len(windows), _PREDICT_CHUNK):
            out.extend(predict_batch(model, windows[lo:lo + _PREDICT_CHUNK]))
        return out
    encoded, d_hat, logits, mask = _forward_logits(model, windows, None)
    probs = nm.softmax_rows(logits, None).data
    valid_counts = mask.sum(axis=1, keepdims=True)
    pooled = (encoded.data * mask[:, :, None]).sum(axis=1) / valid_counts
    fores = d_hat.data[:, 0, :]
    return [
        ForesightOutput(pooled[i].copy(), fores[i].copy(), probs[i].copy(),
                        int(probs[i].argmax()))
        for i in range(len(windows))
    ]


def predict_next(model: PredictorModel, window: HistoryWindow) -> ForesightOutput:
    """Foresight for a single window; never mutates parameters."""
    return predict_batch(model, [window])[0]


def build_training_examples(seqs: dict[int, CompressedSidSequence],
                            window_runs: int, num_codes: int) -> list[tuple[HistoryWindow, int]]:
    """Cut (context runs, next run sid) pairs at every run boundary."""
    pad = num_codes
    examples = []
    for aid in sorted(seqs):
        seq = seqs[aid]
        for k in range(1, len(seq.distinct)):
            lo = max(0, k - window_runs)
            w = make_window(seq.distinct[lo:k], seq.freq[lo:k], window_runs, pad)
            examples.append((w, seq.distinct[k]))
    return examples


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_predictor(model: PredictorModel, ckpt_path: str, meta_path: str,
                   codebook_sha256: str | None = None) -> str:
    """Write checkpoint + metadata sidecar; returns the checkpoint digest."""
    digest = nm.save_checkpoint(model.store, ckpt_path)
    meta = {
        "config": asdict(model.cfg),
        "codebook_sha256": codebook_sha256,
        "checkpoint_sha256": digest,
    }
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return digest


def load_predictor(ckpt_path: str, meta_path: str,
                   expect_codebook_sha256: str | None = None) -> PredictorModel:
    """Load a checkpoint, refusing on any hash disagreement."""
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    digest = nm.read_checkpoint_digest(ckpt_path)
    if digest != meta["checkpoint_sha256"]:
        raise IntegrityError(
            f"{ckpt_path}: digest {digest[:12]}... does not match sidecar")
    if expect_codebook_sha256 is not None:
        recorded = meta.get("codebook_sha256")
        if recorded != expect_codebook_sha256:
            raise IntegrityError(
                "predictor was trained against a different codebook "
                f"(recorded {str(recorded)[:12]}..., "
                f"current {expect_codebook_sha256[:12]}...)")
    cfg = PredictorConfig(**meta["config"])
    store = nm.load_checkpoint(ckpt_path)
    model = PredictorModel(cfg, store)
    _check_inventory(model)
    return model


def _check_inventory(model: PredictorModel) -> None:
    expected = set(_expected_param_names(model.cfg))
    actual = set(model.store.names())
    if expected != actual:
        missing = expected - actual
        extra = actual - expected
        raise IntegrityError(
            f"checkpoint parameter mismatch: missing={sorted(missing)} "
            f"extra={sorted(extra)}")


def _expected_param_names(cfg: PredictorConfig) -> list[str]:
    names = ["sid_table", "freq_table", "pos_table", "bos"]
    for kind, n in (("enc", cfg.encoder_layers), ("dec", cfg.decoder_layers)):
        for i in range(n):
            for leaf in ("wq", "wk", "wv", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
                names.append(f"{kind}{i}.{leaf}")
    return names
