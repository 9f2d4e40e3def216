"""Stage orchestration: generate, quantize, store, train, evaluate.

Each stage hashes its config slice plus its input files into a manifest;
a stage whose hashes all match is a no-op on rerun. Stage outputs are
themselves hashed so corruption (or out-of-band edits) is caught the next
time anything consumes them. Every stage draws randomness only from
seeds derived off the global seed, so reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import evaluation as ev
from . import predictor as pred
from . import quantizer as qz
from . import ranker as rk
from . import seqstore as ss
from . import synth
from .config import PipelineConfig
from .errors import ConfigError, IntegrityError
from .util import derive_seed, sha256_file

ARM_FLAGS = {name: (h, f) for name, h, f in ev.DEFAULT_ARMS}


class Paths:
    """Fixed artifact layout under the configured workdir."""

    def __init__(self, workdir: str):
        self.workdir = workdir
        j = lambda name: os.path.join(workdir, name)
        self.segments = j("segments.txt")
        self.segments_bin = j("segments.txt.bin")
        self.interactions = j("interactions.txt")
        self.ground_truth = j("ground_truth.txt")
        self.codebook = j("codebook.bin")
        self.sids_log = j("sids.log")
        self.snapshot = j("store_snapshot.bin")
        self.predictor_ckpt = j("predictor.ckpt")
        self.predictor_meta = j("predictor.meta.json")
        self.report_txt = j("report.txt")
        self.report_tsv = j("report.tsv")
        self.manifest = j("manifest.json")

    def ranker_ckpt(self, arm: str) -> str:
        return os.path.join(self.workdir, f"ranker_{arm}.ckpt")

    def ranker_meta(self, arm: str) -> str:
        return os.path.join(self.workdir, f"ranker_{arm}.meta.json")


class Manifest:
    def __init__(self, path: str):
        self.path = path
        self.stages: dict[str, dict] = {}
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                self.stages = json.load(f).get("stages", {})

    def save(self) -> None:
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump({"stages": self.stages}, f, indent=2, sort_keys=True)
            f.write("\n")

    def record(self, name: str, config_hash: str, inputs: dict[str, str],
               outputs: dict[str, str], wall_time: float) -> None:
        self.stages[name] = {
            "config_hash": config_hash,
            "inputs": inputs,
            "outputs": outputs,
            "wall_time": wall_time,
        }
        self.save()

    def up_to_date(self, name: str, config_hash: str,
                   input_hashes: dict[str, str], output_paths: list[str]) -> bool:
        entry = self.stages.get(name)
        if entry is None or entry["config_hash"] != config_hash:
            return False
        if entry["inputs"] != input_hashes:
            return False
        if set(entry["outputs"]) != set(output_paths):
            return False
        for path, recorded in entry["outputs"].items():
            if not os.path.exists(path) or sha256_file(path) != recorded:
                return False
        return True


@dataclass
class StageOutcome:
    name: str
    ran: bool
    wall_time: float = 0.0


def _run_stage(cfg: PipelineConfig, name: str, sections: tuple[str, ...],
               input_paths: list[str], output_paths: list[str],
               force: bool, fn, fail_on_existing: bool = False) -> StageOutcome:
    paths = Paths(cfg.workdir)
    os.makedirs(cfg.workdir, exist_ok=True)
    manifest = Manifest(paths.manifest)
    config_hash = cfg.config_hash(sections)
    for p in input_paths:
        if not os.path.exists(p):
            raise IntegrityError(f"stage {name}: missing input {p} "
                                 f"(run the upstream stage first)")
    input_hashes = {p: sha256_file(p) for p in input_paths}
    if not force and manifest.up_to_date(name, config_hash, input_hashes, output_paths):
        print(f"[{name}] up to date, skipping")
        return StageOutcome(name, ran=False)
    if fail_on_existing and not force:
        existing = [p for p in output_paths if os.path.exists(p)]
        if existing:
            raise ConfigError(
                f"stage {name}: outputs already exist ({existing[0]}, ...); "
                "pass --force to overwrite")
    t0 = time.perf_counter()
    fn()
    wall = time.perf_counter() - t0
    output_hashes = {p: sha256_file(p) for p in output_paths}
    manifest.record(name, config_hash, input_hashes, output_hashes, wall)
    print(f"[{name}] done in {wall:.1f}s")
    return StageOutcome(name, ran=True, wall_time=wall)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_gen(cfg: PipelineConfig, force: bool = False) -> StageOutcome:
    paths = Paths(cfg.workdir)
    s = cfg.synth
    outputs = [paths.segments, paths.interactions, paths.ground_truth]
    if s.embedding_format == "binary":
        outputs.append(paths.segments_bin)

    def run():
        tm = synth.gen_topic_model(s.num_topics, s.embedding_dim, s.self_stay,
                                   cfg.stage_seed("synth-topics"), s.noise_sigma,
                                   concentration=s.concentration)
        streams = synth.gen_streams(tm, s.num_authors, s.stream_length,
                                    cfg.stage_seed("synth-streams"))
        users = synth.gen_users(s.num_users, s.num_topics,
                                cfg.stage_seed("synth-users"), s.affinity_scale)
        records = synth.gen_interactions(users, streams, s.horizon_rule,
                                         cfg.stage_seed("synth-interactions"),
                                         s.interactions_per_user)
        synth.write_segments(paths.segments, streams,
                             binary_embeddings=s.embedding_format == "binary")
        synth.write_interactions(paths.interactions, records)
        synth.write_ground_truth(paths.ground_truth, tm, streams)

    return _run_stage(cfg, "gen", ("synth",), [], outputs, force, run,
                      fail_on_existing=True)


def cmd_train_quantizer(cfg: PipelineConfig, force: bool = False) -> StageOutcome:
    paths = Paths(cfg.workdir)
    inputs = [paths.segments]
    if cfg.synth.embedding_format == "binary":
        inputs.append(paths.segments_bin)

    def run():
        streams = synth.read_segments(paths.segments)
        x = np.concatenate([
            np.stack([ev_.embedding for ev_ in streams[aid]])
            for aid in sorted(streams)
        ])
        cb = qz.train_kmeans(x, cfg.quantizer.codebook_size,
                             cfg.quantizer.max_iters, cfg.quantizer.tol,
                             cfg.stage_seed("quantizer"))
        qz.save_codebook(cb, paths.codebook)

    return _run_stage(cfg, "train-quantizer", ("synth", "quantizer"),
                      inputs, [paths.codebook], force, run)


def cmd_quantize(cfg: PipelineConfig, force: bool = False) -> StageOutcome:
    paths = Paths(cfg.workdir)
    inputs = [paths.segments, paths.codebook]
    if cfg.synth.embedding_format == "binary":
        inputs.append(paths.segments_bin)

    def run():
        streams = synth.read_segments(paths.segments)
        cb = qz.load_codebook(paths.codebook)
        events = [ev_ for aid in sorted(streams) for ev_ in streams[aid]]
        triples = qz.quantize_stream(events, cb)
        if os.path.exists(paths.sids_log):
            os.remove(paths.sids_log)
        with ss.AuthorStore(cb.num_codes, log_path=paths.sids_log) as store:
            for aid, _seq, sid in triples:
                store.append(aid, sid)
            ss.save_snapshot(store, paths.snapshot)

    return _run_stage(cfg, "quantize", ("synth", "quantizer"), inputs,
                      [paths.sids_log, paths.snapshot], force, run)


def _split_examples(examples: list, holdout_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(examples))
    n_hold = max(1, int(round(holdout_fraction * len(examples))))
    hold = [examples[i] for i in perm[:n_hold]]
    train = [examples[i] for i in perm[n_hold:]]
    return train, hold


def _load_author_sids(paths: Paths) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    with open(paths.sids_log, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                out.setdefault(int(parts[0]), []).append(int(parts[2]))
    return out


def _predictor_examples(cfg: PipelineConfig, paths: Paths, num_codes: int):
    store = ss.AuthorStore.replay_log(paths.sids_log, num_codes)
    seqs = {aid: store.sequence(aid) for aid in store.authors()}
    examples = pred.build_training_examples(seqs, cfg.seqstore.window_runs, num_codes)
    return _split_examples(examples, cfg.eval.holdout_fraction,
                           cfg.stage_seed("predictor-holdout"))


def cmd_train_predictor(cfg: PipelineConfig, force: bool = False) -> StageOutcome:
    paths = Paths(cfg.workdir)
    inputs = [paths.sids_log, paths.codebook]

    def run():
        cb = qz.load_codebook(paths.codebook)
        train_examples, _ = _predictor_examples(cfg, paths, cb.num_codes)
        if not train_examples:
            raise ConfigError("no training windows; corpus too small")
        p = cfg.predictor
        pcfg = pred.PredictorConfig(
            num_codes=cb.num_codes, model_dim=p.model_dim,
            encoder_layers=p.encoder_layers, decoder_layers=p.decoder_layers,
            window_runs=cfg.seqstore.window_runs, freq_cap=cfg.seqstore.freq_cap,
            learning_rate=p.learning_rate, seed=cfg.stage_seed("predictor-init"))
        model = pred.PredictorModel.create(pcfg, cb)
        rng = np.random.default_rng(cfg.stage_seed("predictor-batches"))
        report_every = max(1, p.steps // 5)
        for step in range(p.steps):
            idx = rng.integers(0, len(train_examples), size=p.batch_size)
            loss = pred.train_step(model, [train_examples[i] for i in idx])
            if (step + 1) % report_every == 0:
                print(f"  predictor step {step + 1}/{p.steps} loss {loss:.4f}")
        pred.save_predictor(model, paths.predictor_ckpt, paths.predictor_meta,
                            codebook_sha256=sha256_file(paths.codebook))

    return _run_stage(cfg, "train-predictor",
                      ("synth", "quantizer", "seqstore", "predictor", "eval"),
                      inputs, [paths.predictor_ckpt, paths.predictor_meta],
                      force, run)


def _load_predictor_checked(cfg: PipelineConfig, paths: Paths) -> pred.PredictorModel:
    # refuses to load when the codebook on disk is not the one trained against
    return pred.load_predictor(paths.predictor_ckpt, paths.predictor_meta,
                               expect_codebook_sha256=sha256_file(paths.codebook))


def _build_ablation_data(cfg: PipelineConfig, paths: Paths,
                         model: pred.PredictorModel) -> ev.AblationData:
    interactions = synth.read_interactions(paths.interactions)
    author_sids = _load_author_sids(paths)
    by_author: dict[int, list[int]] = {}
    for i, rec in enumerate(interactions):
        by_author.setdefault(rec.author_id, []).append(i)
    features: list[pred.ForesightOutput | None] = [None] * len(interactions)
    l_max = cfg.seqstore.window_runs
    for aid, idxs in sorted(by_author.items()):
        sids = author_sids.get(aid)
        if sids is None:
            raise IntegrityError(f"interactions reference unknown author {aid}")
        ts = sorted({interactions[i].at_seq_index for i in idxs})
        windows = ss.windows_at(sids, ts, l_max, model.pad_code)
        uniq = {t: out for t, out in
                zip(ts, pred.predict_batch(model, [windows[t] for t in ts]))}
        for i in idxs:
            features[i] = uniq[interactions[i].at_seq_index]
    return ev.AblationData(interactions, features)  # type: ignore[arg-type]


def _ranker_config(cfg: PipelineConfig, model_dim: int, use_history: bool,
                   use_foresight: bool, seed: int) -> rk.RankerConfig:
    r = cfg.ranker
    return rk.RankerConfig(
        num_users=cfg.synth.num_users, num_authors=cfg.synth.num_authors,
        feature_dim=model_dim, num_experts=r.num_experts,
        expert_hidden=r.expert_hidden, expert_out=r.expert_out,
        tower_hidden=r.tower_hidden, id_dim=r.id_dim,
        use_history=use_history, use_foresight=use_foresight,
        learning_rate=r.learning_rate, seed=seed)


def cmd_train_ranker(cfg: PipelineConfig, force: bool = False,
                     arm: str = "foresight") -> StageOutcome:
    if arm not in ARM_FLAGS:
        raise ConfigError(f"unknown ablation arm {arm!r}; "
                          f"choose from {sorted(ARM_FLAGS)}")
    paths = Paths(cfg.workdir)
    inputs = [paths.sids_log, paths.interactions, paths.codebook,
              paths.predictor_ckpt, paths.predictor_meta]

    def run():
        model = _load_predictor_checked(cfg, paths)
        data = _build_ablation_data(cfg, paths, model)
        use_hist, use_fore = ARM_FLAGS[arm]
        rcfg = _ranker_config(cfg, model.cfg.model_dim, use_hist, use_fore,
                              cfg.stage_seed(f"ranker-init:{arm}"))
        samples = [rk.build_sample(rec, out, use_hist, use_fore)
                   for rec, out in zip(data.interactions, data.features)]
        ranker = rk.RankerModel.create(rcfg)
        rng = np.random.default_rng(cfg.stage_seed(f"ranker-batches:{arm}"))
        r = cfg.ranker
        report_every = max(1, r.steps // 5)
        for step in range(r.steps):
            idx = rng.integers(0, len(samples), size=r.batch_size)
            loss = rk.train_step(ranker, [samples[i] for i in idx])
            if (step + 1) % report_every == 0:
                print(f"  ranker[{arm}] step {step + 1}/{r.steps} loss {loss:.4f}")
        rk.save_ranker(ranker, paths.ranker_ckpt(arm), paths.ranker_meta(arm),
                       predictor_sha256=sha256_file(paths.predictor_ckpt))

    return _run_stage(cfg, f"train-ranker:{arm}",
                      ("synth", "quantizer", "seqstore", "predictor", "ranker", "eval"),
                      inputs, [paths.ranker_ckpt(arm), paths.ranker_meta(arm)],
                      force, run)


def _accuracy_table(cfg: PipelineConfig, paths: Paths,
                    model: pred.PredictorModel, num_codes: int) -> dict[str, float]:
    _, held = _predictor_examples(cfg, paths, num_codes)
    if not held:
        raise ConfigError("empty holdout; increase corpus size")
    windows = [w for w, _ in held]
    targets = [t for _, t in held]
    outs = pred.predict_batch(model, windows)
    table = {
        "model": ev.accuracy([o.predicted for o in outs], targets),
        "last": ev.accuracy([ev.baseline_last(w) for w in windows], targets),
        "max_freq": ev.accuracy(
            [ev.baseline_max_freq(w, cfg.eval.baseline_raw_window) for w in windows],
            targets),
        "max_weight": ev.accuracy([ev.baseline_max_weight(w) for w in windows],
                                  targets),
    }
    transition, topics_by_author = synth.read_ground_truth(paths.ground_truth)
    author_sids = _load_author_sids(paths)
    pairs = []
    for aid, sids in author_sids.items():
        for sid, topic in zip(sids, topics_by_author.get(aid, [])):
            pairs.append((sid, topic))
    sid_to_topic, topic_to_sid = ev.majority_mappings(pairs)
    bayes_preds = [ev.bayes_oracle(w, transition, sid_to_topic, topic_to_sid)
                   for w in windows]
    table["bayes"] = ev.accuracy(bayes_preds, targets)
    return table


def cmd_evaluate(cfg: PipelineConfig, force: bool = False) -> StageOutcome:
    paths = Paths(cfg.workdir)
    inputs = [paths.sids_log, paths.interactions, paths.ground_truth,
              paths.codebook, paths.predictor_ckpt, paths.predictor_meta]

    def run():
        model = _load_predictor_checked(cfg, paths)
        acc = _accuracy_table(cfg, paths, model, model.cfg.num_codes)
        data = _build_ablation_data(cfg, paths, model)
        rcfg = _ranker_config(cfg, model.cfg.model_dim, True, True, 0)
        seeds = tuple(cfg.stage_seed(f"eval-run:{i}")
                      for i in range(cfg.eval.num_seeds))
        result = ev.run_ablation(
            data, rcfg, arms=ev.DEFAULT_ARMS, seeds=seeds,
            steps=cfg.ranker.steps, batch_size=cfg.ranker.batch_size,
            train_fraction=cfg.eval.train_fraction,
            split_seed=cfg.stage_seed("eval-split"))
        report = ev.EvalReport(
            provenance={
                "config_hash": cfg.config_hash(),
                "global_seed": str(cfg.seed),
                "num_seeds": str(cfg.eval.num_seeds),
            },
            accuracy_table=acc,
            ablation=result,
        )
        with open(paths.report_tsv, "w", encoding="utf-8", newline="\n") as f:
            f.write(report.to_tsv())
        with open(paths.report_txt, "w", encoding="utf-8", newline="\n") as f:
            f.write(report.to_text())

    return _run_stage(cfg, "evaluate",
                      ("synth", "quantizer", "seqstore", "predictor", "ranker", "eval"),
                      inputs, [paths.report_txt, paths.report_tsv], force, run)


def cmd_report(cfg: PipelineConfig) -> str:
    paths = Paths(cfg.workdir)
    if not os.path.exists(paths.report_tsv):
        raise IntegrityError(f"no report at {paths.report_tsv}; run evaluate first")
    with open(paths.report_tsv, "r", encoding="utf-8") as f:
        return ev.render_tsv(f.read())


def cmd_score(cfg: PipelineConfig, candidates_path: str,
              arm: str = "foresight") -> str:
    """Rank candidate authors per user from a candidates file.

    Input lines are "user_id author_id author_id ..."; output lines are
    "user_id author_id score" in rank order, best first.
    """
    if arm not in ARM_FLAGS:
        raise ConfigError(f"unknown ablation arm {arm!r}")
    paths = Paths(cfg.workdir)
    if not os.path.exists(candidates_path):
        raise ConfigError(f"candidates file not found: {candidates_path}")
    model = _load_predictor_checked(cfg, paths)
    ranker = rk.load_ranker(paths.ranker_ckpt(arm), paths.ranker_meta(arm))
    use_hist, use_fore = ARM_FLAGS[arm]
    author_sids = _load_author_sids(paths)
    l_max = cfg.seqstore.window_runs

    feature_cache: dict[int, pred.ForesightOutput] = {}

    def features_for(aid: int) -> pred.ForesightOutput:
        if aid not in feature_cache:
            sids = author_sids.get(aid)
            if sids is None:
                raise ConfigError(f"candidate author {aid} has no sid history")
            window = ss.windows_at(sids, [len(sids) - 1], l_max, model.pad_code)[len(sids) - 1]
            feature_cache[aid] = pred.predict_next(model, window)
        return feature_cache[aid]

    zero = np.zeros(model.cfg.model_dim)
    lines = []
    with open(candidates_path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            uid = int(parts[0])
            cands = []
            for a in parts[1:]:
                aid = int(a)
                out = features_for(aid)
                hist = out.history_encoding if use_hist else zero
                fore = out.foresight_embedding if use_fore else zero
                cands.append((aid, hist, fore))
            for aid, prob in rk.score(ranker, uid, cands):
                lines.append(f"{uid} {aid} {prob:.6f}")
    return "\n".join(lines) + "\n"


def run_all(cfg: PipelineConfig, force: bool = False) -> list[StageOutcome]:
    """Convenience driver: every stage in dependency order."""
    outcomes = [cmd_gen(cfg, force)]
    outcomes.append(cmd_train_quantizer(cfg, force))
    outcomes.append(cmd_quantize(cfg, force))
    outcomes.append(cmd_train_predictor(cfg, force))
    outcomes.append(cmd_evaluate(cfg, force))
    return outcomes
