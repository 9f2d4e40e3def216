# Training the next-sid predictor and comparing it with the rule baselines
# and the ground-truth Bayes reference. Takes a minute or two.

import numpy as np

from foresight import evaluation as ev
from foresight import predictor as pred
from foresight import quantizer as qz
from foresight import seqstore as ss
from foresight import synth

SEED = 11
K, L_MAX = 10, 16

tm = synth.gen_topic_model(K, 12, self_stay=0.5, seed=SEED, noise_sigma=0.2)
streams = synth.gen_streams(tm, num_authors=40, length=600, seed=SEED + 1)
events = [e for a in sorted(streams) for e in streams[a]]
x = np.stack([e.embedding for e in events])
codebook = qz.train_kmeans(x, K, max_iters=60, seed=SEED + 2)
triples = qz.quantize_stream(events, codebook)

author_sids: dict[int, list[int]] = {}
for aid, _, sid in triples:
    author_sids.setdefault(aid, []).append(sid)
seqs = {a: ss.compress(s) for a, s in author_sids.items()}
examples = pred.build_training_examples(seqs, L_MAX, codebook.num_codes)
rng = np.random.default_rng(SEED + 3)
perm = rng.permutation(len(examples))
hold = [examples[i] for i in perm[:1500]]
train = [examples[i] for i in perm[1500:]]
print(f"{len(train)} training windows, {len(hold)} held out")

cfg = pred.PredictorConfig(num_codes=codebook.num_codes, model_dim=24,
                           encoder_layers=1, decoder_layers=1, window_runs=L_MAX,
                           freq_cap=512, learning_rate=3e-3, seed=SEED + 4)
model = pred.PredictorModel.create(cfg, codebook)
print(f"first-step loss should be ln(N) = {np.log(K):.4f}")
for step in range(1200):
    idx = rng.integers(0, len(train), size=48)
    loss = pred.train_step(model, [train[i] for i in idx])
    if step % 200 == 0:
        print(f"  step {step:4d} loss {loss:.4f}")

windows = [w for w, _ in hold]
targets = [t for _, t in hold]
outs = pred.predict_batch(model, windows)
pairs = [(sid, e.true_topic) for a in author_sids
         for sid, e in zip(author_sids[a], streams[a])]
s2t, t2s = ev.majority_mappings(pairs)
print("\nheld-out next-run accuracy:")
print(f"  model        {ev.accuracy([o.predicted for o in outs], targets):.4f}")
print(f"  last sid     {ev.accuracy([ev.baseline_last(w) for w in windows], targets):.4f}")
print(f"  max freq     {ev.accuracy([ev.baseline_max_freq(w, 50) for w in windows], targets):.4f}")
print(f"  max weight   {ev.accuracy([ev.baseline_max_weight(w) for w in windows], targets):.4f}")
print(f"  bayes ref    {ev.accuracy([ev.bayes_oracle(w, tm.transition, s2t, t2s) for w in windows], targets):.4f}")
print("\n(the 'last sid' baseline can never hit a next-DISTINCT-run target)")
