# Quantizing segment embeddings into Semantic ids (sids) with k-means,
# and compressing per-author sid streams into run-length form.

import numpy as np

from foresight import quantizer as qz
from foresight import seqstore as ss
from foresight import synth

tm = synth.gen_topic_model(num_topics=5, d_e=10, self_stay=0.75, seed=3,
                           noise_sigma=0.15)
streams = synth.gen_streams(tm, num_authors=10, length=500, seed=4)
events = [e for a in sorted(streams) for e in streams[a]]

x = np.stack([e.embedding for e in events])
codebook = qz.train_kmeans(x, n_codes=5, max_iters=60, seed=9)
print(f"codebook: {codebook.num_codes} codes, dim {codebook.dim}, "
      f"train inertia {codebook.train_inertia:.1f}")

# how cleanly do sids recover hidden topics at this noise level?
triples = qz.quantize_stream(events, codebook)
agree = {}
for ev, (_, _, sid) in zip(events, triples):
    agree.setdefault(ev.true_topic, []).append(sid)
for topic in sorted(agree):
    sids, counts = np.unique(agree[topic], return_counts=True)
    top = sids[counts.argmax()]
    purity = counts.max() / counts.sum()
    print(f"  topic {topic}: majority sid {top} ({100*purity:.1f}% pure)")

# run-length compression of one author's sid stream
author0 = [sid for aid, _, sid in triples if aid == 0]
c = ss.compress(author0)
print(f"\nauthor 0: {len(author0)} raw sids -> {len(c.distinct)} runs "
      f"({len(author0)/len(c.distinct):.1f}x compression)")
print("first runs (sid^count):",
      " ".join(f"{s}^{f}" for s, f in list(zip(c.distinct, c.freq))[:12]))
assert ss.decompress(c) == author0  # lossless
