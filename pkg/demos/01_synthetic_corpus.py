# What the synthetic corpus looks like, and why its labels reward foresight.
#
# Authors stream 30-second content segments; the hidden topic follows a
# Markov chain whose diagonal ("self stay") controls content continuity.
# Users click/follow/etc. according to their affinity for the topic of the
# NEXT segment -- engagement concentrates just before content users like.

import numpy as np

from foresight import synth

rng_seed = 42
tm = synth.gen_topic_model(num_topics=6, d_e=8, self_stay=0.7, seed=rng_seed)
print("transition matrix (rows sum to 1, diagonal >= self_stay):")
print(np.round(tm.transition, 2))

streams = synth.gen_streams(tm, num_authors=3, length=40, seed=rng_seed + 1)
print("\nauthor 0 topic path:")
print(" ".join(str(e.true_topic) for e in streams[0]))

# content continuity: average run length vs the 1/(1-p) geometric estimate
long_stream = synth.gen_author_stream(tm, 99, 20_000, seed=7)
topics = np.array([e.true_topic for e in long_stream])
runs = 1 + int((topics[1:] != topics[:-1]).sum())
print(f"\nmean run length over 20k segments: {len(topics)/runs:.2f} "
      f"(geometric estimate {1/(1-0.7):.2f} at self_stay=0.7)")

# labels: a user with a sharp preference for topic 2 clicks when topic 2 is
# about to air, much more rarely otherwise
users = [synth.UserModel(0, np.array([0, 0, 4.0, 0, 0, 0]),
                         {t: -1.0 for t in synth.TASKS})]
records = synth.gen_interactions(users, streams, "next", seed=5, num_per_user=4000)
next_topic = np.array([streams[r.author_id][r.at_seq_index + 1].true_topic
                       for r in records])
ctr = np.array([r.labels["ctr"] for r in records])
print(f"\nctr rate when next segment is topic 2: {ctr[next_topic == 2].mean():.3f}")
print(f"ctr rate otherwise:                    {ctr[next_topic != 2].mean():.3f}")
print("that gap is the signal the foresight feature hands to the ranker")
