# The streaming per-author sid store: appends extend runs, every append is
# logged before it is applied, and model windows are cut from the tail.

import tempfile
import os

from foresight import seqstore as ss

log_path = os.path.join(tempfile.mkdtemp(), "sids.log")

with ss.AuthorStore(num_codes=10, log_path=log_path) as store:
    for sid in [4, 4, 4, 7, 7, 2, 4, 4]:
        store.append(author_id=1, sid=sid)
    seq = store.sequence(1)
    print(f"author 1 after 8 appends: runs={seq.distinct} counts={seq.freq}")

    w = store.window(1, l_max=6)
    print(f"window (l_max=6): sids={w.sids} freqs={w.freqs} valid={w.valid_len}")
    print(f"pad code is {store.pad_code} (= num_codes), pad freq is 0")

# crash recovery: replaying the log rebuilds the identical store
replayed = ss.AuthorStore.replay_log(log_path, num_codes=10)
assert replayed.sequence(1) == seq
print("\nreplayed store matches the live one, log line format:")
for line in open(log_path).read().splitlines()[:4]:
    print("   ", line)
