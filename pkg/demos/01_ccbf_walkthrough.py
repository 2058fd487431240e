"""
Counting with a shared bit table
================================

A tiny table, a handful of users and two items.  Every complaint flips
exactly one bit, and the count for an item is just the number of its
positions that are set.
"""

# %%
import numpy as np

from facts.ccbf import BitTable, CcbfParams, derive_item_set, derive_user_set, increment, item_count

rng = np.random.default_rng(1)
params = CcbfParams(s=400, u=40, v=12, n=100, t=5)
table = BitTable(params.s)

# user sets come from a server secret, item sets from public bytes
key = b"server derivation key"
users = {name: derive_user_set(name, key, params) for name in ["ann", "bo", "cy", "dee", "eli", "fay"]}
spam = derive_item_set(b"spam message tag", params)
news = derive_item_set(b"news message tag", params)
print("spam positions:", spam.indices)

# %%
# Six different users complain about the spam message.
with table.write_lock():
    for name, user_set in users.items():
        out = increment(table, user_set, spam, rng)
        print(f"{name:>4} wrote bit {out.written_index:3d}  hit item: {out.hit_item}")

print("spam count:", item_count(table, spam), " news count:", item_count(table, news), " m =", table.m)

# %%
# A user whose positions overlap the item nowhere still writes a bit, just
# not one the item can see.  The server learns which user wrote, never which
# message the complaint was about.
overlaps = {name: len(np.intersect1d(s.indices, spam.indices)) for name, s in users.items()}
print("positions shared with the spam item:", overlaps)

# %%
# The table travels as 16 header bytes plus packed bits.
blob = table.to_bytes()
print(len(blob), "bytes;", BitTable.from_bytes(blob).m, "bits set after a round trip")
