"""
One message, end to end
=======================

A server on localhost, a few clients, and the in-process messenger stub.
Alice writes a message, it is forwarded twice, and enough recipients
complain that one of them can ask the server who started it.
"""

# %%
import numpy as np

from facts.client import FactsClient, LoopbackEEMS
from facts.server import FactsServer, FactsTCPServer, ServerConfig
from facts.tipping import tail_thresholds

n, t = 10_000, 50
complainers = int(np.ceil(tail_thresholds(t, 10).fn_safe_count))
core = FactsServer(ServerConfig(n=n, t=t, quota=5))
tokens = core.setup(complainers + 3)
ids = list(tokens)
tcp = FactsTCPServer(core).start()
eems = LoopbackEEMS()


def client(uid):
    return FactsClient(uid, tokens[uid], tcp.address, eems=eems, server_pubkey=core.public_key_bytes).connect()


# %%
alice, bob, carol = (client(u) for u in ids[:3])
alice.send_msg(bob.id, b"totally true fact")
[entry] = bob.receive_all()
bob.send_msg(carol.id, entry.x, tag=entry.tag)
[entry] = carol.receive_all()
print("tag unchanged after two hops:", entry.tag == bob.inbox[0].tag)

# %%
# Each complainer gets the message from carol, and complains once.
tag_bytes, x = entry.tag_bytes, entry.x
for uid in ids[3:]:
    with client(uid) as c:
        c.rcv_msg(carol.id, tag_bytes, x)
        c.complain(c.inbox[0])

check = carol.check_and_audit(entry)
print(f"count {check.count} vs tau {check.tau}: audit fired={check.fired}, originator={check.originator}")
print("table bits set:", core.table.m, " conservation holds:", core.check_conservation())

# %%
for c in (alice, bob, carol):
    c.close()
tcp.stop()
