import contextlib

import numpy as np
import pytest

from facts.ccbf import CcbfParams
from facts.client import FactsClient, LoopbackEEMS
from facts.server import FactsServer, FactsTCPServer, ServerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_params():
    return CcbfParams(s=2000, u=100, v=40, n=200, t=10)


@contextlib.contextmanager
def running_server(users=4, **config):
    """A listening server plus the tokens of its ``users`` registered users."""
    defaults = dict(n=10_000, t=50, quota=10, session_deadline=5.0)
    defaults.update(config)
    core = FactsServer(ServerConfig(**defaults))
    tokens = core.setup(users)
    with FactsTCPServer(core, ("127.0.0.1", 0)) as tcp:
        yield core, tcp, tokens


@pytest.fixture
def server():
    with running_server() as triple:
        yield triple


@pytest.fixture
def clients(server):
    core, tcp, tokens = server
    eems = LoopbackEEMS()
    opened = [
        FactsClient(uid, tok, tcp.address, server_pubkey=core.public_key_bytes, eems=eems,
                    rng=np.random.default_rng(i)).connect()
        for i, (uid, tok) in enumerate(tokens.items())
    ]
    yield opened
    for c in opened:
        c.close()
