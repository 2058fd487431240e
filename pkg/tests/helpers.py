import numpy as np


def single_byte_mutations(rng: np.random.Generator, tag_bytes: bytes, x: bytes, count: int):
    """Yield ``count`` (tag, message) pairs, each differing from the original in one byte.

    Positions are spread over the whole tag and the whole message; the
    replacement byte is never equal to the original.
    """
    total = len(tag_bytes) + len(x)
    for j in range(count):
        pos = j % total if j < total else int(rng.integers(total))
        delta = int(rng.integers(1, 256))
        if pos < len(tag_bytes):
            b = bytearray(tag_bytes)
            b[pos] ^= delta
            yield bytes(b), x
        else:
            b = bytearray(x)
            b[pos - len(tag_bytes)] ^= delta
            yield tag_bytes, bytes(b)
