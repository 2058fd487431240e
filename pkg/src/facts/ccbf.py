"""Collaborative counting Bloom filter (CCBF).

A single public bit table ``T`` of ``s`` bits.  Every user owns a static
set of ``u`` table positions it may write, every item owns a public set of
``v`` positions.  An increment flips exactly one 0 bit inside the
complaining user's set, preferring positions that also belong to the item,
so an observer learns who wrote but not which item was counted.

Counting is read-only: the number of set bits inside an item set is
compared against a tipping point computed in :mod:`facts.tipping`.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

__all__ = [
    "ABORT",
    "BitTable",
    "CcbfParams",
    "IncrementOutcome",
    "IndexSet",
    "LockNotHeldError",
    "ParamError",
    "SetKind",
    "choose_index",
    "derive_item_set",
    "derive_user_set",
    "increment",
    "item_count",
    "server_validate_index",
    "test_count",
]

ABORT = -1

_USER_PERSON = b"facts-user-set"
_ITEM_PERSON = b"facts-item-set"
_BLOCK = 64  # blake2b max digest size


class ParamError(ValueError):
    """Raised when CCBF parameters violate a structural bound."""


class LockNotHeldError(RuntimeError):
    """A table mutation was attempted without holding the write lock."""


@dataclass(frozen=True)
class CcbfParams:
    """Table geometry ``(s, u, v)`` plus the planning inputs ``(n, t, lambda)``."""

    s: int
    u: int
    v: int
    n: int
    t: int
    lambda_stat: int = 10

    def __post_init__(self) -> None:
        if self.s <= 0:
            raise ParamError(f"table size s must be positive, got {self.s}")
        if not 0 < self.u <= self.s:
            raise ParamError(f"user-set size u={self.u} must lie in (0, s={self.s}]")
        if not 0 < self.v <= self.s:
            raise ParamError(f"item-set size v={self.v} must lie in (0, s={self.s}]")
        if self.t < 1:
            raise ParamError(f"threshold t must be >= 1, got {self.t}")
        if self.n < self.t:
            raise ParamError(f"complaint cap n={self.n} is below threshold t={self.t}")
        if self.lambda_stat < 1:
            raise ParamError(f"lambda_stat must be >= 1, got {self.lambda_stat}")

    @property
    def table_bytes(self) -> int:
        return (self.s + 7) // 8


class SetKind(str, Enum):
    USER = "user"
    ITEM = "item"


@dataclass(frozen=True, eq=False)
class IndexSet:
    """Sorted distinct table positions derived from an owner key."""

    indices: np.ndarray
    kind: SetKind
    owner_key: bytes

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, i: object) -> bool:
        if not isinstance(i, (int, np.integer)):
            return False
        pos = np.searchsorted(self.indices, i)
        return bool(pos < len(self.indices) and self.indices[pos] == i)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IndexSet):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.owner_key == other.owner_key
            and np.array_equal(self.indices, other.indices)
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.owner_key, self.indices.tobytes()))

    def as_set(self) -> set[int]:
        return set(int(i) for i in self.indices)


def _stream_words(key: bytes, person: bytes, owner: bytes, start: int, nblocks: int) -> np.ndarray:
    """Blocks ``start .. start+nblocks-1`` of blake2b in counter mode, as uint64."""
    prefix = struct.pack(">I", len(owner)) + owner
    out = bytearray()
    for counter in range(start, start + nblocks):
        out += hashlib.blake2b(
            prefix + struct.pack(">Q", counter),
            digest_size=_BLOCK,
            key=key,
            person=person,
        ).digest()
    return np.frombuffer(bytes(out), dtype="<u8")


def _select_distinct(size: int, k: int, key: bytes, person: bytes, owner: bytes) -> np.ndarray:
    """Pick ``k`` distinct positions of ``[0, size)`` from the keyed stream.

    Candidates are reduced to ``[0, size)`` by rejection (no modulo bias);
    repeated candidates are skipped, so the first ``k`` distinct values form
    a uniform k-subset.  For ``k > size/2`` the complement is drawn instead.
    """
    if k > size:
        raise ParamError(f"cannot choose {k} distinct positions out of {size}")
    complement = k > size // 2
    want = size - k if complement else k
    chosen = np.empty(0, dtype=np.int64)
    if want > 0:
        limit = (1 << 64) - ((1 << 64) % size)
        # expected draws for `want` distinct values, plus slack
        expected = -size * np.log1p(-want / size) if want < size else size * 10
        words_per_block = _BLOCK // 8
        nblocks = int(1.05 * expected + 64) // words_per_block + 1
        start = 0
        cand = np.empty(0, dtype=np.int64)
        while True:
            words = _stream_words(key, person, owner, start, nblocks)
            start += nblocks
            if limit < (1 << 64):
                words = words[words < np.uint64(limit)]
            cand = np.concatenate([cand, (words % np.uint64(size)).astype(np.int64)])
            uniq, first = np.unique(cand, return_index=True)
            if len(uniq) >= want:
                chosen = np.sort(cand[np.sort(first)[:want]])
                break
            nblocks = max(nblocks, 16)
    if complement:
        mask = np.ones(size, dtype=bool)
        mask[chosen] = False
        return np.flatnonzero(mask).astype(np.int64)
    return chosen


def derive_user_set(user_id: str | bytes, key: bytes, params: CcbfParams) -> IndexSet:
    """Positions user ``user_id`` may write, keyed by a server-held secret."""
    if params.u > params.s:
        raise ParamError(f"u={params.u} exceeds s={params.s}")
    owner = user_id.encode() if isinstance(user_id, str) else bytes(user_id)
    if len(key) > 64:
        key = hashlib.blake2b(key, digest_size=64).digest()
    idx = _select_distinct(params.s, params.u, key, _USER_PERSON, owner)
    return IndexSet(idx, SetKind.USER, owner)


def derive_item_set(item_key: bytes, params: CcbfParams) -> IndexSet:
    """Public positions for an item; anyone holding the item key can compute them."""
    if not item_key:
        raise ParamError("item key must be non-empty")
    if params.v > params.s:
        raise ParamError(f"v={params.v} exceeds s={params.s}")
    idx = _select_distinct(params.s, params.v, b"", _ITEM_PERSON, bytes(item_key))
    return IndexSet(idx, SetKind.ITEM, bytes(item_key))


class BitTable:
    """World-readable bit vector with a running popcount ``m``.

    Mutation requires the write lock (see :meth:`write_lock`); reads never
    block.  Stale reads are acceptable because counting is approximate.
    """

    HEADER = struct.Struct("<QQ")

    def __init__(self, s: int, *, enforce_lock: bool = True) -> None:
        if s <= 0:
            raise ParamError(f"table size must be positive, got {s}")
        self.s = s
        self.bits = np.zeros(s, dtype=bool)
        self.m = 0
        self._lock = threading.Lock()
        self._owner: Optional[int] = None
        self.enforce_lock = enforce_lock

    # -- locking -----------------------------------------------------------
    def acquire(self, blocking: bool = True, timeout: float = -1) -> bool:
        ok = self._lock.acquire(blocking, timeout)
        if ok:
            self._owner = threading.get_ident()
        return ok

    def release(self) -> None:
        self._owner = None
        self._lock.release()

    def write_lock(self) -> "_Held":
        return _Held(self)

    @property
    def locked(self) -> bool:
        return self._lock.locked()

    def _check_writer(self) -> None:
        if self.enforce_lock and self._owner is None:
            raise LockNotHeldError("table write attempted without holding the write lock")

    # -- mutation ----------------------------------------------------------
    def set_bit(self, i: int) -> None:
        self._check_writer()
        if self.bits[i]:
            raise ValueError(f"bit {i} is already set")
        self.bits[i] = True
        self.m += 1

    def reset(self) -> None:
        self._check_writer()
        self.bits[:] = False
        self.m = 0

    # -- reads -------------------------------------------------------------
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def snapshot(self, positions: np.ndarray) -> np.ndarray:
        return self.bits[positions].copy()

    def __len__(self) -> int:
        return self.s

    def __getitem__(self, i):
        return self.bits[i]

    # -- serialization -----------------------------------------------------
    def to_bytes(self) -> bytes:
        """``s`` and ``m`` as little-endian u64, then LSB-first packed bits."""
        packed = np.packbits(self.bits, bitorder="little")
        return self.HEADER.pack(self.s, self.m) + packed.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, *, enforce_lock: bool = True) -> "BitTable":
        if len(data) < cls.HEADER.size:
            raise ValueError("table snapshot shorter than its header")
        s, m = cls.HEADER.unpack_from(data)
        body = data[cls.HEADER.size:]
        if s == 0 or len(body) != (s + 7) // 8:
            raise ValueError(f"table snapshot body is {len(body)} bytes, expected {(s + 7) // 8}")
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="little", count=s)
        table = cls(s, enforce_lock=enforce_lock)
        table.bits = bits.astype(bool)
        table.m = table.popcount()
        if table.m != m:
            raise ValueError(f"snapshot header says m={m} but {table.m} bits are set")
        return table

    def copy(self) -> "BitTable":
        other = BitTable(self.s, enforce_lock=self.enforce_lock)
        other.bits = self.bits.copy()
        other.m = self.m
        return other


class _Held:
    def __init__(self, table: BitTable) -> None:
        self.table = table

    def __enter__(self) -> BitTable:
        self.table.acquire()
        return self.table

    def __exit__(self, *exc) -> None:
        self.table.release()


@dataclass(frozen=True)
class IncrementOutcome:
    written_index: int
    hit_item: bool

    @property
    def aborted(self) -> bool:
        return self.written_index == ABORT


def choose_index(
    user_positions: np.ndarray,
    user_bits: np.ndarray,
    item_set: IndexSet,
    rng: np.random.Generator,
) -> IncrementOutcome:
    """Client half of an increment: pick the index to send from a snapshot.

    ``user_bits[j]`` is the table value at ``user_positions[j]``.
    """
    settable = user_positions[~np.asarray(user_bits, dtype=bool)]
    if settable.size == 0:
        return IncrementOutcome(ABORT, False)
    in_item = settable[np.isin(settable, item_set.indices, assume_unique=True)]
    if in_item.size:
        return IncrementOutcome(int(in_item[rng.integers(in_item.size)]), True)
    return IncrementOutcome(int(settable[rng.integers(settable.size)]), False)


def server_validate_index(table: BitTable, user_set: IndexSet, i: int) -> bool:
    """Accept ``i`` iff it is one of the user's positions and still 0; then set it."""
    table._check_writer()
    if not isinstance(i, (int, np.integer)) or not 0 <= i < table.s:
        return False
    if i not in user_set or table.bits[i]:
        return False
    table.set_bit(int(i))
    return True


def increment(
    table: BitTable,
    user_set: IndexSet,
    item_set: IndexSet,
    rng: Optional[np.random.Generator] = None,
) -> IncrementOutcome:
    """Run both halves of an increment in-process.  Caller holds the write lock."""
    table._check_writer()
    if rng is None:
        rng = np.random.default_rng()
    outcome = choose_index(user_set.indices, table.bits[user_set.indices], item_set, rng)
    if outcome.aborted:
        return outcome
    if not server_validate_index(table, user_set, outcome.written_index):
        raise AssertionError("client chose an index the server rejects")
    return outcome


def test_count(table: BitTable, item_set: IndexSet, tau: int) -> bool:
    """True iff at least ``tau`` of the item's positions are set."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    return item_count(table, item_set) >= tau


# keep pytest from collecting the library function as a test
test_count.__test__ = False  # type: ignore[attr-defined]


def item_count(table: BitTable, item_set: IndexSet) -> int:
    return int(np.count_nonzero(table.bits[item_set.indices]))
