"""Cascade error reconciliation.

The receiver (Bob) drives the protocol.  :func:`cascade_rounds` is a
generator that yields batches of parity queries and receives the sender's
answers, so the same code serves an in-memory run (:func:`reconcile`) and
a message-driven session where each batch is one round trip.  A query is
``(pass, start, end)`` meaning "parity of your key over positions
``perm[pass][start:end]``"; every answered query is one leaked bit.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_PASSES = 4
MIN_BLOCK = 8
QBER_FLOOR = 1e-3
VERIFY_TAG_BITS = 64


class ReconcileFailed(Exception):
    pass


def sizing_qber(qber_estimate: float, sample_size=None) -> float:
    """QBER used for block sizing: the estimate plus two standard errors of
    the sacrificed sample, so a lucky low estimate does not inflate blocks."""
    if not sample_size:
        return qber_estimate
    p = max(qber_estimate, 1.0 / sample_size)
    return qber_estimate + 2.0 * math.sqrt(p * (1.0 - p) / sample_size)


def initial_block_size(n: int, qber_estimate: float, sample_size=None) -> int:
    if n <= MIN_BLOCK:
        return max(n, 1)
    q = sizing_qber(qber_estimate, sample_size)
    k = int(round(0.73 / max(q, QBER_FLOOR)))
    return min(max(k, MIN_BLOCK), n)


@dataclass
class CascadeLayout:
    """Block sizes and pass permutations, derived identically on both sides."""

    n: int
    qber_estimate: float
    seed: int
    passes: int = DEFAULT_PASSES
    sample_size: Optional[int] = None
    block_sizes: list = field(init=False)
    perms: list = field(init=False)
    inverse: list = field(init=False)

    def __post_init__(self):
        k1 = initial_block_size(self.n, self.qber_estimate, self.sample_size)
        self.block_sizes = [min(k1 << p, max(self.n, 1)) for p in range(self.passes)]
        rng = np.random.default_rng(self.seed)
        self.perms = [np.arange(self.n)]
        for _ in range(1, self.passes):
            self.perms.append(rng.permutation(self.n))
        self.inverse = [np.argsort(p) for p in self.perms]

    def blocks(self, p: int):
        k = self.block_sizes[p]
        return [(p, s, min(s + k, self.n)) for s in range(0, self.n, k)]

    def block_of(self, p: int, position: int):
        k = self.block_sizes[p]
        s = int(self.inverse[p][position]) // k * k
        return (p, s, min(s + k, self.n))

    def parity(self, key: np.ndarray, query) -> int:
        p, s, e = query
        return int(key[self.perms[p][s:e]].sum() & 1)


def answer_queries(layout: CascadeLayout, key: np.ndarray, queries) -> list:
    """Sender side: parities of its own key over the requested ranges."""
    return [layout.parity(key, q) for q in queries]


@dataclass
class CascadeResult:
    key: np.ndarray
    leaked_bits: int
    corrections: int
    rounds: int
    leak_per_pass: list


def cascade_rounds(layout: CascadeLayout, bob_key):
    """Generator: yields lists of queries, receives lists of parities,
    returns a :class:`CascadeResult` with Bob's corrected key."""
    key = np.array(bob_key, dtype=np.uint8, copy=True)
    known: dict = {}
    leak_per_pass = [0] * layout.passes
    corrections = 0
    rounds = 0

    def ask(queries):
        nonlocal rounds
        fresh = list(dict.fromkeys(q for q in queries if q not in known))
        if not fresh:
            return
        answers = yield fresh
        rounds += 1
        if len(answers) != len(fresh):
            raise ReconcileFailed("parity answer count does not match the query batch")
        for q, a in zip(fresh, answers):
            known[q] = int(a) & 1
            leak_per_pass[q[0]] += 1

    def odd(q) -> bool:
        return layout.parity(key, q) != known[q]

    if layout.n == 0:
        return CascadeResult(key, 0, 0, 0, leak_per_pass)

    for p in range(layout.passes):
        tops = layout.blocks(p)
        yield from ask(tops)
        active = [q for q in tops if odd(q)]
        while active:
            flipped = []
            while active:
                halves = [(p_, s, (s + e) // 2) for p_, s, e in active if e - s > 1]
                yield from ask(halves)
                nxt = []
                for q in active:
                    p_, s, e = q
                    if not odd(q):
                        continue  # already fixed by another correction
                    if e - s == 1:
                        pos = int(layout.perms[p_][s])
                        key[pos] ^= 1
                        corrections += 1
                        flipped.append(pos)
                        continue
                    mid = (s + e) // 2
                    left, right = (p_, s, mid), (p_, mid, e)
                    known.setdefault(right, known[q] ^ known[left])
                    nxt.append(left if odd(left) else right)
                active = list(dict.fromkeys(nxt))
            # a correction toggles one block in every earlier pass
            for pos in flipped:
                for prev in range(p + 1):
                    q = layout.block_of(prev, pos)
                    if q in known and odd(q) and q not in active:
                        active.append(q)

    return CascadeResult(key, sum(leak_per_pass), corrections, rounds, leak_per_pass)


def key_digest(key: np.ndarray, salt: bytes) -> bytes:
    bits = np.packbits(np.asarray(key, dtype=np.uint8)).tobytes()
    data = salt + len(key).to_bytes(8, "big") + bits
    return hashlib.sha256(b"dualqkd/key-verify" + data).digest()[:VERIFY_TAG_BITS // 8]


def run_cascade(layout: CascadeLayout, alice_key, bob_key) -> CascadeResult:
    alice_key = np.asarray(alice_key, dtype=np.uint8)
    gen = cascade_rounds(layout, bob_key)
    try:
        queries = next(gen)
        while True:
            queries = gen.send(answer_queries(layout, alice_key, queries))
    except StopIteration as stop:
        return stop.value


def reconcile(alice_key, bob_key, qber_estimate: float, seed: int = 0,
              passes: int = DEFAULT_PASSES, salt: bytes = b"",
              sample_size: Optional[int] = None) -> CascadeResult:
    """Correct Bob's key towards Alice's and check equality with a short hash.

    ``leaked_bits`` counts the parities only; the verification hash adds
    :data:`VERIFY_TAG_BITS` on top, which callers account for separately.
    """
    alice_key = np.asarray(alice_key, dtype=np.uint8)
    bob_key = np.asarray(bob_key, dtype=np.uint8)
    if len(alice_key) != len(bob_key):
        raise ValueError("sifted keys must have equal length")
    layout = CascadeLayout(len(alice_key), qber_estimate, seed, passes, sample_size)
    result = run_cascade(layout, alice_key, bob_key)
    if key_digest(result.key, salt) != key_digest(alice_key, salt):
        raise ReconcileFailed("verification hash mismatch after reconciliation")
    return result

