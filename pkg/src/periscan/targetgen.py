"""Deterministic full-permutation traversal of arbitrary prefix sets.

Targets are visited as residues of a multiplicative group modulo the
smallest prime above the space size; residues beyond the space are
discarded (cycle-walking), so every address slot is emitted exactly once
without per-address state. Multiplier and starting residue come from a
keyed hash stream, making the traversal a pure function of (space, seed).

For desk-scale moduli the multiplier is verified to generate the full
group via the factorization of modulus-1. Above that bound any unit is
accepted and the walk terminates when it returns to its start, which is
the pragmatic trade for spaces no scan could finish anyway.
"""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import sympy

from .prefixes import Address, Prefix

#: Below this modulus we insist on a full-cycle multiplier.
FULL_CYCLE_BOUND = 1 << 32


class TargetGenError(ValueError):
    pass


class Exhausted:
    """Terminal marker: the permutation has emitted every address."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Exhausted"


EXHAUSTED = Exhausted()


@dataclass(frozen=True)
class TargetSpace:
    """An ordered prefix set flattened into one global index space."""

    prefixes: tuple[Prefix, ...]
    total: int
    boundaries: tuple[int, ...]

    @classmethod
    def of(cls, prefixes) -> "TargetSpace":
        members = tuple(prefixes)
        if not members:
            raise TargetGenError("empty target space")
        boundaries = []
        running = 0
        for prefix in members:
            running += prefix.size
            boundaries.append(running)
        return cls(members, running, tuple(boundaries))

    def address_at(self, index: int) -> Address:
        """Map a global index to (prefix, offset) and thence to an address."""
        if not 0 <= index < self.total:
            raise TargetGenError(f"index {index} outside space of {self.total}")
        slot = bisect.bisect_right(self.boundaries, index)
        base = self.boundaries[slot - 1] if slot else 0
        return self.prefixes[slot].address_at(index - base)

    def validate(self) -> None:
        if self.total != sum(p.size for p in self.prefixes):
            raise TargetGenError("total does not match member sizes")
        if list(self.boundaries) != sorted(set(self.boundaries)):
            raise TargetGenError("boundaries must be strictly increasing")
        if self.boundaries and self.boundaries[-1] != self.total:
            raise TargetGenError("last boundary must equal total")


class _KeyedStream:
    """Deterministic integer stream keyed by the 64-bit seed."""

    def __init__(self, seed: int, label: bytes = b"permute"):
        self._key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")
        self._label = label
        self._counter = 0

    def _block(self) -> bytes:
        data = self._label + self._counter.to_bytes(8, "big")
        self._counter += 1
        return hashlib.blake2b(data, key=self._key, digest_size=32).digest()

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection sampling."""
        nbytes = max((bound.bit_length() + 7) // 8, 1)
        limit = (1 << (nbytes * 8)) // bound * bound
        while True:
            buf = b""
            while len(buf) < nbytes:
                buf += self._block()
            value = int.from_bytes(buf[:nbytes], "big")
            if value < limit:
                return value % bound


@dataclass
class PermutationState:
    modulus: int
    multiplier: int
    current: int
    start: int
    seed: int
    emitted: int = 0
    wrapped: bool = field(default=False, repr=False)

    def validate(self) -> None:
        if not 1 <= self.current < self.modulus:
            raise TargetGenError("current residue outside [1, modulus)")
        # The two-element field has no unit other than 1; the singleton
        # space wraps after its first emission instead.
        if self.modulus > 2 and self.multiplier % self.modulus in (0, 1):
            raise TargetGenError("multiplier must not reduce to 0 or 1")


def _smallest_prime_at_least(n: int) -> int:
    if n <= 2:
        return 2
    return n if sympy.isprime(n) else int(sympy.nextprime(n))


def _is_primitive_root(candidate: int, modulus: int, factors) -> bool:
    group = modulus - 1
    return all(pow(candidate, group // q, modulus) != 1 for q in factors)


def new_permutation(space: TargetSpace, seed: int) -> PermutationState:
    """Build the permutation over a space; identical inputs, identical state."""
    if space.total < 1:
        raise TargetGenError("empty target space")
    modulus = _smallest_prime_at_least(space.total + 1)
    stream = _KeyedStream(seed)
    start = stream.below(modulus - 1) + 1

    if modulus == 2:
        multiplier = 3  # any odd step returns to the lone residue
    elif modulus <= FULL_CYCLE_BOUND:
        factors = list(sympy.factorint(modulus - 1))
        while True:
            multiplier = stream.below(modulus - 2) + 2
            if _is_primitive_root(multiplier, modulus, factors):
                break
    else:
        multiplier = stream.below(modulus - 2) + 2

    return PermutationState(
        modulus=modulus,
        multiplier=multiplier,
        current=start,
        start=start,
        seed=seed,
    )


def next_target(state: PermutationState, space: TargetSpace) -> Address | Exhausted:
    """Advance the permutation; Exhausted forever once the space is covered.

    Residues above the space size are skipped internally. Returning to the
    starting residue also terminates (short cycles are only possible above
    the full-cycle verification bound).
    """
    if state.emitted >= space.total:
        state.wrapped = True
        return EXHAUSTED
    while not state.wrapped:
        residue = state.current
        state.current = (residue * state.multiplier) % state.modulus
        if state.current == state.start:
            state.wrapped = True
        if residue <= space.total:
            state.emitted += 1
            return space.address_at(residue - 1)
    return EXHAUSTED


def iter_targets(
    space: TargetSpace, seed: int, shard: int = 0, shards: int = 1
) -> Iterator[Address]:
    """Iterate the permutation, optionally striped across shard workers.

    Striping by emission index keeps shard slices provably disjoint.
    """
    if shards < 1 or not 0 <= shard < shards:
        raise TargetGenError(f"bad shard {shard}/{shards}")
    state = new_permutation(space, seed)
    index = 0
    while True:
        target = next_target(state, space)
        if target is EXHAUSTED:
            return
        if index % shards == shard:
            yield target
        index += 1


def derive_seed(seed: int, label: str) -> int:
    """Stable sub-seed for a labelled scan unit (e.g. one candidate prefix)."""
    digest = hashlib.blake2b(
        label.encode("utf-8"),
        key=(seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big"),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, "big")
