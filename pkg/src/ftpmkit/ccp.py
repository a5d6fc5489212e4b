"""Simulated co-processor key storage (LSB) and protected-slot extraction.

The LSB is a row of 16-byte slots. Protected slots can be used as AES keys
but never read or written. When the engine accepts unaligned key addresses, a
key window can straddle an attacker-written slot and a protected one, which
leaves a single unknown byte per window to brute force.
"""

import enum
from dataclasses import dataclass

from . import crypto
from .errors import (
    AlignmentViolation, BadAddress, ExtractionFailed, ExtractionImpossible, InvalidLength,
    ReadProtected, WriteProtected,
)

SLOT_SIZE = 16
DEFAULT_SLOTS = 8


class AlignmentPolicy(enum.Enum):
    UNALIGNED_ALLOWED = "unaligned"
    ALIGNED_ONLY = "aligned"


class LsbState:

    def __init__(self, secret: bytes, slots: int = DEFAULT_SLOTS, protected=(0,)):
        if len(secret) != SLOT_SIZE:
            raise InvalidLength("slot contents must be 16 bytes")
        if slots < 2:
            raise BadAddress("the LSB needs at least two slots")
        self._mem = bytearray(slots * SLOT_SIZE)
        self._mem[:SLOT_SIZE] = secret
        self.slots = slots
        self._protected = frozenset(protected)
        for i in self._protected:
            self._check_index(i)

    @property
    def protected(self) -> frozenset:
        return self._protected

    def _check_index(self, index):
        if not 0 <= index < self.slots:
            raise BadAddress(f"slot {index} outside 0..{self.slots - 1}")

    def is_protected(self, index: int) -> bool:
        return index in self._protected

    def write(self, index: int, data: bytes) -> None:
        self._check_index(index)
        if index in self._protected:
            raise WriteProtected(f"slot {index} is write protected")
        if len(data) != SLOT_SIZE:
            raise InvalidLength("slot contents must be 16 bytes")
        self._mem[index * SLOT_SIZE:(index + 1) * SLOT_SIZE] = data

    def read(self, index: int) -> bytes:
        self._check_index(index)
        if index in self._protected:
            raise ReadProtected(f"slot {index} is read protected")
        return bytes(self._mem[index * SLOT_SIZE:(index + 1) * SLOT_SIZE])

    def _key_at(self, key_addr: int) -> bytes:
        # Engine-internal; the bytes never leave the simulator.
        if not 0 <= key_addr <= len(self._mem) - SLOT_SIZE:
            raise BadAddress(f"key window at {key_addr} outside the LSB")
        return bytes(self._mem[key_addr:key_addr + SLOT_SIZE])


@dataclass
class Ccp:
    """AES engine bound to an LSB under one alignment policy."""
    lsb: LsbState
    policy: AlignmentPolicy = AlignmentPolicy.UNALIGNED_ALLOWED
    operations: int = 0

    def _key(self, key_addr):
        if self.policy is AlignmentPolicy.ALIGNED_ONLY and key_addr % SLOT_SIZE:
            raise AlignmentViolation(f"unaligned key address {key_addr}")
        return self.lsb._key_at(key_addr)

    def aes_encrypt(self, key_addr: int, block: bytes) -> bytes:
        key = self._key(key_addr)
        self.operations += 1
        return crypto.aes128_encrypt_block(key, block)

    def aes_decrypt(self, key_addr: int, block: bytes) -> bytes:
        key = self._key(key_addr)
        self.operations += 1
        return crypto.aes128_decrypt_block(key, block)


@dataclass
class Extraction:
    recovered: bytes
    op_count: int
    candidates_per_window: list


def extract_protected_slot(encrypt, write, writable_slot: int, target_slot: int,
                           probe: bytes = bytes(16)) -> Extraction:
    """Recover a read-protected slot through an adjacent writable one.

    ``encrypt(key_addr, block)`` and ``write(slot, data)`` are the only
    capabilities used. For each of the 16 window positions one engine
    encryption is compared against all 256 local candidate encryptions; a
    second probe block disambiguates in the (improbable) event of a tie.
    ``op_count`` counts engine calls plus local trial encryptions.
    """
    if abs(writable_slot - target_slot) != 1:
        raise ValueError("writable slot must be adjacent to the target slot")
    known = bytes(range(0xA0, 0xB0))  # attacker-chosen filler
    write(writable_slot, known)

    before = writable_slot < target_slot
    recovered = bytearray(SLOT_SIZE)
    ops = 0
    per_window = []
    for k in range(1, SLOT_SIZE + 1):
        if before:
            # window = known[k:] || target[:k]; unknown byte is the last one
            key_addr = writable_slot * SLOT_SIZE + k
            prefix, suffix = known[k:] + bytes(recovered[:k - 1]), b""
            slot_pos = k - 1
        else:
            # window = target[16-k:] || known[:16-k]; unknown byte is the first one
            key_addr = target_slot * SLOT_SIZE + SLOT_SIZE - k
            prefix, suffix = b"", bytes(recovered[SLOT_SIZE - k + 1:]) + known[:SLOT_SIZE - k]
            slot_pos = SLOT_SIZE - k

        probes = [probe, bytes(b ^ 0xFF for b in probe)]
        candidates = list(range(256))
        for block in probes:
            try:
                reference = encrypt(key_addr, block)
            except AlignmentViolation as exc:
                raise ExtractionImpossible(str(exc)) from None
            ops += 1
            matches = []
            for guess in candidates:
                ops += 1
                if crypto.aes128_encrypt_block(prefix + bytes([guess]) + suffix, block) == reference:
                    matches.append(guess)
            candidates = matches
            if len(candidates) <= 1:
                break
        per_window.append(len(candidates))
        if len(candidates) != 1:
            raise ExtractionFailed(f"window {k}: {len(candidates)} candidate bytes remain")
        recovered[slot_pos] = candidates[0]
    return Extraction(bytes(recovered), ops, per_window)


def extract_from_ccp(ccp: Ccp, writable_slot: int = 1, target_slot: int = 0) -> Extraction:
    return extract_protected_slot(ccp.aes_encrypt, ccp.lsb.write, writable_slot, target_slot)
