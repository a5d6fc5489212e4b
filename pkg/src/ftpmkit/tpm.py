"""Sealed TPM objects, PCR bank and primary-seed recovery.

Serialized forms are big-endian with 16-bit length prefixes:

* public    ``u16 type | u16 nameAlg | u32 attributes | 2B authPolicy | 2B unique``
* sensitive ``2B authValue | 2B seedValue | 2B sensitiveData``
* private   ``u16 macLen | mac[32] | iv[16] | ciphertext``

Blob files wrap public and private in an outer ``u16`` size (TPM2B style) so
a concatenated ``private || public`` blob splits unambiguously.
"""

import hmac as _hmac
import struct
from dataclasses import dataclass, field

from . import crypto
from .errors import BadPcrIndex, FormatError, InvalidLength, SeedNotFound, WrongSeedOrTampered

TPM_ALG_SHA256 = 0x000B
TPM_ALG_KEYEDHASH = 0x0008
PCR_COUNT = 24

# TPMA_OBJECT bits used by fixtures
FIXED_TPM = 1 << 1
FIXED_PARENT = 1 << 4
USER_WITH_AUTH = 1 << 6
SEALED_DATA_ATTRS = FIXED_TPM | FIXED_PARENT | USER_WITH_AUTH


class Reader:
    """Cursor over a byte string; every read is bounds checked."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def tpm2b(self) -> bytes:
        return self.take(self.u16())

    def rest(self) -> bytes:
        return self.take(len(self.data) - self.pos)

    def done(self) -> bool:
        return self.pos == len(self.data)

    def expect_done(self, what: str):
        if not self.done():
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after {what}")


def tpm2b(data: bytes) -> bytes:
    if len(data) > 0xFFFF:
        raise FormatError("sized buffer longer than 65535 bytes")
    return struct.pack(">H", len(data)) + data


# -- PCRs -----------------------------------------------------------------------

class PcrBank:
    """SHA-256 PCR bank with 24 registers."""

    def __init__(self):
        self.registers = [bytes(32)] * PCR_COUNT

    def extend(self, index: int, value: bytes) -> bytes:
        if not 0 <= index < PCR_COUNT:
            raise BadPcrIndex(f"PCR index {index} outside 0..{PCR_COUNT - 1}")
        self.registers[index] = crypto.sha256(self.registers[index] + value)
        return self.registers[index]

    def reset(self) -> None:
        self.registers = [bytes(32)] * PCR_COUNT

    def __getitem__(self, index: int) -> bytes:
        return self.registers[index]


@dataclass(frozen=True)
class PcrPolicy:
    """Expected register values for a selection of PCRs."""
    expected: tuple  # ((index, digest), ...) sorted by index

    def __post_init__(self):
        if not self.expected:
            raise FormatError("PCR policy selection must not be empty")
        seen = set()
        for index, digest in self.expected:
            if not 0 <= index < PCR_COUNT:
                raise BadPcrIndex(f"PCR index {index} outside 0..{PCR_COUNT - 1}")
            if len(digest) != 32 or index in seen:
                raise FormatError("PCR policy needs distinct indices with 32-byte digests")
            seen.add(index)

    @classmethod
    def from_bank(cls, bank: PcrBank, selection) -> "PcrPolicy":
        return cls(tuple((i, bank[i]) for i in sorted(selection)))

    @property
    def selection(self) -> tuple:
        return tuple(i for i, _ in self.expected)

    def check(self, bank: PcrBank) -> bool:
        return all(bank[i] == d for i, d in self.expected)

    def to_bytes(self) -> bytes:
        body = bytes([len(self.expected)]) + b"".join(bytes([i]) + d for i, d in self.expected)
        return tpm2b(body)

    @classmethod
    def from_reader(cls, r: Reader) -> "PcrPolicy":
        body = Reader(r.tpm2b())
        if body.done():
            raise FormatError("empty PCR policy section")
        entries = tuple((body.u8(), body.take(32)) for _ in range(body.u8()))
        body.expect_done("PCR policy")
        return cls(entries)


def check_pcr_policy(bank: PcrBank, policy: PcrPolicy) -> bool:
    return policy.check(bank)


# -- objects --------------------------------------------------------------------

@dataclass(frozen=True)
class TpmPublic:
    object_type: int = TPM_ALG_KEYEDHASH
    name_alg: int = TPM_ALG_SHA256
    object_attributes: int = SEALED_DATA_ATTRS
    auth_policy: bytes = b""
    unique: bytes = b""

    def to_bytes(self) -> bytes:
        return (struct.pack(">HHI", self.object_type, self.name_alg, self.object_attributes)
                + tpm2b(self.auth_policy) + tpm2b(self.unique))

    @classmethod
    def from_bytes(cls, data: bytes) -> "TpmPublic":
        r = Reader(data)
        obj_type, name_alg, attrs = r.u16(), r.u16(), r.u32()
        pub = cls(obj_type, name_alg, attrs, r.tpm2b(), r.tpm2b())
        r.expect_done("public area")
        if name_alg != TPM_ALG_SHA256:
            raise FormatError(f"unsupported name algorithm {name_alg:#06x}")
        return pub

    def to_blob(self) -> bytes:
        return tpm2b(self.to_bytes())

    @property
    def name(self) -> bytes:
        return compute_name(self)


def compute_name(public: TpmPublic) -> bytes:
    return struct.pack(">H", TPM_ALG_SHA256) + crypto.sha256(public.to_bytes())


@dataclass(frozen=True)
class TpmSensitive:
    auth_value: bytes
    seed_value: bytes
    sensitive_data: bytes

    def __post_init__(self):
        if len(self.seed_value) != 32:
            raise InvalidLength("seed value must be 32 bytes")

    def to_bytes(self) -> bytes:
        return tpm2b(self.auth_value) + tpm2b(self.seed_value) + tpm2b(self.sensitive_data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TpmSensitive":
        r = Reader(data)
        auth, seed, sens = r.tpm2b(), r.tpm2b(), r.tpm2b()
        r.expect_done("sensitive area")
        if len(seed) != 32:
            raise FormatError("seed value must be 32 bytes")
        return cls(auth, seed, sens)


@dataclass(frozen=True)
class TpmPrivate:
    integrity_mac: bytes
    iv: bytes
    encrypted_sensitive: bytes

    def __post_init__(self):
        if len(self.integrity_mac) != 32 or len(self.iv) != 16:
            raise FormatError("private area needs a 32-byte MAC and a 16-byte IV")
        if not self.encrypted_sensitive:
            raise FormatError("private area has no encrypted sensitive data")

    def to_bytes(self) -> bytes:
        return tpm2b(self.integrity_mac) + self.iv + self.encrypted_sensitive

    @classmethod
    def from_bytes(cls, data: bytes) -> "TpmPrivate":
        r = Reader(data)
        mac = r.tpm2b()
        if len(mac) != 32:
            raise FormatError(f"integrity MAC must be 32 bytes, got {len(mac)}")
        return cls(mac, r.take(16), r.rest())

    def to_blob(self) -> bytes:
        return tpm2b(self.to_bytes())


def split_blob(data: bytes):
    """Split ``private || public`` (each TPM2B-wrapped) into objects."""
    r = Reader(data)
    private = TpmPrivate.from_bytes(r.tpm2b())
    public = TpmPublic.from_bytes(r.tpm2b())
    r.expect_done("object blob")
    return private, public


@dataclass(frozen=True)
class ObjectKeys:
    hmac_key: bytes
    sym_key: bytes


def integrity_key(parent_seed: bytes) -> bytes:
    return crypto.kdfa_tpm(parent_seed, "INTEGRITY", b"", b"", 256)


def derive_object_keys(parent_seed: bytes, name: bytes) -> ObjectKeys:
    if len(parent_seed) != 32:
        raise InvalidLength("primary seed must be 32 bytes")
    return ObjectKeys(
        hmac_key=integrity_key(parent_seed),
        sym_key=crypto.kdfa_tpm(parent_seed, "STORAGE", name, b"", 128),
    )


def _mac_message(private_iv: bytes, ciphertext: bytes, name: bytes) -> bytes:
    return private_iv + ciphertext + name


def seal_object(sensitive: TpmSensitive, public: TpmPublic, parent_seed: bytes, iv: bytes) -> TpmPrivate:
    name = compute_name(public)
    keys = derive_object_keys(parent_seed, name)
    ciphertext = crypto.aes128_cfb(keys.sym_key, iv, sensitive.to_bytes(), encrypt=True)
    mac = crypto.hmac_sha256(keys.hmac_key, _mac_message(iv, ciphertext, name))
    return TpmPrivate(mac, iv, ciphertext)


def verify_private(public: TpmPublic, private: TpmPrivate, hmac_key: bytes) -> bool:
    mac = crypto.hmac_sha256(hmac_key, _mac_message(private.iv, private.encrypted_sensitive,
                                                    compute_name(public)))
    return _hmac.compare_digest(mac, private.integrity_mac)


def unseal_object(public: TpmPublic, private: TpmPrivate, parent_seed: bytes) -> TpmSensitive:
    """Decrypt a sealed object with its parent seed alone.

    Neither the auth policy nor the auth value is consulted; the only gate is
    the integrity MAC, checked before anything is decrypted.
    """
    keys = derive_object_keys(parent_seed, compute_name(public))
    if not verify_private(public, private, keys.hmac_key):
        raise WrongSeedOrTampered("private area MAC does not verify under this seed")
    plain = crypto.aes128_cfb(keys.sym_key, private.iv, private.encrypted_sensitive, encrypt=False)
    return TpmSensitive.from_bytes(plain)


@dataclass
class SeedMatch:
    offset: int
    seed: bytes
    all_offsets: list = field(default_factory=list)


def find_primary_seed(nv_plaintext: bytes, public: TpmPublic, private: TpmPrivate,
                      find_all: bool = False) -> SeedMatch:
    """Slide a 32-byte window over decrypted NV data and return the lowest
    offset whose INTEGRITY key verifies the object's MAC."""
    data = bytes(nv_plaintext)
    if len(data) < 32:
        raise SeedNotFound("NV plaintext shorter than one seed")
    message = _mac_message(private.iv, private.encrypted_sensitive, compute_name(public))
    target = private.integrity_mac
    # INTEGRITY with empty contexts: a single HMAC block per candidate.
    kdf_input = struct.pack(">I", 1) + b"INTEGRITY\x00" + struct.pack(">I", 256)
    digest = _hmac.digest
    hits = []
    for off in range(len(data) - 31):
        key = digest(data[off:off + 32], kdf_input, "sha256")
        if digest(key, message, "sha256") == target:
            hits.append(off)
            if not find_all:
                break
    if not hits:
        raise SeedNotFound("no 32-byte window of the NV plaintext verifies the object")
    return SeedMatch(hits[0], data[hits[0]:hits[0] + 32], hits)
