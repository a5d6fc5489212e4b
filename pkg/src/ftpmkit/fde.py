"""Full-disk-encryption protectors: metadata container, key recovery paths,
PIN stretching and brute-force modelling.

Volume-metadata container (little-endian)::

    "FVMD" u16 version=1 u16 count  { u16 datum_type u32 payload_len payload }*

Datum payloads:

* TPM_ENCODED / SEALED_SECRET: ``private blob || public blob || PCR policy``
  (each u16-size prefixed, big-endian as in the TPM structures)
* STRETCH: ``salt[16] || u32 rounds``
* AES_CCM: ``nonce[12] || ciphertext || tag[16]``
* INNER: opaque; the last 32 bytes are the volume master key

The TPM+PIN CCM key is the first 16 bytes of
``SHA256(unsealed material || stretched PIN)``.
"""

import base64
import enum
import hashlib
import itertools
import struct
import time
from dataclasses import dataclass

from . import crypto, tpm
from .errors import (
    AuthFailure, Exhausted, FormatError, InvalidPin, UnsealFailed,
    WrongPin, WrongSeedOrTampered,
)

try:
    from . import _stretch
except ImportError:  # pragma: no cover - exercised only without a compiler
    _stretch = None

METADATA_MAGIC = b"FVMD"
METADATA_VERSION = 1
DEFAULT_ROUNDS = 1 << 20
VMK_SIZE = 32

_CONTAINER_HDR = struct.Struct("<4sHH")
_DATUM_HDR = struct.Struct("<HI")


class DatumType(enum.IntEnum):
    TPM_ENCODED = 1
    STRETCH = 2
    AES_CCM = 3
    SEALED_SECRET = 4
    INNER = 5


@dataclass(frozen=True)
class Datum:
    datum_type: DatumType
    payload: bytes

    def to_bytes(self) -> bytes:
        return _DATUM_HDR.pack(self.datum_type, len(self.payload)) + self.payload


def parse_datum(data: bytes) -> Datum:
    """Parse a single datum record that must span ``data`` exactly."""
    if len(data) < _DATUM_HDR.size:
        raise FormatError("datum shorter than its header")
    dtype, length = _DATUM_HDR.unpack_from(data)
    if _DATUM_HDR.size + length != len(data):
        raise FormatError("datum length does not match its record")
    try:
        dtype = DatumType(dtype)
    except ValueError:
        raise FormatError(f"unknown datum type {dtype}") from None
    return Datum(dtype, bytes(data[_DATUM_HDR.size:]))


@dataclass(frozen=True)
class VolumeMetadata:
    datums: tuple

    def __post_init__(self):
        types = [d.datum_type for d in self.datums]
        if len(types) != len(set(types)):
            raise FormatError("at most one datum of each type per protector")

    def get(self, dtype: DatumType) -> Datum:
        for d in self.datums:
            if d.datum_type == dtype:
                return d
        raise FormatError(f"metadata has no {dtype.name} datum")

    def to_bytes(self) -> bytes:
        return (_CONTAINER_HDR.pack(METADATA_MAGIC, METADATA_VERSION, len(self.datums))
                + b"".join(d.to_bytes() for d in self.datums))


def parse_volume_metadata(raw: bytes) -> VolumeMetadata:
    raw = bytes(raw)
    if len(raw) < _CONTAINER_HDR.size:
        raise FormatError("metadata shorter than its header")
    magic, version, count = _CONTAINER_HDR.unpack_from(raw)
    if magic != METADATA_MAGIC:
        raise FormatError(f"bad metadata magic {magic!r}")
    if version != METADATA_VERSION:
        raise FormatError(f"unsupported metadata version {version}")
    pos = _CONTAINER_HDR.size
    datums = []
    for _ in range(count):
        if pos + _DATUM_HDR.size > len(raw):
            raise FormatError("truncated datum header")
        _, length = _DATUM_HDR.unpack_from(raw, pos)
        end = pos + _DATUM_HDR.size + length
        if end > len(raw):
            raise FormatError("truncated datum payload")
        datums.append(parse_datum(raw[pos:end]))
        pos = end
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after metadata")
    return VolumeMetadata(tuple(datums))


# -- TPM-encoded datum ----------------------------------------------------------

@dataclass(frozen=True)
class TpmEncoded:
    private: tpm.TpmPrivate
    public: tpm.TpmPublic
    pcr_policy: tpm.PcrPolicy

    def to_bytes(self) -> bytes:
        return self.private.to_blob() + self.public.to_blob() + self.pcr_policy.to_bytes()


def split_tpm_encoded_datum(datum: Datum) -> TpmEncoded:
    if datum.datum_type not in (DatumType.TPM_ENCODED, DatumType.SEALED_SECRET):
        raise FormatError(f"{datum.datum_type.name} datum is not TPM-encoded")
    r = tpm.Reader(datum.payload)
    private = tpm.TpmPrivate.from_bytes(r.tpm2b())
    public = tpm.TpmPublic.from_bytes(r.tpm2b())
    policy = tpm.PcrPolicy.from_reader(r)
    r.expect_done("TPM-encoded datum")
    return TpmEncoded(private, public, policy)


def unseal_datum(datum: Datum, nv_plaintext: bytes) -> tpm.TpmSensitive:
    """Locate the primary seed in NV plaintext and unseal; the PCR policy is
    parsed but never evaluated."""
    enc = split_tpm_encoded_datum(datum)
    match = tpm.find_primary_seed(nv_plaintext, enc.public, enc.private)
    try:
        return tpm.unseal_object(enc.public, enc.private, match.seed)
    except (WrongSeedOrTampered, FormatError) as exc:
        raise UnsealFailed(str(exc)) from exc


def vmk_from_inner(data: bytes) -> bytes:
    inner = parse_datum(data)
    if inner.datum_type != DatumType.INNER:
        raise FormatError(f"expected an INNER datum, got {inner.datum_type.name}")
    if len(inner.payload) < VMK_SIZE:
        raise FormatError("inner datum too short to hold a VMK")
    return inner.payload[-VMK_SIZE:]


def extract_vmk_tpm_only(datum: Datum, nv_plaintext: bytes) -> bytes:
    sensitive = unseal_datum(datum, nv_plaintext)
    return vmk_from_inner(sensitive.sensitive_data)


# -- PIN stretching -------------------------------------------------------------

@dataclass(frozen=True)
class StretchParams:
    salt: bytes
    rounds: int = DEFAULT_ROUNDS

    def __post_init__(self):
        if len(self.salt) != 16:
            raise FormatError("stretch salt must be 16 bytes")
        if not 0 < self.rounds <= 0xFFFFFFFF:
            raise FormatError("stretch rounds out of range")

    def to_bytes(self) -> bytes:
        return self.salt + struct.pack("<I", self.rounds)

    @classmethod
    def from_datum(cls, datum: Datum) -> "StretchParams":
        if datum.datum_type != DatumType.STRETCH or len(datum.payload) != 20:
            raise FormatError("stretch datum must hold a 16-byte salt and a u32 round count")
        return cls(datum.payload[:16], struct.unpack("<I", datum.payload[16:])[0])


def pin_initial(pin: str) -> bytes:
    if not pin:
        raise InvalidPin("PIN must not be empty")
    return crypto.sha256(crypto.sha256(pin.encode("utf-16-le")))


def stretch_reference(initial: bytes, salt: bytes, rounds: int) -> bytes:
    """Pure-Python stretch loop; slow, kept as the oracle for the native kernel."""
    tail = initial + salt
    last = bytes(32)
    sha, pack = hashlib.sha256, struct.Struct("<Q").pack
    for counter in range(rounds):
        last = sha(last + tail + pack(counter)).digest()
    return last


def stretch_initials(initials, params: StretchParams) -> list:
    if _stretch is not None:
        return _stretch.stretch(list(initials), params.salt, params.rounds)
    return [stretch_reference(i, params.salt, params.rounds) for i in initials]


def stretch_pin(pin: str, params: StretchParams) -> bytes:
    return stretch_initials([pin_initial(pin)], params)[0]


def stretch_many(pins, params: StretchParams) -> list:
    return stretch_initials([pin_initial(p) for p in pins], params)


def accelerated() -> bool:
    return _stretch is not None and _stretch.accelerated()


def pin_ccm_key(unsealed: bytes, stretched: bytes) -> bytes:
    return crypto.sha256(unsealed + stretched)[:16]


@dataclass(frozen=True)
class PinProtector:
    """The unsealed half of a TPM+PIN protector, ready for PIN trials."""
    unsealed: bytes
    params: StretchParams
    nonce: bytes
    blob: bytes

    def try_stretched(self, stretched: bytes) -> bytes:
        plain = crypto.aes_ccm_decrypt(pin_ccm_key(self.unsealed, stretched), self.nonce, self.blob)
        return vmk_from_inner(plain)


def open_pin_protector(metadata: VolumeMetadata, nv_plaintext: bytes) -> PinProtector:
    sensitive = unseal_datum(metadata.get(DatumType.TPM_ENCODED), nv_plaintext)
    if len(sensitive.sensitive_data) != 32:
        raise FormatError("TPM+PIN sealed material must be 32 bytes")
    params = StretchParams.from_datum(metadata.get(DatumType.STRETCH))
    ccm = metadata.get(DatumType.AES_CCM).payload
    if len(ccm) < crypto.CCM_NONCE_LEN + crypto.CCM_TAG_LEN:
        raise FormatError("AES-CCM datum too short")
    return PinProtector(sensitive.sensitive_data, params,
                        ccm[:crypto.CCM_NONCE_LEN], ccm[crypto.CCM_NONCE_LEN:])


def extract_vmk_tpm_pin(metadata: VolumeMetadata, nv_plaintext: bytes, pin: str) -> bytes:
    protector = open_pin_protector(metadata, nv_plaintext)
    try:
        return protector.try_stretched(stretch_pin(pin, protector.params))
    except AuthFailure:
        raise WrongPin("PIN does not open the AES-CCM datum") from None


@dataclass
class CrackResult:
    pin: str
    vmk: bytes
    attempts: int
    elapsed_s: float

    @property
    def rate(self) -> float:
        return self.attempts / self.elapsed_s if self.elapsed_s else float("inf")


def brute_force_pin(metadata: VolumeMetadata, nv_plaintext: bytes, candidates,
                    batch: int = 2) -> CrackResult:
    """Try candidates in order; the first PIN that authenticates wins.

    Candidates are stretched ``batch`` at a time (the native kernel runs two
    chains side by side), but ``attempts`` is the 1-based position of the
    winning PIN in the candidate order.
    """
    protector = open_pin_protector(metadata, nv_plaintext)
    start = time.perf_counter()
    attempts = 0
    it = iter(candidates)
    while True:
        chunk = list(itertools.islice(it, batch))
        if not chunk:
            break
        for pin, stretched in zip(chunk, stretch_many(chunk, protector.params)):
            attempts += 1
            try:
                vmk = protector.try_stretched(stretched)
            except AuthFailure:
                continue
            return CrackResult(pin, vmk, attempts, time.perf_counter() - start)
    raise Exhausted(f"no PIN among {attempts} candidates opens the protector")


CHARSETS = {
    "digits": "0123456789",
    "lower": "abcdefghijklmnopqrstuvwxyz",
    "alnum": "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ",
}


def enumerate_pins(charset: str = "digits", length: int = 4):
    """Fixed-width candidates in ascending charset order ("0000", "0001", ...)."""
    alphabet = CHARSETS.get(charset, charset)
    for combo in itertools.product(alphabet, repeat=length):
        yield "".join(combo)


# -- naive sealed-secret protector ----------------------------------------------

def extract_key_naive(metadata: VolumeMetadata, nv_plaintext: bytes) -> str:
    """Passphrase of a protector that seals a raw 32-byte secret. Any PIN
    guarding the sealed object is irrelevant once the seed is known."""
    sensitive = unseal_datum(metadata.get(DatumType.SEALED_SECRET), nv_plaintext)
    if len(sensitive.sensitive_data) != 32:
        raise FormatError("sealed secret must be 32 bytes")
    return base64.b64encode(sensitive.sensitive_data).decode("ascii")


def mitigated_naive_key(sealed_secret: bytes, pin: str) -> str:
    if not pin:
        raise InvalidPin("PIN must not be empty")
    return base64.b64encode(sealed_secret).decode("ascii") + ":" + pin


# -- brute-force time model -------------------------------------------------------

FTPM_RATE = 1000.0
DTPM_RATE = 1.0 / 600.0

ENTROPY_ROWS = (
    ("4 digits", 9),
    ("10 digits", 15),
    ("10 characters", 21),
    ("20 characters", 36),
)

MINUTE = 60.0
HOUR = 3600.0
DAY = 86400.0
YEAR = 365.25 * DAY
MONTH = YEAR / 12


def estimate_bruteforce_time(entropy_bits: int, rate: float) -> float:
    """Seconds to exhaust ``2**entropy_bits`` guesses at ``rate`` guesses/s."""
    if entropy_bits < 0:
        raise ValueError("entropy must be non-negative")
    if rate <= 0:
        raise ValueError("rate must be positive")
    return 2.0 ** entropy_bits / rate


def _number(value: float) -> str:
    # Below ten: one decimal, truncated. From ten up: nearest integer.
    if value < 10:
        return f"{int(value * 10) / 10:.1f}"
    return str(int(round(value)))


def render_duration(seconds: float) -> str:
    units = ((YEAR, "yr"), (MONTH, "mo"), (DAY, "days"), (HOUR, "hr"), (MINUTE, "min"))
    for size, unit in units:
        if seconds >= size:
            value = seconds / size
            if unit == "yr" and value >= 1e4:
                exp = len(str(int(value))) - 1
                return f"{_number(value / 10 ** exp)}·10^{exp} yr"
            return f"{_number(value)} {unit}"
    return f"{_number(seconds)} sec"


def bruteforce_table():
    """Rows of (description, entropy bits, fTPM time, dTPM time)."""
    return [
        (desc, bits,
         render_duration(estimate_bruteforce_time(bits, FTPM_RATE)),
         render_duration(estimate_bruteforce_time(bits, DTPM_RATE)))
        for desc, bits in ENTROPY_ROWS
    ]
