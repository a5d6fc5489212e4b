"""Derivation of the NV storage and integrity keys from the chip secret.

The chip secret is consumed exactly once (the first AES step); everything
afterwards runs on the resulting seed, so a leaked seed is as good as the
secret itself.
"""

from dataclasses import dataclass

from . import crypto
from .errors import InvalidLength

AES_LABEL = b"AES key for wrapping data"
HMAC_LABEL = b"HMAC key for wrapping data"


@dataclass(frozen=True)
class NvKeys:
    storage: bytes
    integrity: bytes

    def __post_init__(self):
        if len(self.storage) != 16:
            raise InvalidLength("storage key must be 16 bytes")
        if len(self.integrity) != 32:
            raise InvalidLength("integrity key must be 32 bytes")

    def to_json(self) -> dict:
        return {"storage": self.storage.hex(), "integrity": self.integrity.hex()}


@dataclass(frozen=True)
class AppIdentity:
    """Identity of the firmware application whose NV state is protected."""
    signing_modulus: bytes
    app_id: bytes

    def __post_init__(self):
        if not self.signing_modulus:
            raise InvalidLength("signing modulus must not be empty")
        if len(self.app_id) != 16:
            raise InvalidLength("app id must be 16 bytes")


def _need16(name, value):
    if len(value) != 16:
        raise InvalidLength(f"{name} must be 16 bytes, got {len(value)}")


def derive_seed(secret: bytes, constant: bytes) -> bytes:
    _need16("chip secret", secret)
    _need16("derivation constant", constant)
    return crypto.aes128_decrypt_block(secret, constant)


def _mix_identity(value: bytes, identity: AppIdentity) -> bytes:
    mixed = crypto.hmac_sha256(value, crypto.sha256(identity.signing_modulus))
    return crypto.hmac_sha256(mixed, identity.app_id)


def derive_nv_keys(seed: bytes, identity: AppIdentity) -> NvKeys:
    _need16("derivation seed", seed)
    aes_value = crypto.kdf_ctr_sp800_108(seed, AES_LABEL, b"", 256)
    hmac_value = crypto.kdf_ctr_sp800_108(seed, HMAC_LABEL, b"", 256)
    return NvKeys(
        storage=_mix_identity(aes_value, identity)[:16],
        integrity=_mix_identity(hmac_value, identity),
    )


def derive_from_chip_secret(secret: bytes, constant: bytes, identity: AppIdentity) -> NvKeys:
    return derive_nv_keys(derive_seed(secret, constant), identity)
