"""Symmetric primitives and key-derivation functions.

Everything here is a pure function over ``bytes``. Block cipher work is
delegated to ``cryptography``; the counter layout of CTR mode and both
counter-mode KDFs are implemented here so their byte conventions are explicit.
"""

import hashlib
import hmac
import struct

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESCCM
from cryptography.exceptions import InvalidTag

try:  # CFB lives under "decrepit" from cryptography 43 onward
    from cryptography.hazmat.decrepit.ciphers.modes import CFB as _CFB
except ImportError:  # pragma: no cover
    _CFB = modes.CFB

from .errors import AuthFailure, InvalidKey, InvalidLength, InvalidNonce

BLOCK = 16
CCM_NONCE_LEN = 12
CCM_TAG_LEN = 16


def _check_len(name, value, n):
    if len(value) != n:
        raise InvalidLength(f"{name} must be {n} bytes, got {len(value)}")


def sha256(message: bytes) -> bytes:
    return hashlib.sha256(message).digest()


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    if not key:
        raise InvalidKey("HMAC key must not be empty")
    return hmac.digest(key, message, "sha256")


def _ecb(key: bytes):
    _check_len("AES-128 key", key, 16)
    return Cipher(algorithms.AES(key), modes.ECB())


def aes128_encrypt_block(key: bytes, block: bytes) -> bytes:
    _check_len("block", block, BLOCK)
    enc = _ecb(key).encryptor()
    return enc.update(block) + enc.finalize()


def aes128_decrypt_block(key: bytes, block: bytes) -> bytes:
    _check_len("block", block, BLOCK)
    dec = _ecb(key).decryptor()
    return dec.update(block) + dec.finalize()


def xor_bytes(a: bytes, b: bytes) -> bytes:
    n = min(len(a), len(b))
    return (int.from_bytes(a[:n], "big") ^ int.from_bytes(b[:n], "big")).to_bytes(n, "big")


def ctr_counter_blocks(iv: bytes, count: int) -> bytes:
    """Counter blocks for ``count`` blocks: the last 32 bits of ``iv`` count
    up big-endian and wrap without carrying into the upper 96 bits."""
    _check_len("IV", iv, BLOCK)
    prefix = iv[:12]
    start = int.from_bytes(iv[12:], "big")
    return b"".join(prefix + ((start + i) & 0xFFFFFFFF).to_bytes(4, "big") for i in range(count))


def aes128_ctr(key: bytes, iv: bytes, data: bytes) -> bytes:
    _check_len("IV", iv, BLOCK)
    if not data:
        _check_len("AES-128 key", key, 16)
        return b""
    nblocks = -(-len(data) // BLOCK)
    enc = _ecb(key).encryptor()
    stream = enc.update(ctr_counter_blocks(iv, nblocks)) + enc.finalize()
    return xor_bytes(data, stream[:len(data)])


def aes128_cfb(key: bytes, iv: bytes, data: bytes, encrypt: bool = True) -> bytes:
    """Full-block (128-bit segment) CFB; a short final block is allowed."""
    _check_len("AES-128 key", key, 16)
    _check_len("IV", iv, BLOCK)
    cipher = Cipher(algorithms.AES(key), _CFB(iv))
    ctx = cipher.encryptor() if encrypt else cipher.decryptor()
    return ctx.update(data) + ctx.finalize()


def kdf_ctr_sp800_108(key: bytes, label: bytes, context: bytes, bits: int) -> bytes:
    """SP 800-108 counter-mode KDF with HMAC-SHA256.

    Iteration ``i`` (from 1) hashes ``i || label || 0x00 || context || L``,
    ``i`` and ``L`` (= ``bits``) as 32-bit big-endian integers.
    """
    if bits <= 0 or bits % 8:
        raise InvalidLength(f"bits must be a positive multiple of 8, got {bits}")
    if isinstance(label, str):
        label = label.encode("ascii")
    fixed = label + b"\x00" + context + struct.pack(">I", bits)
    nbytes = bits // 8
    out = bytearray()
    i = 1
    while len(out) < nbytes:
        out += hmac_sha256(key, struct.pack(">I", i) + fixed)
        i += 1
    return bytes(out[:nbytes])


def kdfa_tpm(seed: bytes, label: str, context_u: bytes, context_v: bytes, bits: int) -> bytes:
    """TPM 2.0 KDFa (SHA-256): the SP 800-108 layout with ``contextU || contextV``
    as the context."""
    return kdf_ctr_sp800_108(seed, label, context_u + context_v, bits)


def _ccm(key: bytes, nonce: bytes) -> AESCCM:
    _check_len("AES-128 key", key, 16)
    if len(nonce) != CCM_NONCE_LEN:
        raise InvalidNonce(f"CCM nonce must be {CCM_NONCE_LEN} bytes, got {len(nonce)}")
    return AESCCM(key, tag_length=CCM_TAG_LEN)


def aes_ccm_encrypt(key: bytes, nonce: bytes, data: bytes, aad: bytes = b"") -> bytes:
    """Returns ``ciphertext || tag``."""
    return _ccm(key, nonce).encrypt(nonce, data, aad or None)


def aes_ccm_decrypt(key: bytes, nonce: bytes, data: bytes, aad: bytes = b"") -> bytes:
    ccm = _ccm(key, nonce)
    if len(data) < CCM_TAG_LEN:
        raise AuthFailure("CCM input shorter than its tag")
    try:
        return ccm.decrypt(nonce, data, aad or None)
    except InvalidTag:
        raise AuthFailure("CCM tag mismatch") from None
