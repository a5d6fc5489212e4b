"""NV storage image: parse, verify, decrypt and (for fixtures) encode.

Image layout, little-endian throughout::

    image   := section section                      (2 x 65536 bytes)
    section := "FTNV" u16 version u32 sequence 6*0x00
               entry* 0xFF...                       (erased flash)
    entry   := u16 0x4E56 u16 context u32 sequence u16[7] field_lengths
               u16 pad iv[16] mac[32] body[sum(field_lengths)] 0x00-pad to 4

The entry MAC is HMAC-SHA256(integrity, iv || field-length table || body) with
the body AES-128-CTR encrypted under the storage key. Context 0 is reserved for
section MACs: one 32-byte field holding, in the clear, HMAC-SHA256 over the
section bytes from its first byte up to the start of that entry.
"""

import struct
from dataclasses import dataclass, field

from . import crypto
from .errors import (
    AmbiguousSections, CapacityError, FormatError, IntegrityError, SizeMismatch,
    TruncatedEntry,
)
from .keys import NvKeys

SECTION_SIZE = 0x10000
IMAGE_SIZE = 2 * SECTION_SIZE
SECTION_MAGIC = b"FTNV"
SECTION_VERSION = 1
ENTRY_MAGIC = 0x4E56
ERASED_MAGIC = 0xFFFF
MAX_FIELDS = 7
SECTION_MAC_CONTEXT = 0
SECTION_MAC_EVERY = 8

_SECTION_HDR = struct.Struct("<4sHI6s")
_ENTRY_HDR = struct.Struct("<HHI7HH16s32s")
_LENGTHS = struct.Struct("<7H")
SECTION_HEADER_SIZE = _SECTION_HDR.size
ENTRY_HEADER_SIZE = _ENTRY_HDR.size
MAX_BODY = SECTION_SIZE - SECTION_HEADER_SIZE - ENTRY_HEADER_SIZE


def _align4(n: int) -> int:
    return (n + 3) & ~3


@dataclass(frozen=True)
class NvEntry:
    context: int
    sequence: int
    field_lengths: tuple
    iv: bytes
    mac: bytes
    ciphertext: bytes
    offset: int = 0  # relative to the section start

    def length_table(self) -> bytes:
        return _LENGTHS.pack(*self.field_lengths)

    def mac_input(self) -> bytes:
        return self.iv + self.length_table() + self.ciphertext

    @property
    def is_section_mac(self) -> bool:
        return self.context == SECTION_MAC_CONTEXT


@dataclass(frozen=True)
class NvSection:
    sequence: int
    entries: tuple
    raw: bytes = field(repr=False, default=b"")
    index: int = 0  # slot within the image


@dataclass(frozen=True)
class NvImage:
    sections: tuple


@dataclass(frozen=True)
class DecryptedEntry:
    context: int
    sequence: int
    fields: tuple


def _read_entry(raw: bytes, pos: int, body_end: int = None) -> NvEntry:
    hdr = _ENTRY_HDR.unpack_from(raw, pos)
    lengths = tuple(hdr[3:10])
    body_start = pos + ENTRY_HEADER_SIZE
    if body_end is None:
        body_end = body_start + sum(lengths)
    return NvEntry(hdr[1], hdr[2], lengths, hdr[11], hdr[12],
                   bytes(raw[body_start:body_end]), offset=pos)


def _next_pos(raw: bytes, pos: int) -> int:
    lengths = struct.unpack_from("<7H", raw, pos + 8)
    return _align4(pos + ENTRY_HEADER_SIZE + sum(lengths))


def _plausible_header(raw: bytes, pos: int) -> bool:
    if pos + ENTRY_HEADER_SIZE > SECTION_SIZE:
        return False
    magic, = struct.unpack_from("<H", raw, pos)
    pad, = struct.unpack_from("<H", raw, pos + 22)
    if magic != ENTRY_MAGIC or pad != 0:
        return False
    return pos + ENTRY_HEADER_SIZE + sum(struct.unpack_from("<7H", raw, pos + 8)) <= SECTION_SIZE


def _plausible_boundary(raw: bytes, pos: int, depth: int = 1) -> bool:
    if pos >= SECTION_SIZE - 1:
        return True
    if raw[pos:] == b"\xff" * (SECTION_SIZE - pos):
        return True
    if not _plausible_header(raw, pos):
        return False
    return depth == 0 or _plausible_boundary(raw, _next_pos(raw, pos), depth - 1)


def _starts_entry(raw: bytes, pos: int) -> bool:
    # Weaker than a plausible boundary on purpose: the successor's own length
    # table may be the damaged one, and it is repaired when its turn comes.
    if pos >= SECTION_SIZE - 1 or raw[pos:] == b"\xff" * (SECTION_SIZE - pos):
        return True
    return struct.unpack_from("<H", raw, pos)[0] == ENTRY_MAGIC


def _resync(raw: bytes, start: int, stop: int):
    """Earliest 4-aligned position in [start, stop) where a plausible entry
    chain begins, or None."""
    needle = struct.pack("<H", ENTRY_MAGIC)
    q = raw.find(needle, start, stop)
    while q != -1:
        if q % 4 == 0 and _plausible_header(raw, q) and _plausible_boundary(raw, _next_pos(raw, q)):
            return q
        q = raw.find(needle, q + 1, stop)
    return None


def _parse_section(raw: bytes, index: int, recover: bool = False) -> NvSection:
    magic, version, sequence, _reserved = _SECTION_HDR.unpack_from(raw, 0)
    if magic != SECTION_MAGIC:
        raise FormatError(f"section {index}: bad magic {magic!r}")
    if version != SECTION_VERSION:
        raise FormatError(f"section {index}: unsupported version {version}")

    entries = []
    pos = SECTION_HEADER_SIZE
    while pos + 2 <= SECTION_SIZE:
        (magic,) = struct.unpack_from("<H", raw, pos)
        if magic == ERASED_MAGIC:
            break
        if magic != ENTRY_MAGIC:
            raise FormatError(f"section {index}: bad entry magic {magic:#06x} at {pos:#x}")
        if pos + ENTRY_HEADER_SIZE > SECTION_SIZE:
            raise TruncatedEntry(f"section {index}: entry header at {pos:#x} overruns section")
        if not recover:
            entry = _read_entry(raw, pos)
            if struct.unpack_from("<H", raw, pos + 22)[0] != 0:
                raise FormatError(f"section {index}: non-zero header padding at {pos:#x}")
            if pos + ENTRY_HEADER_SIZE + sum(entry.field_lengths) > SECTION_SIZE:
                raise TruncatedEntry(f"section {index}: entry body at {pos:#x} overruns section")
            entries.append(entry)
            pos = _next_pos(raw, pos)
            continue

        # Recovery: a damaged length table must not take neighbouring
        # entries down with it. Prefer the earliest plausible resync point.
        body_start = pos + ENTRY_HEADER_SIZE
        declared_end = body_start + sum(struct.unpack_from("<7H", raw, pos + 8))
        declared_next = _align4(declared_end)
        q = _resync(raw, body_start, min(declared_next, SECTION_SIZE))
        if q is None and declared_end <= SECTION_SIZE and _starts_entry(raw, declared_next):
            entries.append(_read_entry(raw, pos))
            pos = declared_next
            continue
        if q is None:
            q = _resync(raw, min(declared_next, SECTION_SIZE), SECTION_SIZE)
        stop = SECTION_SIZE if q is None else q
        entries.append(_read_entry(raw, pos, min(declared_end, stop)))
        if q is None:
            break
        pos = q
    return NvSection(sequence, tuple(entries), bytes(raw), index)


def parse_image(raw: bytes, recover: bool = False) -> NvImage:
    """Parse the structure of an image. No keys are needed.

    With ``recover`` set, entries whose field-length table no longer frames
    the body are kept (with a clipped body, so their MAC fails) and scanning
    resumes at the next plausible entry header instead of raising.
    """
    if len(raw) != IMAGE_SIZE:
        raise SizeMismatch(f"NV image must be {IMAGE_SIZE} bytes, got {len(raw)}")
    raw = bytes(raw)
    return NvImage(tuple(
        _parse_section(raw[i * SECTION_SIZE:(i + 1) * SECTION_SIZE], i, recover) for i in range(2)
    ))


def select_active_section(image: NvImage) -> NvSection:
    a, b = image.sections
    if a.sequence == b.sequence:
        raise AmbiguousSections(f"both sections carry sequence {a.sequence}")
    return a if a.sequence > b.sequence else b


def verify_entry(entry: NvEntry, integrity: bytes) -> bool:
    return crypto.hmac_sha256(integrity, entry.mac_input()) == entry.mac


def verify_section_macs(section: NvSection, integrity: bytes) -> bool:
    ok = True
    for entry in section.entries:
        if not entry.is_section_mac:
            continue
        if [n for n in entry.field_lengths if n] != [32] or entry.field_lengths[0] != 32:
            raise FormatError("section MAC entry must hold exactly one 32-byte field")
        expected = crypto.hmac_sha256(integrity, section.raw[:entry.offset])
        ok &= expected == entry.ciphertext
    return ok


def decrypt_entry(entry: NvEntry, keys: NvKeys) -> DecryptedEntry:
    if not verify_entry(entry, keys.integrity):
        raise IntegrityError(f"MAC mismatch for context {entry.context} sequence {entry.sequence}")
    body = crypto.aes128_ctr(keys.storage, entry.iv, entry.ciphertext)
    # Interior empty fields keep their position; trailing unused slots are dropped.
    used = max((i + 1 for i, n in enumerate(entry.field_lengths) if n), default=0)
    fields, pos = [], 0
    for n in entry.field_lengths[:used]:
        fields.append(body[pos:pos + n])
        pos += n
    return DecryptedEntry(entry.context, entry.sequence, tuple(fields))


def non_monotonic_contexts(section: NvSection) -> list:
    """Contexts whose sequence numbers do not strictly increase in section order."""
    last, bad = {}, set()
    for entry in section.entries:
        if entry.context in last and entry.sequence <= last[entry.context]:
            bad.add(entry.context)
        last[entry.context] = entry.sequence
    return sorted(bad)


@dataclass
class DecryptedState:
    """Decrypted contents of the active section, grouped by context."""
    active_section: int
    contexts: dict           # context -> list of (sequence, fields or None, verified)
    section_macs_verified: bool
    non_monotonic: list

    @property
    def failures(self) -> int:
        return sum(1 for rows in self.contexts.values() for _, _, ok in rows if not ok)

    @property
    def entry_count(self) -> int:
        return sum(len(rows) for rows in self.contexts.values())

    def plaintext(self) -> bytes:
        """All verified field bytes concatenated in context/sequence order."""
        return b"".join(
            b"".join(fields)
            for ctx in sorted(self.contexts)
            for _, fields, ok in self.contexts[ctx] if ok
        )

    def to_json(self) -> dict:
        return {
            "active_section": self.active_section,
            "contexts": {
                str(ctx): [
                    {"sequence": seq, "fields": [f.hex() for f in (fields or ())], "verified": ok}
                    for seq, fields, ok in self.contexts[ctx]
                ]
                for ctx in sorted(self.contexts)
            },
            "section_macs_verified": self.section_macs_verified,
        }


def decrypt_image(image: NvImage, keys: NvKeys) -> DecryptedState:
    section = select_active_section(image)
    contexts = {}
    for entry in section.entries:
        if entry.is_section_mac:
            continue
        try:
            dec = decrypt_entry(entry, keys)
        except IntegrityError:
            row = (entry.sequence, None, False)
        else:
            row = (entry.sequence, dec.fields, True)
        contexts.setdefault(entry.context, []).append(row)
    for rows in contexts.values():
        rows.sort(key=lambda r: r[0])
    try:
        macs_ok = verify_section_macs(section, keys.integrity)
    except FormatError:
        macs_ok = False
    return DecryptedState(section.sequence, contexts, macs_ok, non_monotonic_contexts(section))


# -- encoder (fixture oracle) -------------------------------------------------

@dataclass(frozen=True)
class PlainEntry:
    """An entry as the encoder takes it: plaintext fields, optional fixed IV."""
    context: int
    sequence: int
    fields: tuple
    iv: bytes = None


def default_iv(keys: NvKeys, section_sequence: int, context: int, sequence: int) -> bytes:
    # Deterministic per (section, context, sequence) so re-encoding is byte-stable.
    tag = struct.pack("<4sIHI", b"NVIV", section_sequence, context, sequence)
    return crypto.hmac_sha256(keys.integrity, tag)[:16]


def _pack_entry(context, sequence, lengths, iv, mac, body) -> bytes:
    hdr = _ENTRY_HDR.pack(ENTRY_MAGIC, context, sequence, *lengths, 0, iv, mac)
    blob = hdr + body
    return blob + b"\x00" * (_align4(len(blob)) - len(blob))


def _seal_entry(keys: NvKeys, section_sequence: int, entry: PlainEntry) -> bytes:
    fields = [bytes(f) for f in entry.fields]
    if len(fields) > MAX_FIELDS:
        raise FormatError(f"an entry holds at most {MAX_FIELDS} fields")
    if any(len(f) > 0xFFFF for f in fields):
        raise CapacityError("field longer than 65535 bytes")
    if not 0 < entry.context <= 0xFFFF:
        raise FormatError(f"data entries need a context in 1..65535, got {entry.context}")
    if not 0 <= entry.sequence <= 0xFFFFFFFF:
        raise FormatError(f"sequence out of range: {entry.sequence}")
    lengths = tuple(len(f) for f in fields) + (0,) * (MAX_FIELDS - len(fields))
    iv = entry.iv if entry.iv is not None else default_iv(keys, section_sequence, entry.context, entry.sequence)
    if len(iv) != 16:
        raise FormatError("entry IV must be 16 bytes")
    body = crypto.aes128_ctr(keys.storage, iv, b"".join(fields))
    mac = crypto.hmac_sha256(keys.integrity, iv + _LENGTHS.pack(*lengths) + body)
    return _pack_entry(entry.context, entry.sequence, lengths, iv, mac, body)


def _section_mac_entry(keys: NvKeys, section_sequence: int, mac_seq: int, prefix: bytes) -> bytes:
    body = crypto.hmac_sha256(keys.integrity, prefix)
    lengths = (32,) + (0,) * (MAX_FIELDS - 1)
    iv = default_iv(keys, section_sequence, SECTION_MAC_CONTEXT, mac_seq)
    mac = crypto.hmac_sha256(keys.integrity, iv + _LENGTHS.pack(*lengths) + body)
    return _pack_entry(SECTION_MAC_CONTEXT, mac_seq, lengths, iv, mac, body)


def encode_section(entries, keys: NvKeys, sequence: int) -> bytes:
    """Encode one section; a section-MAC entry follows every eighth data entry
    and closes any non-empty section."""
    buf = bytearray(_SECTION_HDR.pack(SECTION_MAGIC, SECTION_VERSION, sequence, bytes(6)))
    mac_seq = 0
    since_mac = 0

    def append(blob):
        if len(buf) + len(blob) > SECTION_SIZE:
            raise CapacityError(f"section {sequence} overflows {SECTION_SIZE} bytes")
        buf.extend(blob)

    def append_mac():
        nonlocal mac_seq, since_mac
        mac_seq += 1
        append(_section_mac_entry(keys, sequence, mac_seq, bytes(buf)))
        since_mac = 0

    for entry in entries:
        append(_seal_entry(keys, sequence, entry))
        since_mac += 1
        if since_mac == SECTION_MAC_EVERY:
            append_mac()
    if since_mac:
        append_mac()
    buf.extend(b"\xff" * (SECTION_SIZE - len(buf)))
    return bytes(buf)


def encode_image(sections, keys: NvKeys, sequences=(1, 2)) -> bytes:
    """``sections`` is a pair of entry lists (one per slot)."""
    if len(sections) != 2 or len(sequences) != 2:
        raise FormatError("an image has exactly two sections")
    return b"".join(encode_section(e, keys, s) for e, s in zip(sections, sequences))
