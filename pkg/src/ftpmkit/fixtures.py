"""Fixture generators: NV manifests and images, sealed objects, volume
metadata. Everything is driven by an explicit ``random.Random`` so fixtures
are reproducible from a seed.
"""

import base64
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto, fde, nv, tpm
from .errors import FormatError
from .keys import AppIdentity, NvKeys, derive_from_chip_secret

# Arbitrary stand-in for the firmware's step-one ciphertext.
FIXTURE_CONSTANT = bytes.fromhex("5f3a9c0d7e21b4468ac1e0f29b7d3c55")
FIXTURE_SECRET = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
FIXTURE_APP_ID = bytes.fromhex("00000000000000000000000000000003")
FIXTURE_MODULUS = bytes.fromhex(
    "c3a1f0e9d8c7b6a5948372615049382716f5e4d3c2b1a09f8e7d6c5b4a392817"
    "0f1e2d3c4b5a69788796a5b4c3d2e1f00112233445566778899aabbccddeeff1"
)
SEED_CONTEXT = 0x40
SEED_CONTEXT_SEQUENCE = 1


def fixture_identity() -> AppIdentity:
    return AppIdentity(FIXTURE_MODULUS, FIXTURE_APP_ID)


def fixture_keys() -> NvKeys:
    return derive_from_chip_secret(FIXTURE_SECRET, FIXTURE_CONSTANT, fixture_identity())


# -- NV manifests ---------------------------------------------------------------

def _entries_from_json(items):
    entries = []
    for item in items:
        try:
            iv = bytes.fromhex(item["iv"]) if item.get("iv") else None
            entries.append(nv.PlainEntry(
                int(item["context"]), int(item["sequence"]),
                tuple(bytes.fromhex(f) for f in item["fields"]), iv))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad manifest entry {item!r}: {exc}") from None
    return entries


def manifest_sections(manifest: dict):
    """Return ``(entry lists, sequences)`` for :func:`nv.encode_image`.

    Accepts either ``{"sections": [{"sequence", "entries"}, ...]}`` or the
    JSON produced by decryption (``{"active_section", "contexts"}``), which
    maps to an active section plus an empty older one. Decryption groups
    entries by context, so only images already in (context, sequence) order
    survive decrypt-then-forge byte for byte.
    """
    if "sections" in manifest:
        sections = manifest["sections"]
        if len(sections) != 2:
            raise FormatError("manifest needs exactly two sections")
        return ([_entries_from_json(s.get("entries", [])) for s in sections],
                tuple(int(s["sequence"]) for s in sections))
    if "contexts" in manifest:
        active = int(manifest["active_section"])
        if active < 1:
            raise FormatError("active_section must be at least 1")
        items = [
            {"context": int(ctx), **row}
            for ctx in sorted(manifest["contexts"], key=int)
            for row in manifest["contexts"][ctx]
        ]
        # Sections alternate, so sequence n lives in slot (n - 1) % 2.
        if active % 2:
            return [_entries_from_json(items), []], (active, active - 1)
        return [[], _entries_from_json(items)], (active - 1, active)
    raise FormatError("manifest has neither 'sections' nor 'contexts'")


def forge_image(manifest: dict, keys: NvKeys) -> bytes:
    sections, sequences = manifest_sections(manifest)
    return nv.encode_image(sections, keys, sequences)


def trim_fields(fields):
    fields = list(fields)
    while fields and not fields[-1]:
        fields.pop()
    return fields


def expected_model(manifest: dict) -> dict:
    """The ``contexts`` mapping decryption should report for a manifest."""
    sections, sequences = manifest_sections(manifest)
    active = sections[0] if sequences[0] > sequences[1] else sections[1]
    model = {}
    for e in active:
        model.setdefault(str(e.context), []).append(
            {"sequence": e.sequence, "fields": [f.hex() for f in trim_fields(e.fields)], "verified": True})
    for rows in model.values():
        rows.sort(key=lambda r: r["sequence"])
    return {k: model[k] for k in sorted(model, key=int)}


def random_fields(rng: random.Random, max_len: int = 96):
    return [rng.randbytes(rng.randint(0, max_len)) for _ in range(rng.randint(0, nv.MAX_FIELDS))]


def random_manifest(rng: random.Random, max_entries: int = 20, contexts=(1, 2, 3, 7, 0x40)) -> dict:
    """Two sections of random entries, per-context sequences strictly increasing."""
    seqs = rng.sample(range(1, 1000), 2)
    sections = []
    for s in seqs:
        counters = {}
        entries = []
        for _ in range(rng.randint(0, max_entries)):
            ctx = rng.choice(contexts)
            counters[ctx] = counters.get(ctx, 0) + rng.randint(1, 3)
            entries.append({"context": ctx, "sequence": counters[ctx],
                            "fields": [f.hex() for f in random_fields(rng)]})
        sections.append({"sequence": s, "entries": entries})
    return {"sections": sections}


def canonical_manifest(manifest: dict) -> dict:
    """Decrypted-document form of a manifest's active section."""
    sections, sequences = manifest_sections(manifest)
    active = max(sequences)
    return {"active_section": active, "contexts": expected_model(manifest)}


# -- sealed objects -------------------------------------------------------------

@dataclass
class SealedFixture:
    public: tpm.TpmPublic
    private: tpm.TpmPrivate
    sensitive: tpm.TpmSensitive
    parent_seed: bytes

    @property
    def blob(self) -> bytes:
        return self.private.to_blob() + self.public.to_blob()


def seal_random(rng: random.Random, parent_seed: bytes, sensitive_data: bytes,
                auth_policy: bytes = None, auth_value: bytes = None) -> SealedFixture:
    public = tpm.TpmPublic(
        auth_policy=rng.randbytes(32) if auth_policy is None else auth_policy,
        unique=rng.randbytes(32),
    )
    sensitive = tpm.TpmSensitive(
        auth_value=rng.randbytes(rng.randint(1, 32)) if auth_value is None else auth_value,
        seed_value=rng.randbytes(32),
        sensitive_data=sensitive_data,
    )
    private = tpm.seal_object(sensitive, public, parent_seed, rng.randbytes(16))
    return SealedFixture(public, private, sensitive, parent_seed)


def plant(buffer: bytes, offset: int, seed: bytes) -> bytes:
    if not 0 <= offset <= len(buffer) - len(seed):
        raise ValueError("seed does not fit at that offset")
    return buffer[:offset] + seed + buffer[offset + len(seed):]


def random_policy(rng: random.Random, bank: tpm.PcrBank = None) -> tpm.PcrPolicy:
    if bank is None:
        bank = tpm.PcrBank()
        for i in range(8):
            bank.extend(i, rng.randbytes(32))
    return tpm.PcrPolicy.from_bank(bank, sorted(rng.sample(range(8), rng.randint(1, 4))))


def inner_datum(vmk: bytes) -> bytes:
    # u16 key type, u16 reserved, VMK -- only the trailing 32 bytes matter
    return fde.Datum(fde.DatumType.INNER, bytes.fromhex("0320") + bytes(2) + vmk).to_bytes()


# -- end-to-end scenario ----------------------------------------------------------

@dataclass
class Scenario:
    """A complete attack scenario: NV image holding a cached primary seed and
    volume metadata for each protector type."""
    keys: NvKeys
    manifest: dict
    image: bytes
    primary_seed: bytes
    vmk: bytes
    pin: str
    secret: bytes
    tpm_only: bytes
    tpm_pin: bytes
    naive: bytes
    naive_pin_guarded: bytes
    tpm_only_object: SealedFixture = field(repr=False, default=None)

    @property
    def nv_plaintext(self) -> bytes:
        return nv.decrypt_image(nv.parse_image(self.image), self.keys).plaintext()


def _tpm_encoded(dtype, sealed: SealedFixture, policy: tpm.PcrPolicy) -> fde.Datum:
    payload = fde.TpmEncoded(sealed.private, sealed.public, policy).to_bytes()
    return fde.Datum(dtype, payload)


def build_scenario(rng: random.Random = None, keys: NvKeys = None, pin: str = "0042",
                   rounds: int = fde.DEFAULT_ROUNDS, filler_entries: int = 12) -> Scenario:
    rng = rng or random.Random(0x5EED)
    keys = keys or fixture_keys()
    primary_seed = rng.randbytes(32)

    # NV manifest: random filler with the primary seed cached in one field.
    counters = {}
    entries = []
    for _ in range(filler_entries):
        ctx = rng.choice((1, 2, 3))
        counters[ctx] = counters.get(ctx, 0) + 1
        entries.append({"context": ctx, "sequence": counters[ctx],
                        "fields": [f.hex() for f in random_fields(rng, 64)]})
    entries.append({
        "context": SEED_CONTEXT, "sequence": SEED_CONTEXT_SEQUENCE,
        "fields": [bytes.fromhex("0001").hex(), rng.randbytes(12).hex(), primary_seed.hex()],
    })
    entries.sort(key=lambda e: (e["context"], e["sequence"]))  # canonical on-flash order
    manifest = {"sections": [
        {"sequence": 1, "entries": []},
        {"sequence": 2, "entries": entries},
    ]}
    image = forge_image(manifest, keys)

    vmk = rng.randbytes(32)
    policy = random_policy(rng)

    only = seal_random(rng, primary_seed, inner_datum(vmk), auth_value=b"")
    tpm_only = fde.VolumeMetadata((_tpm_encoded(fde.DatumType.TPM_ENCODED, only, policy),))

    material = rng.randbytes(32)
    params = fde.StretchParams(rng.randbytes(16), rounds)
    stretched = fde.stretch_pin(pin, params)
    nonce = rng.randbytes(12)
    ccm = crypto.aes_ccm_encrypt(fde.pin_ccm_key(material, stretched), nonce, inner_datum(vmk))
    pin_obj = seal_random(rng, primary_seed, material, auth_value=b"")
    tpm_pin = fde.VolumeMetadata((
        _tpm_encoded(fde.DatumType.TPM_ENCODED, pin_obj, policy),
        fde.Datum(fde.DatumType.STRETCH, params.to_bytes()),
        fde.Datum(fde.DatumType.AES_CCM, nonce + ccm),
    ))

    secret = rng.randbytes(32)
    naive_obj = seal_random(rng, primary_seed, secret, auth_value=b"")
    naive = fde.VolumeMetadata((_tpm_encoded(fde.DatumType.SEALED_SECRET, naive_obj, policy),))
    # PIN-guarded variant: the PIN only becomes the object's auth value.
    guarded_obj = seal_random(rng, primary_seed, secret,
                              auth_value=crypto.sha256(pin.encode("utf-8")))
    guarded = fde.VolumeMetadata((
        _tpm_encoded(fde.DatumType.SEALED_SECRET, guarded_obj, policy),
        fde.Datum(fde.DatumType.STRETCH, params.to_bytes()),
    ))

    return Scenario(keys, manifest, image, primary_seed, vmk, pin, secret,
                    tpm_only.to_bytes(), tpm_pin.to_bytes(), naive.to_bytes(),
                    guarded.to_bytes(), only)


def write_fixture_dir(out: Path, rng_seed: int = 0x5EED, rounds: int = fde.DEFAULT_ROUNDS,
                      pin: str = "0042") -> dict:
    """Write a self-contained fixture set and return its index."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sc = build_scenario(random.Random(rng_seed), pin=pin, rounds=rounds)
    files = {
        "manifest.json": json.dumps(sc.manifest, indent=1).encode(),
        "nv_image.bin": sc.image,
        "nv_plaintext.bin": sc.nv_plaintext,
        "tpm_only.fvmd": sc.tpm_only,
        "tpm_pin.fvmd": sc.tpm_pin,
        "naive.fvmd": sc.naive,
        "naive_pin.fvmd": sc.naive_pin_guarded,
        "object.blob": sc.tpm_only_object.blob,
        "object.pub": sc.tpm_only_object.public.to_blob(),
        "object.priv": sc.tpm_only_object.private.to_blob(),
    }
    for name, data in files.items():
        (out / name).write_bytes(data)
    index = {
        "secret": FIXTURE_SECRET.hex(),
        "constant": FIXTURE_CONSTANT.hex(),
        "modulus": FIXTURE_MODULUS.hex(),
        "app_id": FIXTURE_APP_ID.hex(),
        "keys": sc.keys.to_json(),
        "primary_seed": sc.primary_seed.hex(),
        "vmk": sc.vmk.hex(),
        "pin": sc.pin,
        "rounds": rounds,
        "naive_passphrase": base64.b64encode(sc.secret).decode(),
        "files": sorted(files),
    }
    (out / "index.json").write_text(json.dumps(index, indent=1))
    return index
