import json
import subprocess
import sys

import pytest

from ftpmkit import cli, fixtures

FAST = "64"


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    assert cli.main(["fixtures", "--out", str(out), "--rounds", FAST, "--pin", "0007"]) == 0
    return out, json.loads((out / "index.json").read_text())


def key_args(index, seed=None):
    args = ["--modulus", index["modulus"], "--app-id", index["app_id"]]
    if seed:
        return args + ["--seed", seed]
    return args + ["--secret", index["secret"], "--constant", index["constant"]]


def run(capsys, argv):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_derive_keys(fx, capsys):
    _, index = fx
    code, out, _ = run(capsys, ["--json", "derive-keys", *key_args(index)])
    assert code == 0 and json.loads(out) == index["keys"]


def test_nv_decrypt_and_plaintext(fx, capsys, tmp_path):
    d, index = fx
    pt = tmp_path / "pt.bin"
    code, out, _ = run(capsys, ["nv-decrypt", "--json", "--image", str(d / "nv_image.bin"),
                                *key_args(index), "--plaintext-out", str(pt)])
    assert code == 0
    doc = json.loads(out)
    manifest = json.loads((d / "manifest.json").read_text())
    assert doc["contexts"] == fixtures.expected_model(manifest)
    assert pt.read_bytes() == (d / "nv_plaintext.bin").read_bytes()


def test_nv_decrypt_wrong_keys_exit_1(fx, capsys):
    d, index = fx
    code, _, err = run(capsys, ["nv-decrypt", "--image", str(d / "nv_image.bin"),
                                *key_args(index, seed="00" * 16)])
    assert code == 1 and "no entry verifies" in err


def test_forge_round_trip(fx, capsys, tmp_path):
    d, index = fx
    out = tmp_path / "img.bin"
    code, _, _ = run(capsys, ["nv-forge", "--manifest", str(d / "manifest.json"),
                              *key_args(index), "--out", str(out)])
    assert code == 0 and out.read_bytes() == (d / "nv_image.bin").read_bytes()


def test_forge_capacity_exit_2(fx, capsys, tmp_path):
    _, index = fx
    m = tmp_path / "m.json"
    big = [{"context": 1, "sequence": i, "fields": ["00" * 60000]} for i in range(2)]
    m.write_text(json.dumps({"sections": [{"sequence": 1, "entries": big},
                                          {"sequence": 2, "entries": []}]}))
    code, _, err = run(capsys, ["nv-forge", "--manifest", str(m), *key_args(index),
                                "--out", str(tmp_path / "x")])
    assert code == 2 and "CapacityError" in err


def test_find_seed_and_unseal(fx, capsys):
    d, index = fx
    code, out, _ = run(capsys, ["--json", "find-seed", "--blob", str(d / "object.blob"),
                                "--nv-plaintext", str(d / "nv_plaintext.bin")])
    assert code == 0 and json.loads(out)["primary_seed"] == index["primary_seed"]
    code, out, _ = run(capsys, ["unseal", "--json", "--public", str(d / "object.pub"),
                                "--private", str(d / "object.priv"), "--seed", index["primary_seed"]])
    assert code == 0 and json.loads(out)["sensitive_data"].endswith(index["vmk"])


def test_seed_not_found_exit_1(fx, capsys, tmp_path):
    d, _ = fx
    empty = tmp_path / "zero.bin"
    empty.write_bytes(bytes(256))
    code, _, err = run(capsys, ["find-seed", "--blob", str(d / "object.blob"),
                                "--nv-plaintext", str(empty)])
    assert code == 1 and "SeedNotFound" in err


@pytest.mark.parametrize("mode, extra, key", [
    ("tpm-only", [], "vmk"),
    ("tpm-pin", ["--pin", "0007"], "vmk"),
    ("tpm-pin", ["--crack"], "vmk"),
    ("naive", [], "passphrase"),
])
def test_vmk_modes(fx, capsys, mode, extra, key):
    d, index = fx
    meta = {"tpm-only": "tpm_only", "tpm-pin": "tpm_pin", "naive": "naive_pin"}[mode]
    code, out, _ = run(capsys, ["vmk", "--json", "--mode", mode, "--metadata", str(d / f"{meta}.fvmd"),
                                "--nv-plaintext", str(d / "nv_plaintext.bin"), *extra])
    doc = json.loads(out)
    assert code == 0
    assert set(doc) >= {"protector", "vmk", "passphrase", "attempts", "elapsed_s"}
    assert doc[key] == (index["naive_passphrase"] if key == "passphrase" else index["vmk"])
    if "--crack" in extra:
        assert doc["attempts"] == 8 and doc["pin"] == "0007"


def test_wrong_pin_exit_1(fx, capsys):
    d, _ = fx
    code, _, err = run(capsys, ["vmk", "--mode", "tpm-pin", "--pin", "0008",
                                "--metadata", str(d / "tpm_pin.fvmd"),
                                "--nv-plaintext", str(d / "nv_plaintext.bin")])
    assert code == 1 and "WrongPin" in err


def test_lsb_demo(capsys):
    code, out, _ = run(capsys, ["--json", "lsb-demo", "--seed-slot", "ab" * 16])
    doc = json.loads(out)
    assert code == 0 and doc["recovered"] == "ab" * 16 and doc["op_count"] <= 4112
    code, _, err = run(capsys, ["lsb-demo", "--mode", "aligned"])
    assert code == 1 and "ExtractionImpossible" in err


def test_estimate(capsys):
    code, out, _ = run(capsys, ["estimate", "--table"])
    assert code == 0 and "1.3·10^6 yr" in out and "0.5 sec" in out
    code, out, _ = run(capsys, ["estimate", "--entropy", "9", "--tpm", "dtpm"])
    assert out.strip() == "3.5 days"


@pytest.mark.parametrize("argv", [
    ["derive-keys", "--seed", "0x" + "00" * 15, "--modulus", "00", "--app-id", "00" * 16],
    ["derive-keys", "--seed", "0" * 31, "--modulus", "00", "--app-id", "00" * 16],
    ["derive-keys", "--seed", "00" * 15, "--modulus", "00", "--app-id", "00" * 16],
    ["derive-keys", "--seed", "zz" * 16, "--modulus", "00", "--app-id", "00" * 16],
    ["derive-keys", "--modulus", "00", "--app-id", "00" * 16],
    ["estimate"],
    ["nv-decrypt", "--image", "/nonexistent", "--seed", "00" * 16, "--modulus", "00",
     "--app-id", "00" * 16],
])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, argv)
    assert code == 2 and err.startswith("error:")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ftpmkit", "estimate", "--entropy", "15"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "33 sec"


def test_forge_decrypt_forge_is_byte_identical(fx, capsys, tmp_path):
    d, index = fx
    code, out, _ = run(capsys, ["nv-decrypt", "--json", "--image", str(d / "nv_image.bin"), *key_args(index)])
    assert code == 0
    decrypted = tmp_path / "decrypted.json"
    decrypted.write_text(out)
    again = tmp_path / "again.bin"
    code, _, _ = run(capsys, ["nv-forge", "--manifest", str(decrypted), *key_args(index),
                              "--out", str(again)])
    assert code == 0 and again.read_bytes() == (d / "nv_image.bin").read_bytes()


def test_derive_keys_from_seed_matches_secret(fx, capsys):
    _, index = fx
    from ftpmkit import keys as k
    seed = k.derive_seed(bytes.fromhex(index["secret"]), bytes.fromhex(index["constant"])).hex()
    code, out, _ = run(capsys, ["--json", "derive-keys", *key_args(index, seed=seed)])
    assert code == 0 and json.loads(out) == index["keys"]


def test_estimate_zero_entropy(capsys):
    code, out, _ = run(capsys, ["estimate", "--entropy", "0"])
    assert code == 0 and out.strip() == "0.0 sec"


def test_empty_manifest_gives_empty_image(fx, capsys, tmp_path):
    _, index = fx
    m = tmp_path / "empty.json"
    m.write_text(json.dumps({"sections": [{"sequence": 1, "entries": []},
                                          {"sequence": 2, "entries": []}]}))
    img = tmp_path / "empty.bin"
    assert run(capsys, ["nv-forge", "--manifest", str(m), *key_args(index), "--out", str(img)])[0] == 0
    code, out, _ = run(capsys, ["nv-decrypt", "--json", "--image", str(img), *key_args(index)])
    assert code == 0 and json.loads(out)["contexts"] == {}


def test_unseal_random_plaintext_exit_1(fx, capsys, tmp_path):
    d, _ = fx
    junk = tmp_path / "junk.bin"
    junk.write_bytes(bytes(range(256)) * 8)
    code, _, err = run(capsys, ["unseal", "--blob", str(d / "object.blob"), "--nv-plaintext", str(junk)])
    assert code == 1 and "SeedNotFound" in err


def test_lsb_demo_is_deterministic(capsys):
    first = run(capsys, ["--json", "lsb-demo"])[1]
    assert first == run(capsys, ["--json", "lsb-demo"])[1]
    assert json.loads(first)["matches_planted"]


def test_unseal_with_seed_equals_search(fx, capsys):
    d, index = fx
    base = ["--json", "unseal", "--blob", str(d / "object.blob")]
    searched = json.loads(run(capsys, base + ["--nv-plaintext", str(d / "nv_plaintext.bin")])[1])
    direct = json.loads(run(capsys, base + ["--seed", index["primary_seed"]])[1])
    for key in ("auth_value", "seed_value", "sensitive_data"):
        assert searched[key] == direct[key]
