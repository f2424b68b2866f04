import json
import os

import numpy as np
import pytest

from matpor import cli
from matpor import porcore as pc
from matpor import wire


@pytest.fixture
def env(tmp_path, monkeypatch):
    srv = wire.PorServer(("127.0.0.1", 0), tmp_path / "srv")
    srv.start()
    monkeypatch.setenv("POR_ENDPOINT", srv.endpoint)
    monkeypatch.chdir(tmp_path)
    yield tmp_path, srv
    srv.stop()


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def make_file(path, size, seed=0):
    data = np.random.default_rng(seed).integers(0, 256, size, dtype=np.uint8).tobytes()
    path.write_bytes(data)
    return data


def corrupt_server(srv, offset):
    data = np.memmap(srv.data_dir / "store" / "data.bin", dtype=np.uint8, mode="r+")
    data[offset] ^= 0x10
    data.flush()


def test_parse_size():
    assert cli.parse_size("10MB") == 10**7
    assert cli.parse_size("1MiB") == 2**20
    assert cli.parse_size("1GB") == 10**9
    assert cli.parse_size("4096") == 4096


def test_init_reports_shape(env, capsys):
    tmp, _ = env
    make_file(tmp / "f.bin", 2**20)
    code, out, _ = run(capsys, "--json", "init", "f.bin")
    rep = json.loads(out)
    assert code == 0 and (rep["m"], rep["n"], rep["t"]) == (387, 388, 1)
    assert rep["e"] == 4 * 388 + 960
    assert rep["audit_bytes_up"] + rep["audit_bytes_down"] == 8 * (387 + 1) + 26
    assert (tmp / "matpor.state").read_bytes()[:4] == b"PORC"


def test_init_refusals(env, capsys):
    tmp, _ = env
    (tmp / "empty").write_bytes(b"")
    assert run(capsys, "init", "empty")[0] == 1
    make_file(tmp / "f.bin", 5000)
    assert run(capsys, "init", "f.bin")[0] == 0
    before = (tmp / "matpor.state").read_bytes()
    code, _, err = run(capsys, "init", "f.bin")
    assert code == 1 and "--force" in err
    assert (tmp / "matpor.state").read_bytes() == before
    assert run(capsys, "init", "f.bin", "--force")[0] == 0


def test_read_write_audit_cycle(env, capsys):
    tmp, _ = env
    data = make_file(tmp / "f.bin", 100000)
    assert run(capsys, "init", "f.bin")[0] == 0
    code, out, _ = run(capsys, "--json", "read", "123", "10")
    assert code == 0 and bytes.fromhex(json.loads(out)["hex"]) == data[123:133]
    assert run(capsys, "write", "8185", "--data", "across the block edge")[0] == 0
    code, out, _ = run(capsys, "read", "8185", "21")
    assert out == "across the block edge"
    code, out, _ = run(capsys, "--json", "audit", "--repeat", "10")
    rep = json.loads(out)
    assert code == 0 and len(rep["audits"]) == 10 and all(a["accepted"] for a in rep["audits"])
    state = pc.ClientState.from_bytes((tmp / "matpor.state").read_bytes())
    assert {a["bytes_down"] for a in rep["audits"]} == {8 * state.params.m + 13}
    assert set(rep["audits"][0]) == {"index", "rho_hash", "accepted", "server_s", "client_s",
                                     "bytes_up", "bytes_down"}


def test_range_error_exit_1(env, capsys):
    tmp, _ = env
    make_file(tmp / "f.bin", 1000)
    run(capsys, "init", "f.bin")
    assert run(capsys, "read", "995", "10")[0] == 1
    assert run(capsys, "write", "2000", "--data", "x")[0] == 1


@pytest.mark.parametrize("mode", ["private-local", "private-extern", "public-writer"])
def test_corruption_gives_exit_2(env, capsys, mode):
    tmp, srv = env
    make_file(tmp / "f.bin", 60000)
    assert run(capsys, "--mode", mode, "init", "f.bin")[0] == 0
    assert run(capsys, "audit")[0] == 0
    corrupt_server(srv, 31337)
    code, _, err = run(capsys, "audit", "--repeat", "5")
    assert code == 2 and "INTEGRITY" in err
    assert run(capsys, "read", "31330", "10")[0] == 2


def test_extract_roundtrip_and_failures(env, capsys):
    tmp, _ = env
    data = bytearray(make_file(tmp / "f.bin", 7 * 30 * 30))
    run(capsys, "init", "f.bin")
    run(capsys, "write", "50", "--hex", "deadbeef")
    data[50:54] = bytes.fromhex("deadbeef")
    state = pc.ClientState.from_bytes((tmp / "matpor.state").read_bytes())
    n = state.params.n
    assert run(capsys, "audit", "--repeat", str(n - 1), "--save", "few")[0] == 0
    code, out, err = run(capsys, "extract", "--transcripts", "few", "--out", "x.bin")
    assert code == 1 and f"only {n - 1} distinct" in err and f"need {n}" in err
    assert run(capsys, "audit", "--repeat", str(n + 5), "--save", "tr")[0] == 0
    assert run(capsys, "extract", "--transcripts", "tr", "--out", "x.bin")[0] == 0
    assert (tmp / "x.bin").read_bytes() == bytes(data)
    # tamper with one y in one saved transcript
    victim = sorted((tmp / "tr").iterdir())[0]
    raw = bytearray(victim.read_bytes())
    raw[-3] ^= 1
    victim.write_bytes(bytes(raw))
    assert run(capsys, "extract", "--transcripts", "tr", "--out", "y.bin")[0] == 2


def test_public_verifier_needs_only_manifest(env, capsys):
    tmp, _ = env
    make_file(tmp / "f.bin", 20000)
    assert run(capsys, "--mode", "public-writer", "init", "f.bin")[0] == 0
    assert run(capsys, "write", "10", "--data", "hi")[0] == 0
    os.rename(tmp / "matpor.state", tmp / "hidden.state")
    assert run(capsys, "--mode", "public-verifier", "audit", "--repeat", "2")[0] == 0
    code, out, _ = run(capsys, "--mode", "public-verifier", "read", "10", "2")
    assert out == "hi"
    assert run(capsys, "--mode", "public-verifier", "write", "10", "--data", "no")[0] == 1


def test_mode_mismatch_and_missing_state(env, capsys):
    tmp, _ = env
    assert run(capsys, "audit")[0] == 1
    make_file(tmp / "f.bin", 3000)
    run(capsys, "init", "f.bin")
    code, _, err = run(capsys, "--mode", "private-extern", "audit")
    assert code == 1 and "private-local" in err


def test_transport_error_exit_1(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    make_file(tmp_path / "f.bin", 3000)
    code, _, err = run(capsys, "--endpoint", "127.0.0.1:1", "--json", "init", "f.bin")
    assert code == 1 and json.loads(err)["error"] == "operational"
    assert not (tmp_path / "matpor.state").exists()


def test_bench_command(tmp_path, capsys):
    csv_path = tmp_path / "b.csv"
    code, out, _ = run(capsys, "bench", "--sizes", "100KB", "--threads", "1,2",
                       "--repeats", "3", "--csv", str(csv_path), "--workdir", str(tmp_path))
    assert code == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "size_bytes,threads,median_s,bytes_up,bytes_down,mode" and len(lines) == 3
