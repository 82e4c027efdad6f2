import dataclasses
import json
import subprocess
import sys

import pytest

from dmap import cli
from dmap.crypto import KEYED_HASH, issue_certificate
from dmap.ledger import Block, MinerPolicy, append_block, dump_ledger, genesis
from dmap.txmodel import Payload, ROAD_DAMAGE, build_rsi_tx
from tests.conftest import FIXTURE_DIR, SCENARIO_DIR
from tests.test_txmodel import key, make_members, sample_loc

scheme = KEYED_HASH


@pytest.fixture
def tiny_scenario(tmp_path):
    doc = {
        "seed": 4,
        "grid": {"rows": 1, "cols": 2, "cell_size_m": 500.0},
        "vehicles": {"count": 5, "speed_min_mps": 5.0, "speed_max_mps": 10.0},
        "duration_ms": 10_000,
        "window_ms": 5000,
        "consistency": {"eps_distance_m": 50.0, "eps_time_ms": 2000,
                        "min_corroboration": 2},
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(doc))
    return path


def make_dump(tmp_path, tamper=False):
    ca, rsi_key = key("ca"), key("rsi")
    cert = issue_certificate(scheme, ca, rsi_key.public, "r0_c0")
    policy = MinerPolicy(m=2, ca_pk=ca.public,
                         cert_registry={rsi_key.public: cert})
    ledger = genesis("r0_c0")
    for b in range(5):
        payload = Payload(sample_loc(), ROAD_DAMAGE, b * 100)
        tx = build_rsi_tx(scheme, rsi_key, payload,
                          make_members(payload, [f"a{b}", f"b{b}"]), flag=1)
        append_block(scheme, ledger, [tx], (b + 1) * 1000, policy)
    if tamper:
        victim = ledger.blocks[3]
        ledger.blocks[3] = Block.make(height=3, prev_hash=victim.prev_hash,
                                      timestamp=victim.timestamp + 1,
                                      txs=victim.txs)
    path = tmp_path / ("tampered.bin" if tamper else "good.bin")
    path.write_bytes(dump_ledger(ledger))
    return path


class TestRun:
    def test_exit_zero_and_report_shape(self, tiny_scenario, tmp_path):
        out = tmp_path / "report.json"
        assert cli.main(["run", "--scenario", str(tiny_scenario),
                         "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert set(report) == {"scenario", "metrics", "ledgers", "invariants"}
        for entry in report["ledgers"].values():
            assert entry["tip_hash"] == entry["tip_hash"].lower()
            assert len(entry["tip_hash"]) == 64

    def test_repeat_run_byte_identical(self, tiny_scenario, tmp_path):
        out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
        cli.main(["run", "--scenario", str(tiny_scenario), "--out", str(out1)])
        cli.main(["run", "--scenario", str(tiny_scenario), "--out", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()

    def test_seed_flag_overrides_file(self, tiny_scenario, tmp_path):
        out = tmp_path / "r.json"
        cli.main(["run", "--scenario", str(tiny_scenario), "--seed", "77",
                  "--out", str(out)])
        assert json.loads(out.read_text())["scenario"]["seed"] == 77

    def test_env_seed_applies_when_flag_absent(self, tiny_scenario, tmp_path,
                                               monkeypatch):
        out = tmp_path / "r.json"
        monkeypatch.setenv("DMAP_SEED", "31")
        cli.main(["run", "--scenario", str(tiny_scenario), "--out", str(out)])
        assert json.loads(out.read_text())["scenario"]["seed"] == 31

    def test_seed_flag_beats_env(self, tiny_scenario, tmp_path, monkeypatch):
        out = tmp_path / "r.json"
        monkeypatch.setenv("DMAP_SEED", "31")
        cli.main(["run", "--scenario", str(tiny_scenario), "--seed", "8",
                  "--out", str(out)])
        assert json.loads(out.read_text())["scenario"]["seed"] == 8

    def test_missing_scenario_exits_64(self, tmp_path):
        assert cli.main(["run", "--scenario",
                         str(tmp_path / "nope.json")]) == 64

    def test_malformed_json_exits_65(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert cli.main(["run", "--scenario", str(path)]) == 65

    def test_bad_field_exits_65_naming_field(self, tmp_path, capsys):
        doc = json.loads((SCENARIO_DIR / "honest_majority.json").read_text())
        doc["adversary"]["fraction"] = 2
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        assert cli.main(["run", "--scenario", str(path)]) == 65
        assert "adversary.fraction" in capsys.readouterr().err

    def test_unwritable_out_exits_73(self, tiny_scenario, tmp_path):
        out = tmp_path / "missing-dir" / "report.json"
        with pytest.raises(SystemExit) as exc:
            cli.main(["run", "--scenario", str(tiny_scenario),
                      "--out", str(out)])
        assert exc.value.code == 73


class TestValidate:
    def test_intact_dump_exits_0(self, tmp_path, capsys):
        path = make_dump(tmp_path)
        assert cli.main(["validate", "--ledger", str(path)]) == 0
        assert capsys.readouterr().out.startswith("ok:")

    def test_tampered_dump_exits_1_with_height(self, tmp_path, capsys):
        path = make_dump(tmp_path, tamper=True)
        assert cli.main(["validate", "--ledger", str(path)]) == 1
        assert "first_bad_height=4" in capsys.readouterr().out

    def test_garbage_file_exits_1(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a ledger at all")
        assert cli.main(["validate", "--ledger", str(path)]) == 1

    def test_missing_file_exits_64(self, tmp_path):
        assert cli.main(["validate", "--ledger",
                         str(tmp_path / "nope.bin")]) == 64


class TestEncodeFixtures:
    def test_output_matches_committed_corpus(self, tmp_path):
        out = tmp_path / "fix"
        assert cli.main(["encode-fixtures", "--out", str(out)]) == 0
        produced = sorted(p.name for p in out.iterdir())
        committed = sorted(p.name for p in FIXTURE_DIR.iterdir())
        assert produced == committed
        for name in produced:
            assert ((out / name).read_text() ==
                    (FIXTURE_DIR / name).read_text()), name


def test_module_invocation_smoke(tmp_path):
    path = make_dump(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "dmap.cli",
                           "validate", "--ledger", str(path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ok:" in proc.stdout
