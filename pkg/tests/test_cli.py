import csv
import json
import socket
import threading
from pathlib import Path

import numpy as np
import pytest

from fedvit.cli import (
    EXIT_ABORTED,
    EXIT_OK,
    EXIT_USAGE,
    build_parser,
    format_accuracy,
    main,
)
from fedvit.crypto import decrypt_model
from fedvit.federation import AbortedRun, RoundRecord
from fedvit.secrets import fingerprint
from fedvit.serializers import load_key, load_model
from tests.conftest import read_netpbm

RUN_TOML = """\
clients = 2
rounds = 2
lr = 0.5
seed = 9

[model]
image_h = 8
image_w = 8
channels = 3
patch_size = 4
embed_dim = 8
num_classes = 3
hidden_dim = 16

[data]
train_size = 24
test_size = 12
"""


@pytest.fixture()
def run_toml(tmp_path) -> Path:
    path = tmp_path / "run.toml"
    path.write_text(RUN_TOML)
    return path


@pytest.fixture()
def key_file(tmp_path, run_toml) -> Path:
    path = tmp_path / "shared.fvk"
    code = main(
        ["keygen", "--seed", "42", "--out", str(path)]
        + ["--config", str(run_toml)]
    )
    assert code == EXIT_OK
    return path


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.mark.unit
class TestParser:
    def test_missing_out(self):
        with pytest.raises(SystemExit) as exc:
            main(["keygen", "--seed", "1"])
        assert exc.value.code == 2

    def test_unknown_mode(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--mode", "secret", "--out-dir", "x"])
        assert exc.value.code == 2

    def test_defaults(self):
        args = build_parser().parse_args(["train", "--out-dir", "runs"])
        assert args.role == "local"
        assert args.mode is None

    def test_format_accuracy(self):
        assert format_accuracy(None) == "n/a"
        assert format_accuracy(89.7654) == "89.77"


@pytest.mark.integration
class TestKeygen:
    def test_writes_key(self, capsys, key_file):
        out = capsys.readouterr().out.strip()
        assert out == f"{fingerprint(42):016x}"
        key = load_key(key_file)
        assert (key.patch_dim, key.num_patches) == (48, 4)

    def test_stable(self, tmp_path, capsys):
        for name in ("a.fvk", "b.fvk"):
            main(["keygen", "--seed", "3", "--out", str(tmp_path / name)])
        first, second = capsys.readouterr().out.split()
        assert first == second
        assert (tmp_path / "a.fvk").read_bytes() == (
            tmp_path / "b.fvk"
        ).read_bytes()


@pytest.mark.integration
class TestTrain:
    def test_plain_run(self, tmp_path, run_toml, capsys):
        out_dir = tmp_path / "plain"
        code = main(
            ["train", "--config", str(run_toml), "--out-dir", str(out_dir)]
        )
        assert code == EXIT_OK
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["status"] == "complete"
        assert manifest["mode"] == "plain"
        assert manifest["last_round"] == 2
        assert manifest["key_id"] is None
        assert [r["round"] for r in manifest["rounds"]] == [1, 2]
        with open(out_dir / "metrics.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == [
            "round",
            "client_0_loss",
            "client_1_loss",
            "accuracy",
        ]
        assert len(rows) == 3
        assert rows[-1][-1] == manifest["final_accuracy"]
        cfg, params = load_model(out_dir / "model.fvw")
        assert cfg.patch_size == 4
        assert not params.encrypted
        assert manifest["final_accuracy"] in capsys.readouterr().out

    def test_encrypted_without_key(self, tmp_path, run_toml):
        code = main(
            [
                "train",
                "--config",
                str(run_toml),
                "--mode",
                "encrypted",
                "--out-dir",
                str(tmp_path / "enc"),
            ]
        )
        assert code == EXIT_USAGE

    def test_key_shape_mismatch(self, tmp_path, run_toml):
        key = tmp_path / "default.fvk"
        assert main(["keygen", "--seed", "1", "--out", str(key)]) == EXIT_OK
        code = main(
            [
                "train",
                "--config",
                str(run_toml),
                "--mode",
                "encrypted",
                "--key",
                str(key),
                "--out-dir",
                str(tmp_path / "enc"),
            ]
        )
        assert code == EXIT_USAGE

    def test_bad_config(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("clients = 0\n")
        code = main(
            ["train", "--config", str(path), "--out-dir", str(tmp_path)]
        )
        assert code == EXIT_USAGE

    def test_encrypted_matches_plain(self, tmp_path, run_toml, key_file):
        results = {}
        for mode in ("plain", "encrypted"):
            out_dir = tmp_path / mode
            code = main(
                [
                    "train",
                    "--config",
                    str(run_toml),
                    "--mode",
                    mode,
                    "--key",
                    str(key_file),
                    "--out-dir",
                    str(out_dir),
                ]
            )
            assert code == EXIT_OK
            results[mode] = json.loads((out_dir / "manifest.json").read_text())
        plain, encrypted = results["plain"], results["encrypted"]
        assert encrypted["key_id"] == f"{fingerprint(42):016x}"
        assert plain["final_accuracy"] == encrypted["final_accuracy"]
        for a, b in zip(plain["rounds"], encrypted["rounds"]):
            np.testing.assert_allclose(
                a["client_losses"], b["client_losses"], rtol=0, atol=1e-9
            )

    def test_aborted_run(self, tmp_path, run_toml, mocker):
        mocker.patch(
            "fedvit.cli.run_simulation",
            side_effect=AbortedRun(
                "peer vanished",
                last_round=1,
                records=[RoundRecord(1, (0.5, 0.25), 40.0, 0.1)],
            ),
        )
        out_dir = tmp_path / "aborted"
        code = main(
            ["train", "--config", str(run_toml), "--out-dir", str(out_dir)]
        )
        assert code == EXIT_ABORTED
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["status"] == "aborted"
        assert manifest["last_round"] == 1
        assert manifest["rounds"][0]["client_losses"] == [0.5, 0.25]
        assert manifest["final_accuracy"] == "40.00"
        assert not (out_dir / "model.fvw").exists()

    def test_server_without_clients(self, tmp_path, run_toml):
        run_toml.write_text(RUN_TOML + "\n[transport]\ntimeout = 0.5\n")
        out_dir = tmp_path / "server"
        code = main(
            ["train", "--config", str(run_toml), "--role", "server"]
            + ["--address", f"127.0.0.1:{free_port()}"]
            + ["--out-dir", str(out_dir)]
        )
        assert code == EXIT_ABORTED
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["status"] == "aborted"
        assert manifest["last_round"] == 0
        assert manifest["rounds"] == []
        assert manifest["artifacts"]["model"] is None
        assert not (out_dir / "model.fvw").exists()

    def test_distributed_roles(self, tmp_path, run_toml, key_file):
        initial = tmp_path / "initial.fvw"
        code = main(
            [
                "init",
                "--config",
                str(run_toml),
                "--mode",
                "encrypted",
                "--key",
                str(key_file),
                "--out",
                str(initial),
            ]
        )
        assert code == EXIT_OK
        assert load_model(initial)[1].encrypted
        address = f"127.0.0.1:{free_port()}"
        common = ["--config", str(run_toml), "--mode", "encrypted"]
        codes = {}

        def run(name, argv):
            codes[name] = main(argv)

        server = threading.Thread(
            target=run,
            args=(
                "server",
                ["train", *common, "--role", "server"]
                + ["--address", address, "--initial-model", str(initial)]
                + ["--out-dir", str(tmp_path / "server")],
            ),
        )
        clients = [
            threading.Thread(
                target=run,
                args=(
                    f"client{i}",
                    ["train", *common, "--role", "client"]
                    + ["--client-id", str(i), "--address", address]
                    + ["--key", str(key_file)]
                    + ["--out-dir", str(tmp_path / f"client{i}")],
                ),
            )
            for i in range(2)
        ]
        server.start()
        for thread in clients:
            thread.start()
        for thread in [server, *clients]:
            thread.join(timeout=60)
        assert codes == {"server": 0, "client0": 0, "client1": 0}

        local_dir = tmp_path / "local"
        main(
            ["train", *common, "--key", str(key_file)]
            + ["--out-dir", str(local_dir)]
        )
        key = load_key(key_file)
        _, served = load_model(tmp_path / "server" / "model.fvw")
        _, local = load_model(local_dir / "model.fvw")
        _, client = load_model(tmp_path / "client0" / "model.fvw")
        assert served.encrypted
        restored = decrypt_model(served, key)
        for name, value in local.tensors().items():
            assert np.array_equal(getattr(restored, name), value)
            assert np.array_equal(getattr(client, name), value)
        manifest = json.loads(
            (tmp_path / "server" / "manifest.json").read_text()
        )
        assert manifest["rounds"][-1]["accuracy"] is None


@pytest.mark.integration
class TestEvalAndAttack:
    def test_eval(self, tmp_path, run_toml, capsys):
        out_dir = tmp_path / "run"
        main(["train", "--config", str(run_toml), "--out-dir", str(out_dir)])
        manifest = json.loads((out_dir / "manifest.json").read_text())
        capsys.readouterr()
        code = main(
            [
                "eval",
                "--model",
                str(out_dir / "model.fvw"),
                "--data",
                str(run_toml),
            ]
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out.strip()
        assert out == f"{manifest['final_accuracy']}%"

    def test_eval_missing_model(self, tmp_path):
        code = main(["eval", "--model", str(tmp_path / "none.fvw")])
        assert code == EXIT_USAGE

    def test_live_attack(self, tmp_path, run_toml, key_file, capsys):
        out_dir = tmp_path / "attack"
        code = main(
            [
                "attack",
                "--config",
                str(run_toml),
                "--live",
                "--sample-index",
                "3",
                "--key",
                str(key_file),
                "--out-dir",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        for case in ("plain", "encrypted", "decrypted"):
            magic, pixels = read_netpbm(out_dir / f"reconstructed_{case}.ppm")
            assert magic == "P6"
            assert pixels.shape == (8, 8, 3)
        _, original = read_netpbm(out_dir / "original.ppm")
        _, plain = read_netpbm(out_dir / "reconstructed_plain.ppm")
        assert np.abs(original.astype(int) - plain.astype(int)).max() <= 1
        report = (out_dir / "report.txt").read_text()
        assert report.startswith("sample 3 label")
        assert "encrypted:" in report
        assert report in capsys.readouterr().out

    def test_attack_without_key(self, tmp_path, run_toml):
        out_dir = tmp_path / "attack"
        code = main(
            [
                "attack",
                "--config",
                str(run_toml),
                "--out-dir",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        assert not (out_dir / "reconstructed_decrypted.ppm").exists()
        assert (out_dir / "reconstructed_encrypted.ppm").exists()

    def test_attack_run_directory(self, tmp_path, run_toml):
        run_dir = tmp_path / "run"
        main(["train", "--config", str(run_toml), "--out-dir", str(run_dir)])
        code = main(
            [
                "attack",
                "--gradients-from-run",
                str(run_dir),
                "--out-dir",
                str(tmp_path / "attack"),
            ]
        )
        assert code == EXIT_OK
        assert (tmp_path / "attack" / "report.txt").exists()

    def test_attack_run_with_other_key(self, tmp_path, run_toml, key_file):
        run_dir = tmp_path / "run"
        code = main(
            ["train", "--config", str(run_toml), "--mode", "encrypted"]
            + ["--key", str(key_file), "--out-dir", str(run_dir)]
        )
        assert code == EXIT_OK
        other = tmp_path / "other.fvk"
        main(
            ["keygen", "--seed", "7", "--out", str(other)]
            + ["--config", str(run_toml)]
        )
        argv = ["attack", "--gradients-from-run", str(run_dir)]
        argv += ["--out-dir", str(tmp_path / "attack")]
        assert main(argv + ["--key", str(other)]) == EXIT_USAGE
        assert main(argv + ["--key", str(key_file)]) == EXIT_OK

    def test_sample_index_out_of_range(self, tmp_path, run_toml):
        code = main(
            [
                "attack",
                "--config",
                str(run_toml),
                "--sample-index",
                "24",
                "--out-dir",
                str(tmp_path),
            ]
        )
        assert code == EXIT_USAGE

    def test_compare(self, run_toml, key_file, capsys):
        capsys.readouterr()
        code = main(
            ["compare", "--config", str(run_toml), "--key", str(key_file)]
        )
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert "w/o encryption" in lines[0]
        _, plain, encrypted = lines[1].split()
        assert plain == encrypted
