"""Command-line interface: contracts, artifacts, exit codes."""

import json
import re
import subprocess
import sys

import numpy as np
import pytest

from dmfnet import cli, data as dio

from oracles import make_tumor_case

TOY_ARCH = {"groups": 2, "stage_channels": [4, 8, 8, 8, 8, 8, 4]}


@pytest.fixture
def toy_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"arch": TOY_ARCH}))
    return str(path)


@pytest.fixture
def case_dir(tmp_path):
    vol, lab = make_tumor_case(size=16, seed=1)
    d = tmp_path / "data" / "case_a"
    dio.save_case(d, vol, lab)
    return d


class TestAnalyze:
    def test_params_line_matches_published_total(self, capsys):
        assert cli.main(["analyze", "--arch", "dmfnet"]) == 0
        out = capsys.readouterr().out
        m = re.search(r"total params: ([0-9.]+)M", out)
        assert m, out
        assert abs(float(m.group(1)) - 3.88) / 3.88 < 0.02

    def test_compare_table(self, capsys):
        assert cli.main(["analyze", "--compare", "dmfnet,mfnet,mfnet-075"]) == 0
        out = capsys.readouterr().out
        assert "dmfnet" in out and "mfnet-075" in out and "FLOPs(G)" in out

    def test_json_report(self, tmp_path, capsys):
        out_path = tmp_path / "report.json"
        assert cli.main(["analyze", "--arch", "toy", "--input-shape", "1,4,16,16,16",
                         "--json", str(out_path)]) == 0
        blob = json.loads(out_path.read_text())
        assert blob["total_params"] > 0

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["analyze", "--arch", "nonsense"])
        assert err.value.code == 2


class TestGradcheck:
    def test_ops_scope_passes(self, capsys):
        assert cli.main(["gradcheck", "--scope", "ops"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_blocks_scope_passes(self, capsys):
        assert cli.main(["gradcheck", "--scope", "blocks"]) == 0


class TestTrainInferEvaluate:
    def test_end_to_end(self, tmp_path, toy_config_file, case_dir, capsys):
        out_dir = tmp_path / "run"
        rc = cli.main(["train", "--config", toy_config_file, "--arch", "toy",
                       "--data-dir", str(case_dir.parent), "--out-dir", str(out_dir),
                       "--epochs", "2", "--no-augment", "--seed", "0"])
        assert rc == 0
        assert (out_dir / "checkpoint.bin").is_file()
        assert (out_dir / "trainlog.jsonl").is_file()
        assert (out_dir / "omega.csv").is_file()

        seg_path = tmp_path / "pred.u8"
        rc = cli.main(["infer", "--config", toy_config_file, "--arch", "toy",
                       "--checkpoint", str(out_dir / "checkpoint.bin"),
                       "--case-dir", str(case_dir), "--out", str(seg_path)])
        assert rc == 0
        labels = np.frombuffer(seg_path.read_bytes(), dtype=np.uint8)
        assert labels.size == 16 ** 3
        assert set(np.unique(labels)) <= {0, 1, 2, 4}

        metrics_path = tmp_path / "metrics.jsonl"
        rc = cli.main(["evaluate", "--config", toy_config_file, "--arch", "toy",
                       "--checkpoint", str(out_dir / "checkpoint.bin"),
                       "--data-dir", str(case_dir.parent), "--out", str(metrics_path)])
        assert rc == 0
        records = dio.read_metrics(metrics_path)
        assert records[0]["case_id"] == "case_a"
        assert set(records[0]) == {"case_id", "dice_et", "dice_wt", "dice_tc"}

    def test_infer_pads_indivisible_dims(self, tmp_path, toy_config_file):
        train_vol, train_lab = make_tumor_case(size=16, seed=3)
        train_case = tmp_path / "train_data" / "case_t"
        dio.save_case(train_case, train_vol, train_lab)
        run = tmp_path / "run"
        rc = cli.main(["train", "--config", toy_config_file, "--arch", "toy",
                       "--data-dir", str(train_case.parent), "--out-dir", str(run),
                       "--epochs", "1", "--no-augment", "--seed", "0"])
        assert rc == 0
        # 12^3 is not divisible by the downsampling factor; infer must pad
        vol, lab = make_tumor_case(size=12, seed=2)
        case = tmp_path / "data" / "case_b"
        dio.save_case(case, vol, lab)
        seg = tmp_path / "pred.u8"
        rc = cli.main(["infer", "--config", toy_config_file, "--arch", "toy",
                       "--checkpoint", str(run / "checkpoint.bin"),
                       "--case-dir", str(case), "--out", str(seg)])
        assert rc == 0
        assert len(seg.read_bytes()) == 12 ** 3

    def test_missing_data_dir_exits_1(self, tmp_path, toy_config_file):
        empty = tmp_path / "nothing"
        empty.mkdir()
        rc = cli.main(["train", "--config", toy_config_file, "--arch", "toy",
                       "--data-dir", str(empty), "--out-dir", str(tmp_path / "o")])
        assert rc == 1


class TestAugmentPreview:
    def test_writes_augmented_case(self, tmp_path, case_dir):
        out = tmp_path / "aug"
        rc = cli.main(["augment-preview", "--case-dir", str(case_dir),
                       "--out-dir", str(out), "--seed", "3",
                       "--crop-size", "8,8,8"])
        assert rc == 0
        vol, lab = dio.load_case(out)
        assert vol.shape == (4, 8, 8, 8)
        assert set(np.unique(lab)) <= {0, 1, 2, 4}

    def test_seeded_invocations_identical(self, tmp_path, case_dir):
        outs = []
        for name in ("a1", "a2"):
            out = tmp_path / name
            assert cli.main(["augment-preview", "--case-dir", str(case_dir),
                             "--out-dir", str(out), "--seed", "5",
                             "--crop-size", "8,8,8"]) == 0
            outs.append((out / "t1.f32").read_bytes() + (out / "seg.u8").read_bytes())
        assert outs[0] == outs[1]


class TestEntryPoint:
    def test_console_script_runs(self):
        proc = subprocess.run([sys.executable, "-m", "dmfnet.cli", "analyze",
                               "--arch", "toy", "--input-shape", "1,4,16,16,16"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "total params" in proc.stdout
