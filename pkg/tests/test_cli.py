"""Command-line behavior: determinism, exit codes, file formats."""

import csv
import hashlib
import json

import numpy as np
import pytest

from ensdistill.cli import main
from ensdistill.data import load_csv
from ensdistill.model import TeacherState, init_params, load_checkpoint, save_checkpoint


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _write_config(tmp_path, **overrides):
    cfg = {
        "data": str(tmp_path / "data.csv"),
        "input_dim": 8,
        "heads": 2,
        "codebook_size": 8,
        "embed_dim": 4,
        "repr_dim": 6,
        "encoder_hidden": [8],
        "head_hidden": [8],
        "epochs": 1,
        "batch_size": 64,
        "scheme": "Ent",
        "out_dir": str(tmp_path / "run"),
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture()
def data_csv(tmp_path):
    rc = main(["gen-data", "--seed", "3", "--classes", "4", "--dim", "8",
               "--samples", "128", "--out", str(tmp_path / "data.csv")])
    assert rc == 0
    return tmp_path / "data.csv"


class TestGenData:
    def test_deterministic_files(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            rc = main(["gen-data", "--seed", "7", "--classes", "3", "--dim", "6",
                       "--samples", "50", "--out", str(tmp_path / name)])
            assert rc == 0
        assert _digest(tmp_path / "a.csv") == _digest(tmp_path / "b.csv")

    def test_missing_required_flag_exits_2(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--seed", "1", "--dim", "4", "--samples", "10",
                  "--out", str(tmp_path / "x.csv")])
        assert exc.value.code == 2

    def test_output_loads_back(self, tmp_path, data_csv):
        ds = load_csv(data_csv)
        assert len(ds) == 128 and ds.dim == 8


class TestTrain:
    def test_repeat_runs_byte_identical(self, tmp_path, data_csv):
        cfg = _write_config(tmp_path)
        digests = []
        for run in ("r1", "r2"):
            rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / run)])
            assert rc == 0
            digests.append((_digest(tmp_path / run / "checkpoint.ensd"),
                            _digest(tmp_path / run / "curves.csv")))
        assert digests[0] == digests[1]

    def test_unknown_scheme_exits_2_listing_valid(self, tmp_path, data_csv, capsys):
        cfg = _write_config(tmp_path, scheme="Frobnicate")
        rc = main(["train", "--config", str(cfg)])
        assert rc == 2
        err = capsys.readouterr().err
        assert "UnifAll" in err and "LowVarTeacher" in err

    def test_unknown_config_key_exits_2(self, tmp_path, data_csv, capsys):
        cfg = _write_config(tmp_path, gamma_typo=0.5)
        rc = main(["train", "--config", str(cfg)])
        assert rc == 2
        assert "gamma_typo" in capsys.readouterr().err

    def test_divergence_exits_3(self, tmp_path, data_csv, capsys):
        """ProbMax with a spiked threshold trips the divergence guard."""
        cfg = _write_config(tmp_path, scheme="ProbMax", divergence_threshold=0.01)
        rc = main(["train", "--config", str(cfg)])
        assert rc == 3
        err = capsys.readouterr().err
        assert "divergence" in err and "ProbMax" in err

    def test_cli_overrides_apply(self, tmp_path, data_csv):
        cfg = _write_config(tmp_path)
        rc = main(["train", "--config", str(cfg), "--scheme", "Unif", "--heads", "3",
                   "--out", str(tmp_path / "r3")])
        assert rc == 0
        _, _, header = load_checkpoint(tmp_path / "r3" / "checkpoint.ensd")
        assert header["scheme"] == "Unif" and header["m"] == 3


class TestEval:
    def test_missing_checkpoint_exits_2(self, tmp_path, data_csv, capsys):
        rc = main(["eval", str(tmp_path / "nope.ensd"), str(data_csv)])
        assert rc == 2

    def test_untrained_model_fewshot_is_near_chance_on_unseparable_data(self, tmp_path):
        """With class_sep=0 the classes are indistinguishable, so the probe
        sits at chance within 3 binomial sigmas."""
        rc = main(["gen-data", "--seed", "5", "--classes", "4", "--dim", "8",
                   "--samples", "404", "--sep", "0.0",
                   "--out", str(tmp_path / "flat.csv")])
        assert rc == 0
        cfg = _write_config(tmp_path, data=str(tmp_path / "flat.csv"), epochs=0,
                            out_dir=str(tmp_path / "untrained"))
        assert main(["train", "--config", str(cfg)]) == 0
        out_csv = tmp_path / "metrics.csv"
        rc = main(["eval", str(tmp_path / "untrained" / "checkpoint.ensd"),
                   str(tmp_path / "flat.csv"), "--protocol", "fewshot",
                   "--shots", "1", "--out", str(out_csv)])
        assert rc == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        accs = np.array([float(r["value"]) for r in rows])
        n_test = 404 - 4
        sigma = np.sqrt(0.25 * 0.75 / n_test)
        assert abs(accs.mean() - 0.25) < 3 * sigma + accs.std()

    def test_metrics_csv_schema(self, tmp_path, data_csv):
        cfg = _write_config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == 0
        out_csv = tmp_path / "m.csv"
        rc = main(["eval", str(tmp_path / "run" / "checkpoint.ensd"), str(data_csv),
                   "--protocol", "knn", "--k", "5", "--out", str(out_csv)])
        assert rc == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["split", "metric", "value", "lambda_or_k", "seed"]
        assert len(rows) == 4  # header + three seeds


class TestAnalyze:
    def test_single_head_warns_and_writes_empty(self, tmp_path, data_csv, capsys):
        cfg = _write_config(tmp_path, heads=1, out_dir=str(tmp_path / "one"))
        assert main(["train", "--config", str(cfg)]) == 0
        out_csv = tmp_path / "div.csv"
        rc = main(["analyze", str(tmp_path / "one" / "checkpoint.ensd"), str(data_csv),
                   "--out", str(out_csv)])
        assert rc == 0
        assert "warning" in capsys.readouterr().out
        with open(out_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows == [["head_i", "head_j", "rank", "similarity"]]

    def test_identical_heads_give_unit_diagonals(self, tmp_path, data_csv):
        from ensdistill.model import ModelDims

        dims = ModelDims(input_dim=8, repr_dim=6, embed_dim=4, codebook_size=8, heads=3,
                         encoder_hidden=(8,), head_hidden=(8,))
        params = init_params(0, dims)
        for j in (1, 2):
            for name in list(params.tensors):
                if name.startswith("head.0.") or name == "code.0":
                    clone = name.replace("head.0.", f"head.{j}.").replace(
                        "code.0", f"code.{j}")
                    params.tensors[clone] = params.tensors[name].copy()
        ck = tmp_path / "same.ensd"
        save_checkpoint(params, TeacherState.from_student(params), 0, ck, scheme="Unif")
        out_csv = tmp_path / "div.csv"
        rc = main(["analyze", str(ck), str(data_csv), "--out", str(out_csv)])
        assert rc == 0
        with open(out_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * 8  # m(m-1)/2 pairs times c codes
        assert all(abs(float(r["similarity"]) - 1.0) < 1e-9 for r in rows)


class TestGradCheck:
    def test_single_scheme_selection(self, capsys):
        assert main(["grad-check", "--scheme", "Unif"]) == 0
        out = capsys.readouterr().out
        assert "Unif" in out and "Ent" not in out

    def test_impossible_tolerance_exits_1(self, capsys):
        assert main(["grad-check", "--scheme", "Unif", "--tolerance", "1e-12"]) == 1
        assert "FAIL" in capsys.readouterr().out
