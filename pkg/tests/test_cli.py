import json

import numpy as np
import pytest

from dfn.cli import COMMANDS, build_parser, main
from dfn.cli import sha256_file
from dfn.data.io import read_dataset

SMALL = ["--classes", "3", "--stage-channels", "4,4,6,6,8", "--unified-channels", "8"]
TRAIN_SMALL = SMALL + ["--batch-size", "2", "--log-every", "1", "--train-scales", "1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.dfnd"
    assert main(["gen-data", "--out", str(path), "--count", "4", "--size", "32", "--classes", "3", "--seed", "5"]) == 0
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--max-iter", "2", *TRAIN_SMALL]) == 0
    return out


@pytest.mark.parametrize("command", [None, *COMMANDS])
def test_help_exits_zero_and_shows_defaults(command, capsys):
    argv = ["--help"] if command is None else [command, "--help"]
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0
    text = capsys.readouterr().out
    if command in ("train", "ablate"):
        assert "default: 0.9" in text and "--no-border" in text


def test_every_flag_has_help():
    parser = build_parser()
    for sp in parser._subparsers._group_actions[0].choices.values():
        assert all(a.help for a in sp._actions)


class TestGenData:
    def test_count_zero(self, tmp_path):
        out = tmp_path / "empty.dfnd"
        assert main(["gen-data", "--out", str(out), "--count", "0"]) == 0
        spec, samples = read_dataset(out)
        assert samples == [] and spec.count == 0

    def test_repeat_identical(self, tmp_path):
        a, b = tmp_path / "a.dfnd", tmp_path / "b.dfnd"
        for p in (a, b):
            main(["gen-data", "--out", str(p), "--count", "3", "--size", "32", "--seed", "9"])
        assert a.read_bytes() == b.read_bytes()

    @pytest.mark.parametrize("flags,name", [
        (["--size", "50"], "--size"),
        (["--count", "-1"], "--count"),
        (["--classes", "2"], "--classes"),
        (["--scenario-mix", "1,1"], "--scenario-mix"),
    ])
    def test_invalid_flag_exit_two(self, tmp_path, capsys, flags, name):
        assert main(["gen-data", "--out", str(tmp_path / "x.dfnd"), *flags]) == 2
        assert name in capsys.readouterr().err

    def test_manifest_written(self, tmp_path):
        out = tmp_path / "m.dfnd"
        main(["gen-data", "--out", str(out), "--count", "1", "--size", "32"])
        m = json.loads((tmp_path / "m.dfnd.manifest.json").read_text())
        assert m["command"] == "gen-data" and m["args"]["count"] == 1 and m["args"]["size"] == [32, 32]


class TestTrain:
    def test_manifest_records_lambda_verbatim(self, trained, dataset):
        m = json.loads((trained / "manifest.json").read_text())
        assert m["args"]["lam"] == 0.1
        assert m["args"]["momentum"] == 0.9 and m["args"]["weight_decay"] == 1e-4 and m["args"]["base_lr"] == 4e-3
        assert m["inputs"] == {str(dataset): sha256_file(dataset)}
        assert (trained / "final.dfnc").exists() and (trained / "train_log.csv").exists()

    def test_repeat_bitwise(self, dataset, trained, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--max-iter", "2", *TRAIN_SMALL]) == 0
        for name in ("final.dfnc", "train_log.csv"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    def test_max_iter_zero(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--max-iter", "0", *TRAIN_SMALL]) == 0
        assert (tmp_path / "final.dfnc").exists()

    def test_missing_dataset(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope.dfnd"), "--out", str(tmp_path)]) == 2
        assert "--data" in capsys.readouterr().err

    def test_class_mismatch(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--classes", "4"]) == 2

    def test_nan_abort_exit_three(self, dataset, tmp_path, capsys):
        with pytest.warns(RuntimeWarning):
            code = main(["train", "--data", str(dataset), "--out", str(tmp_path), "--max-iter", "3", "--base-lr", "1e30", *TRAIN_SMALL])
        assert code == 3
        assert "iteration" in capsys.readouterr().err

    def test_rerun_reproduces(self, trained, tmp_path):
        m = json.loads((trained / "manifest.json").read_text())
        m["args"]["out"] = str(tmp_path / "again")
        m["args"]["manifest"] = str(tmp_path / "again.json")
        (tmp_path / "m.json").write_text(json.dumps(m))
        assert main(["rerun", "--manifest", str(tmp_path / "m.json")]) == 0
        assert (tmp_path / "again" / "final.dfnc").read_bytes() == (trained / "final.dfnc").read_bytes()

    def test_rerun_bad_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text("{}")
        assert main(["rerun", "--manifest", str(tmp_path / "m.json")]) == 2


class TestEval:
    def _eval(self, trained, dataset, out, *extra):
        return main(["eval", "--checkpoint", str(trained / "final.dfnc"), "--data", str(dataset), "--out", str(out), *extra])

    def test_metrics_csv(self, trained, dataset, tmp_path):
        assert self._eval(trained, dataset, tmp_path / "m.csv", "--export-viz", str(tmp_path / "viz")) == 0
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "metric,value"
        values = dict(line.split(",") for line in lines[1:])
        assert 0 <= float(values["miou"]) <= 1 and "boundary_f1" in values
        assert len(list((tmp_path / "viz").glob("pred_*.pgm"))) == 4
        assert (tmp_path / "m.manifest.json").exists()

    def test_repeat_identical(self, trained, dataset, tmp_path):
        self._eval(trained, dataset, tmp_path / "a.csv")
        self._eval(trained, dataset, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_ms_flip_single_scale_equals_plain(self, trained, dataset, tmp_path):
        self._eval(trained, dataset, tmp_path / "a.csv")
        self._eval(trained, dataset, tmp_path / "b.csv", "--ms-flip", "--scales", "1", "--no-eval-flip")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_ms_flip_runs(self, trained, dataset, tmp_path):
        assert self._eval(trained, dataset, tmp_path / "a.csv", "--ms-flip") == 0

    def test_size_mismatch(self, trained, tmp_path, capsys):
        other = tmp_path / "o.dfnd"
        main(["gen-data", "--out", str(other), "--count", "1", "--size", "64", "--classes", "3"])
        assert self._eval(trained, other, tmp_path / "a.csv") == 2
        err = capsys.readouterr().err
        assert "32x32" in err and "64x64" in err

    def test_class_mismatch(self, trained, tmp_path, capsys):
        other = tmp_path / "o.dfnd"
        main(["gen-data", "--out", str(other), "--count", "1", "--size", "32", "--classes", "5"])
        assert self._eval(trained, other, tmp_path / "a.csv") == 2
        err = capsys.readouterr().err
        assert "3" in err and "5" in err

    def test_bad_threshold(self, trained, dataset, tmp_path, capsys):
        assert self._eval(trained, dataset, tmp_path / "a.csv", "--threshold", "1.5") == 2
        assert "--threshold" in capsys.readouterr().err


class TestSweeps:
    def test_lambda_sweep_csv_and_repeat(self, dataset, tmp_path):
        argv = ["lambda-sweep", "--train-data", str(dataset), "--val-data", str(dataset), "--seeds", "0",
                "--lambdas", "0.1,0.5", "--max-iter", "1", *TRAIN_SMALL]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        lines = (tmp_path / "a" / "lambda.csv").read_text().splitlines()
        assert len(lines) == 3
        assert all(0 <= float(line.split(",")[1]) <= 1 for line in lines[1:])
        assert (tmp_path / "a" / "lambda.csv").read_bytes() == (tmp_path / "b" / "lambda.csv").read_bytes()

    def test_negative_lambda(self, dataset, tmp_path):
        argv = ["lambda-sweep", "--train-data", str(dataset), "--val-data", str(dataset), "--out", str(tmp_path),
                "--lambdas", "-1", *SMALL]
        assert main(argv) == 2

    def test_ablate_single_row_manifest(self, dataset, tmp_path):
        argv = ["ablate", "--train-data", str(dataset), "--val-data", str(dataset), "--out", str(tmp_path),
                "--seeds", "0", "--preset", "table3", "--max-iter", "1", *TRAIN_SMALL]
        assert main(argv) == 0
        assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 3
        assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "ablate"


class TestGradCheck:
    def test_only_cab(self, tmp_path, capsys):
        assert main(["grad-check", "--only", "cab", "--manifest", str(tmp_path / "g.json")]) == 0
        out = capsys.readouterr().out
        assert "cab" in out and "rrb" not in out
        assert json.loads((tmp_path / "g.json").read_text())["args"]["eps"] == 1e-5

    def test_unknown_check(self):
        assert main(["grad-check", "--only", "nope"]) == 2

    def test_failure_exit_one(self):
        # a huge step breaks the central difference on curved ops
        assert main(["grad-check", "--only", "softmax", "--eps", "0.5"]) == 1
