import csv
import json
import logging

import numpy as np
import pytest

from deqinv import cli
from deqinv.core import read_tensor, write_tensor
from deqinv.regnet import RegNet, load_checkpoint, save_checkpoint

TOY = {
    "seed": 3,
    "threads": 2,
    "problem": {"name": "deblur-hi", "size": 16},
    "dataset": {"count": 12, "split": [0.5, 0.25, 0.25]},
    "net": {"hidden": 4, "depth": 3, "kernel": 3},
    "pretrain": {"sigmas": [0.05, 0.02, 0.01], "epochs": 1, "batch_size": 4},
    "forward": {"max_iter": 20},
    "backward": {"max_iter": 10},
    "train": {"lr": 1e-3, "epochs": 2, "batch_size": 3, "K": 3, "steps": [0.5, 1.0]},
    "bench": {"iterations": [1, 2], "images": 2, "noise": [0.01, 0.02]},
}


def _config(tmp_path, out, **over):
    cfg = json.loads(json.dumps(TOY))
    cfg["out"] = str(out)
    for k, v in over.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A pretrained family plus trained de-prox and du-prox checkpoints."""
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "out"
    cfg = _config(tmp, out)
    assert cli.main(["pretrain", "--config", cfg]) == 0
    assert cli.main(["train", "--config", cfg, "--method", "de-prox"]) == 0
    assert cli.main(["train", "--config", cfg, "--method", "du-prox", "--K", "3"]) == 0
    return tmp, out, cfg


class TestConfig:
    def test_defaults(self):
        cfg = cli.load_config(None)
        assert cfg["forward"]["tol"] == 1e-3 and cfg["backward"]["max_iter"] == 50

    def test_unknown_key_line(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{\n  "seed": 1,\n  "net": {\n    "width": 3\n  }\n}\n')
        assert cli.main(["pretrain", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert f"{path}:4: unknown key 'net.width'" in err

    def test_invalid_json(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{"seed": 1,,}')
        assert cli.main(["pretrain", "--config", str(path)]) == 2
        assert f"{path}:1:" in capsys.readouterr().err

    def test_bad_value(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{"forward": {"tol": -1}}')
        assert cli.main(["pretrain", "--config", str(path)]) == 2
        assert "forward.tol" in capsys.readouterr().err

    def test_flags_override_file(self, tmp_path):
        path = _config(tmp_path, tmp_path / "o")
        args = cli.build_parser().parse_args(["train", "--config", path, "--method", "de-prox",
                                              "--epochs", "7", "--seed", "9", "--max-iter", "4"])
        cfg = cli.apply_flags(cli.load_config(path), args)
        assert cfg["train"]["epochs"] == 7 and cfg["seed"] == 9 and cfg["forward"]["max_iter"] == 4
        assert cfg["net"]["hidden"] == 4 and cfg["net"]["slope"] == 0.1

    def test_unknown_suite_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bench", "--suite", "everything"])
        assert exc.value.code == 2


class TestPretrain:
    def test_family_written(self, workdir):
        _, out, _ = workdir
        manifest = json.loads((out / "pretrained" / "manifest.json").read_text())
        files = sorted(p.name for p in (out / "pretrained").glob("*.dqw"))
        assert len(files) == 3 == len(manifest["checkpoints"])
        assert sorted(e["file"] for e in manifest["checkpoints"]) == files

    def test_zero_epochs_and_rerun(self, tmp_path):
        cfg = _config(tmp_path, tmp_path / "o")
        assert cli.main(["pretrain", "--config", cfg, "--epochs", "0"]) == 0
        path = tmp_path / "o" / "pretrained" / "sigma_0.01.dqw"
        first = path.read_bytes()
        setup = cli.Setup(cli.load_config(cfg))
        init = setup.new_net("identity")
        assert np.allclose(load_checkpoint(path).get_params(), init.get_params(), atol=1e-7)
        assert cli.main(["pretrain", "--config", cfg, "--epochs", "0"]) == 0
        assert path.read_bytes() == first


class TestTrain:
    def test_outputs(self, workdir):
        _, out, _ = workdir
        params = json.loads((out / "de-prox" / "params.json").read_text())
        assert params["kind"] == "de-prox" and params["K"] is None
        assert params["step"] in (0.5, 1.0) and params["pretrained_sigma"] in (0.05, 0.02, 0.01)
        rows = list(csv.DictReader(open(out / "de-prox" / "train_log.csv")))
        assert len(rows) == TOY["train"]["epochs"]

    def test_unrolled_dispatch(self, workdir):
        _, out, _ = workdir
        params = json.loads((out / "du-prox" / "params.json").read_text())
        assert params["K"] == 3 and params["kind"] == "de-prox"

    def test_idempotent(self, workdir, tmp_path):
        _, out, cfg = workdir
        other = tmp_path / "again"
        (other / "pretrained").mkdir(parents=True)
        for p in (out / "pretrained").iterdir():
            (other / "pretrained" / p.name).write_bytes(p.read_bytes())
        assert cli.main(["train", "--config", cfg, "--method", "de-prox", "--out", str(other)]) == 0
        assert (other / "de-prox" / "net.dqw").read_bytes() == (out / "de-prox" / "net.dqw").read_bytes()
        assert (other / "de-prox" / "params.json").read_text() == \
            (out / "de-prox" / "params.json").read_text()

    def test_missing_pretraining(self, tmp_path):
        cfg = _config(tmp_path, tmp_path / "empty")
        assert cli.main(["train", "--config", cfg, "--method", "de-prox"]) == 1

    def test_admm_nullspace_warns(self, tmp_path, caplog):
        cfg = _config(tmp_path, tmp_path / "cs", problem={"name": "cs4x", "size": 16},
                      train={"epochs": 1})
        with caplog.at_level(logging.WARNING):
            assert cli.main(["train", "--config", cfg, "--method", "de-admm", "--init", "random"]) == 0
        assert any("certificate not satisfied" in r.message for r in caplog.records)
        params = json.loads((tmp_path / "cs" / "de-admm" / "params.json").read_text())
        assert params["certificate"]["satisfied"] is False


class TestReconstruct:
    def _measurement(self, workdir, name="y.dqt"):
        tmp, out, cfg = workdir
        setup = cli.Setup(cli.load_config(cfg))
        test = setup.pairs("test")
        write_tensor(tmp / name, test.y[0])
        write_tensor(tmp / "truth.dqt", test.x[0])
        return tmp / name, tmp / "truth.dqt"

    def test_repeatable_with_metrics(self, workdir):
        tmp, out, cfg = workdir
        y, truth = self._measurement(workdir)
        outs = []
        for name in ("a", "b"):
            path = tmp / f"{name}.dqt"
            assert cli.main(["reconstruct", "--config", cfg, "--input", str(y), "--truth", str(truth),
                             "--output", str(path)]) == 0
            outs.append(path)
        assert np.array_equal(read_tensor(outs[0]), read_tensor(outs[1]))
        metrics = json.loads(outs[0].with_suffix(".json").read_text())
        assert {"psnr", "ssim", "input_psnr", "iterations"} <= set(metrics)
        assert metrics["psnr"] > metrics["input_psnr"]
        rows = list(csv.reader(open(tmp / "a_residuals.csv")))
        assert len(rows) == metrics["iterations"] + 1

    def test_max_iter_one(self, workdir):
        tmp, out, cfg = workdir
        y, _ = self._measurement(workdir)
        path = tmp / "one.dqt"
        assert cli.main(["reconstruct", "--config", cfg, "--input", str(y), "--output", str(path),
                         "--max-iter", "1"]) == 0
        assert json.loads(path.with_suffix(".json").read_text())["iterations"] == 1

    def test_shape_mismatch(self, workdir):
        tmp, _, cfg = workdir
        write_tensor(tmp / "bad.dqt", np.zeros((1, 20, 20)))
        assert cli.main(["reconstruct", "--config", cfg, "--input", str(tmp / "bad.dqt")]) == 1

    def test_unrolled_runs_its_depth(self, workdir):
        tmp, out, cfg = workdir
        y, _ = self._measurement(workdir)
        path = tmp / "du.dqt"
        assert cli.main(["reconstruct", "--config", cfg, "--method", "du-prox", "--input", str(y),
                         "--output", str(path)]) == 0
        assert json.loads(path.with_suffix(".json").read_text())["iterations"] == 3


class TestCertify:
    def _zero_net(self, tmp_path, channels=1, size=16):
        net = RegNet.create(channels, 4, 3, image_shape=(size, size), seed=0)
        net.set_params(np.zeros_like(net.get_params()))
        path = tmp_path / "zero" / "net.dqw"
        path.parent.mkdir()
        save_checkpoint(net, path)
        return path

    def test_zero_net_theorem1(self, tmp_path):
        cfg = _config(tmp_path, tmp_path / "o")
        path = self._zero_net(tmp_path)
        assert cli.main(["certify", "--config", cfg, "--checkpoint", str(path), "--method", "de-grad",
                         "--step", "0.3"]) == 0
        doc = json.loads((tmp_path / "o" / "certificate.json").read_text())
        assert doc["theorem"] == 1 and doc["satisfied"] and doc["epsilon"] == 0.0
        assert doc["gamma"] == pytest.approx(1 - 0.3 * (1 + doc["mu"]), abs=1e-12)
        assert doc["empirical_rate"] <= doc["gamma"] + 0.05

    def test_mri_theorem2_unsatisfiable(self, tmp_path):
        cfg = _config(tmp_path, tmp_path / "o", problem={"name": "mri4x", "size": 16})
        path = self._zero_net(tmp_path, channels=2)
        assert cli.main(["certify", "--config", cfg, "--checkpoint", str(path), "--method", "de-prox",
                         "--step", "1.0", "--theorem", "2"]) == 0
        doc = json.loads((tmp_path / "o" / "certificate.json").read_text())
        assert not doc["satisfied"] and "λ_min = 0" in doc["reason"]


class TestBench:
    def test_iterations_rows(self, workdir, tmp_path):
        tmp, out, _ = workdir
        cfg = _config(tmp_path, out, bench={"methods": ["de-prox", "du-prox"]})
        assert cli.main(["bench", "--config", cfg, "--suite", "iterations"]) == 0
        rows = list(csv.DictReader(open(out / "bench" / "iterations.csv")))
        assert len(rows) == 2 * 2 * 2
        manifest = json.loads((out / "bench" / "iterations_manifest.json").read_text())
        assert manifest["records"] == 8 and set(manifest["checkpoints"]) == {"de-prox", "du-prox"}

    def test_engines_rows(self, workdir, tmp_path):
        tmp, out, _ = workdir
        cfg = _config(tmp_path, out, bench={"images": 1})
        assert cli.main(["bench", "--config", cfg, "--suite", "engines"]) == 0
        rows = list(csv.DictReader(open(out / "bench" / "engines.csv")))
        assert sorted(r["value"] for r in rows) == ["anderson", "broyden", "picard"]

    def test_missing_listed_exhaustively(self, tmp_path, caplog):
        cfg = _config(tmp_path, tmp_path / "none", bench={"methods": ["de-grad", "du-admm"]})
        with caplog.at_level(logging.ERROR):
            assert cli.main(["bench", "--config", cfg, "--suite", "iterations"]) == 1
        text = "\n".join(r.message for r in caplog.records)
        assert "de-grad" in text and "du-admm" in text
