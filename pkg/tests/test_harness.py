import csv
import json
import math

import numpy as np
import pytest

from fidgp import checkpoint, config, counting, experiments
from fidgp.cli import main
from fidgp.data import CENTERS, gap_region, gen_regression1d, gen_toy_ood, in_clusters, true_function
from fidgp.errors import CheckpointError, ConfigError, EmptyInput, InvalidProbability
from fidgp.metrics import accuracy, ece, nll, rmse
from fidgp.model import predict

TINY = """
seed = 3
task = "regression1d"
[model]
hidden = [6, 6]
inducing = [3, 3]
[flow]
depth = 2
hidden = 4
[train]
epochs = 3
batch_size = 50
[data]
n_per_cluster = 20
n_grid = 25
"""


def _tiny_cfg(**over):
    return config.apply_overrides(config.loads(TINY), over).validate()


class TestData:
    def test_regression_support(self):
        tr, te = gen_regression1d(100, 42)
        assert np.all(in_clusters(tr.x))
        assert te.x.min() == 0.0 and te.x.max() == pytest.approx(2.2)
        np.testing.assert_array_equal(te.y, true_function(te.x))

    def test_regression_noise_is_centred(self):
        tr, _ = gen_regression1d(50_000, 0)
        r = tr.y - np.cos(4 * tr.x + 0.8)
        assert abs(r.mean()) <= 3 * 0.1 / math.sqrt(r.size)

    def test_regression_seeded(self):
        a, _ = gen_regression1d(10, 5)
        b, _ = gen_regression1d(10, 5)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    def test_regions_disjoint(self):
        x = np.linspace(0, 2.2, 1000)
        assert not np.any(in_clusters(x) & gap_region(x))

    def test_toy_ood_geometry(self):
        tr, te, ood = gen_toy_ood(42)
        for s in (tr, te):
            d = np.linalg.norm(s.x - CENTERS[s.y], axis=1)
            assert np.mean(d <= 4.0) >= 0.99
            assert np.sum(s.y == 0) == np.sum(s.y == 1)
        r = np.linalg.norm(ood.x, axis=1)
        assert np.all((r >= 5.8) & (r <= 6.2))
        assert np.all(ood.y == -1)


class TestMetrics:
    def test_perfect_onehot(self):
        p = np.eye(3)[[0, 2, 1]]
        assert nll(p, [0, 2, 1]) == 0.0
        assert ece(p, [0, 2, 1]) == 0.0

    def test_uniform_two_class(self):
        p = np.full((4, 2), 0.5)
        assert nll(p, [0, 1, 0, 1]) == pytest.approx(math.log(2))
        assert ece(p, [0, 1, 0, 1]) == 0.0

    def test_gaussian_at_mean(self):
        assert nll(np.zeros(1), np.zeros(1), std=np.ones(1)) == pytest.approx(0.9189385, abs=1e-7)

    def test_ece_by_hand(self):
        # two bins: conf 0.9 (both right) and conf 0.6 (one of two right)
        p = np.array([[0.9, 0.1], [0.1, 0.9], [0.6, 0.4], [0.6, 0.4]])
        assert ece(p, [0, 1, 0, 1]) == pytest.approx(0.5 * 0.1 + 0.5 * 0.1)

    def test_invalid_probabilities(self):
        with pytest.raises(InvalidProbability):
            nll(np.array([[0.7, 0.7]]), [0])
        with pytest.raises(InvalidProbability):
            ece(np.array([[-0.1, 1.1]]), [0])

    def test_rmse_and_accuracy(self):
        assert rmse([1.0, 3.0], [1.0, 1.0]) == pytest.approx(math.sqrt(2))
        assert accuracy(np.array([[0.2, 0.8], [0.9, 0.1]]), [1, 1]) == 0.5
        with pytest.raises(EmptyInput):
            rmse([], [])


class TestCounting:
    def test_single_layer(self):
        base, extra = counting.layer_storage(512, 512, 128, 128)
        assert base == 131_200 and extra == 0
        assert counting.layer_storage(512, 512, 128, 128, "matheron", 2)[1] == 2 * 128 * 128

    @pytest.mark.parametrize("m, ref", [(32, 1.35e6), (64, 2.66e6), (128, 5.51e6), (256, 12.1e6)])
    def test_resnet18_totals(self, m, ref):
        rep = counting.compressed_param_count(counting.resnet18_manifest(), m, m)
        assert abs(rep.total - ref) / ref <= 0.05

    def test_compression_at_32(self):
        rep = counting.compressed_param_count(counting.resnet18_manifest(), 32, 32)
        assert rep.compression(counting.DENSE_RESNET18_CIFAR100) == pytest.approx(0.879, abs=0.01)

    def test_flow_reported_separately(self):
        a = counting.compressed_param_count(counting.resnet18_manifest(), 32, 32)
        b = counting.compressed_param_count(counting.resnet18_manifest(), 32, 32, include_flow=True)
        assert a.total == b.total and b.flow > 0

    def test_empty_manifest(self):
        with pytest.raises(EmptyInput):
            counting.compressed_param_count([], 8, 8)


class TestConfig:
    def test_roundtrip_through_toml(self):
        cfg = _tiny_cfg()
        assert config.loads(config.dumps(cfg)).to_dict() == cfg.to_dict()

    def test_unknown_key_is_an_error(self):
        with pytest.raises(ConfigError):
            config.loads("[model]\nhiden = [3]\n")

    def test_type_checked(self):
        with pytest.raises(ConfigError):
            config.loads("[train]\nepochs = 'many'\n")

    def test_presets(self):
        a, b = config.preset("A"), config.preset("B")
        assert (a.model.inducing, a.model.lambda_max, a.model.prior_sd) == ([64, 64], 0.08, 0.5)
        assert (b.model.inducing, b.model.lambda_max, b.model.prior_sd) == ([32, 32], 0.05, 0.3)
        with pytest.raises(ConfigError):
            config.preset("Z")

    def test_seed_from_environment(self):
        cfg = config.seed_override(_tiny_cfg(), {"FIDGP_SEED": "11"})
        assert cfg.seed == 11
        with pytest.raises(ConfigError):
            config.seed_override(_tiny_cfg(), {"FIDGP_SEED": "x"})

    def test_validation(self):
        with pytest.raises(ConfigError):
            _tiny_cfg(**{"model.lambda_init": 0.5})


class TestCheckpoint:
    def test_roundtrip_predictions_bitwise(self, tmp_path):
        cfg = _tiny_cfg()
        res = experiments.fit(cfg)
        path = tmp_path / "c.json"
        checkpoint.save(path, res.model, cfg)
        net, cfg2 = checkpoint.load(path)
        x = np.linspace(0, 2.2, 17)[:, None]
        a = predict(res.model, x, 4, np.random.default_rng(1))
        b = predict(net, x, 4, np.random.default_rng(1))
        np.testing.assert_array_equal(a.samples, b.samples)
        assert cfg2.to_dict() == cfg.to_dict()

    def test_schema_version_checked(self, tmp_path):
        cfg = _tiny_cfg(**{"train.epochs": 0})
        doc = checkpoint.to_document(experiments.fit(cfg).model, cfg)
        doc["schema_version"] = 999
        with pytest.raises(CheckpointError):
            checkpoint.from_document(doc)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint.load(tmp_path / "nope.json")


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestCli:
    def test_missing_config_exits_1(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "missing.file"), "--out", str(tmp_path)]) == 1
        assert "missing.file" in capsys.readouterr().err

    def test_usage_error_names_flag(self, capsys):
        assert main(["count-params", "--m", "abc"]) == 1
        assert "--m" in capsys.readouterr().err
        assert main([]) == 1

    def test_bad_set_override(self, tmp_path):
        cfg = _write(tmp_path, TINY)
        assert main(["train", "--config", cfg, "--set", "model.nope=1", "--out", str(tmp_path / "o")]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_failure_exits_2(self, tmp_path):
        cfg = _write(tmp_path, TINY)
        code = main(["train", "--config", cfg, "--set", "train.lr=1e300", "--set", "train.optimizer=\"sgd\"",
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_count_params(self, capsys):
        assert main(["count-params", "--manifest", "resnet18", "--m", "128", "--json"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert abs(out["total"] - 5.51e6) / 5.51e6 <= 0.05
        assert out["dense_reference"] == counting.DENSE_RESNET18_CIFAR100
        assert out["compression"] == pytest.approx(0.508, abs=0.03)

    def test_generate_data(self, tmp_path):
        assert main(["generate-data", "--task", "toy_classification", "--out", str(tmp_path), "--seed", "1"]) == 0
        rows = _read_csv(tmp_path / "ood.csv")
        assert len(rows) == 500 and set(rows[0]) == {"x0", "x1", "label"}

    def test_train_is_deterministic(self, tmp_path):
        cfg = _write(tmp_path, TINY)
        for d in ("a", "b"):
            assert main(["train", "--config", cfg, "--out", str(tmp_path / d)]) == 0
        a = (tmp_path / "a" / "trace.csv").read_bytes()
        assert a == (tmp_path / "b" / "trace.csv").read_bytes()
        assert len(_read_csv(tmp_path / "a" / "trace.csv")) == 3

    def test_checkpoint_echoes_config(self, tmp_path):
        cfg_path = _write(tmp_path, TINY)
        assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "o")]) == 0
        doc = json.loads((tmp_path / "o" / "checkpoint.json").read_text())
        assert doc["config"] == config.load(cfg_path).to_dict()
        assert config.load(tmp_path / "o" / "config.toml").to_dict() == doc["config"]

    def test_predict_zero_init_mean_mode(self, tmp_path):
        cfg = _write(tmp_path, TINY + "\n")
        out = tmp_path / "o"
        assert main(["train", "--config", cfg, "--set", "train.epochs=0", "--set", "model.zero_init=true",
                     "--out", str(out)]) == 0
        pred = out / "pred.csv"
        assert main(["predict", "--checkpoint", str(out / "checkpoint.json"), "--out", str(pred),
                     "--mode", "mean"]) == 0
        rows = _read_csv(pred)
        assert len(rows) == 25
        assert len({r["std"] for r in rows}) == 1
        assert len({r["mean"] for r in rows}) == 1

    def test_predict_from_inputs(self, tmp_path):
        cfg = _write(tmp_path, TINY)
        out = tmp_path / "o"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        inputs = tmp_path / "x.csv"
        inputs.write_text("x\n0.1\n0.7\n")
        pred = out / "p.csv"
        assert main(["predict", "--checkpoint", str(out / "checkpoint.json"), "--inputs", str(inputs),
                     "--out", str(pred), "--samples", "3"]) == 0
        assert [float(r["x"]) for r in _read_csv(pred)] == [0.1, 0.7]

    def test_ood_score(self, tmp_path):
        text = TINY.replace('task = "regression1d"', 'task = "toy_classification"').replace(
            "n_per_cluster = 20\nn_grid = 25", "n_train = 60\nn_test = 40\nn_ood = 40")
        cfg = _write(tmp_path, text)
        out = tmp_path / "o"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        rep = out / "r.json"
        assert main(["ood-score", "--checkpoint", str(out / "checkpoint.json"), "--out", str(out / "s.csv"),
                     "--report", str(rep), "--key-layers", "1", "2", "--n-probe", "64"]) == 0
        doc = json.loads(rep.read_text())
        assert 0.0 <= doc["auroc"] <= 1.0
        assert len(doc["margins"]) == 2 and "separation_holds" in doc["margins"][0]
        assert len(_read_csv(out / "s.csv")) == 80

    def test_wrong_checkpoint_kind(self, tmp_path):
        cfg = _write(tmp_path, TINY)
        out = tmp_path / "o"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert main(["ood-score", "--checkpoint", str(out / "checkpoint.json")]) == 1

    def test_selfcheck(self, capsys):
        assert main(["selfcheck"]) == 0
        assert "FAIL" not in capsys.readouterr().out
