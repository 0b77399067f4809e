import json

import numpy as np
import pytest
import yaml

from sepvae import cli
from sepvae.config import apply_override, default_config_dict, load_config
from sepvae.data import ContrastiveDataset, DatasetManifest
from sepvae.errors import ConfigError, NonFiniteLossError

SMALL = [
    "data.n_background=100",
    "data.n_target=100",
    "data.image_size=[16, 16]",
    "model.image_shape=[1, 16, 16]",
    "batch_size=32",
    "epochs=1",
]


def overrides(*extra):
    out = []
    for o in SMALL + list(extra):
        out += ["--override", o]
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(out), *overrides()]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "full"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), *overrides()]) == 0
    return out


class TestGenData:
    def test_outputs(self, data_dir):
        ds = ContrastiveDataset.load_npz(data_dir / cli.DATA_FILE)
        manifest = DatasetManifest.read(data_dir / cli.MANIFEST_FILE)
        assert len(ds) == 200 and len(manifest.rows) == 200
        assert np.bincount(ds.subtypes[ds.y == 1]).tolist() == [50, 50]
        snap = yaml.safe_load((data_dir / cli.CONFIG_SNAPSHOT).read_text())
        assert snap["data"]["n_target"] == 100

    def test_byte_identical_rerun(self, data_dir, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path), *overrides()]) == 0
        for name in (cli.MANIFEST_FILE, cli.CONFIG_SNAPSHOT):
            assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()
        a = ContrastiveDataset.load_npz(tmp_path / cli.DATA_FILE)
        b = ContrastiveDataset.load_npz(data_dir / cli.DATA_FILE)
        assert np.array_equal(a.images, b.images)

    def test_folder_export(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--folder", *overrides()]) == 0
        assert len(list((tmp_path / "folder" / "images").glob("*.png"))) == 200


class TestTrain:
    def test_run_directory(self, run_dir):
        names = {p.name for p in run_dir.iterdir()}
        assert {"last.pt", "ckpt_epoch0000.pt", "train_log.csv", "config.yaml", "run.json", "final_metrics.json"} <= names
        meta = json.loads((run_dir / "run.json").read_text())
        assert "model.image_shape=[1, 16, 16]" in meta["overrides"]

    def test_zero_epochs(self, data_dir, tmp_path):
        assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "0", *overrides()]) == 0
        assert sorted(p.name for p in tmp_path.glob("ckpt_*.pt")) == ["ckpt_epoch0000.pt"]

    def test_ablations_in_snapshot(self, data_dir, tmp_path):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--ablate", "mi,clsf", *overrides()]
        assert cli.main(args) == 0
        weights = yaml.safe_load((tmp_path / "config.yaml").read_text())["train"]["weights"]
        assert weights["ablate_mi"] and weights["ablate_clsf"] and not weights["ablate_sal"]

    def test_config_error(self, data_dir, tmp_path, capsys):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path), *overrides("weights.beta_c=-1")]
        assert cli.main(args) == 2
        assert "beta_c" in capsys.readouterr().err

    def test_unknown_ablation(self, data_dir, tmp_path):
        assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--ablate", "kl", *overrides()]) == 2

    def test_missing_data(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path), *overrides()]) == 4

    def test_non_finite_exit_code(self, data_dir, tmp_path, monkeypatch):
        import sepvae.train

        def boom(*args, **kwargs):
            raise NonFiniteLossError("reconstruction", 1, 3, float("nan"))

        monkeypatch.setattr(sepvae.train, "fit", boom)
        assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path), *overrides()]) == 3


class TestEval:
    def test_deterministic_metrics(self, run_dir):
        assert cli.main(["eval", "--run", str(run_dir)]) == 0
        first = (run_dir / "eval" / "metrics.json").read_bytes()
        assert cli.main(["eval", "--run", str(run_dir)]) == 0
        assert (run_dir / "eval" / "metrics.json").read_bytes() == first
        metrics = json.loads(first)
        assert metrics["run_id"] == "full" and metrics["method"] == "sepvae"
        assert (run_dir / "eval" / "gallery.png").exists()

    def test_missing_checkpoint(self, run_dir):
        assert cli.main(["eval", "--run", str(run_dir), "--checkpoint", "ckpt_epoch0099.pt"]) == 4

    def test_report(self, run_dir, tmp_path):
        cli.main(["eval", "--run", str(run_dir)])
        out = tmp_path / "report.md"
        assert cli.main(["report", "--runs", str(run_dir), "--out", str(out)]) == 0
        assert "| full |" in out.read_text()
        assert cli.main(["report", "--runs", str(tmp_path / "ghost"), "--out", str(out)]) == 4


class TestAblate:
    def test_one_cell_one_seed(self, data_dir, tmp_path):
        args = ["ablate", "--data", str(data_dir), "--out", str(tmp_path), "--cells", "no MI", "--seeds", "1", *overrides()]
        assert cli.main(args) == 0
        rows = [line for line in (tmp_path / "ablation.md").read_text().splitlines() if line.startswith("| no MI")]
        assert len(rows) == 1

    def test_unknown_cell(self, data_dir, tmp_path):
        args = ["ablate", "--data", str(data_dir), "--out", str(tmp_path), "--cells", "no KL", *overrides()]
        assert cli.main(args) == 2


class TestOverrides:
    def test_train_section_implied(self):
        d = apply_override(default_config_dict(), "weights.gamma=2.5")
        assert d["train"]["weights"]["gamma"] == 2.5

    def test_yaml_values(self):
        cfg = load_config(overrides=["split.fractions=[0.5, 0.25, 0.25]", "data.bit_depth=null"])
        assert cfg.split.fractions == (0.5, 0.25, 0.25) and cfg.data.bit_depth is None

    def test_malformed(self):
        with pytest.raises(ConfigError):
            apply_override({}, "gamma")

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            load_config(overrides=["weights.gama=1"])
        assert any("gama" in f for f in info.value.fields)

    def test_default_config_hash_stable(self):
        assert load_config().hash() == load_config().hash()
        assert load_config().hash() != load_config(overrides=["seed=1"]).hash()
