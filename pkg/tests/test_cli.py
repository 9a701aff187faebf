"""CLI tests: config loading, artifact layout, ablation matrices, compare."""

import json

import numpy as np
import pytest

from fedstyle import cli, formats

TINY_TOML = """\
schema = 1
seeds = [0]

[world]
num_domains = 2
clients_per_domain = 2
images_per_client = [2, 3]
image_size = [12, 12]
source_size = 6
test_per_domain = 2

[federation]
rounds = 2
clients_per_round = 3
hidden = 4
pretrain_steps = 20
pretrain_lr = 0.05
pretrain_decay_steps = 0
swat_start = 1
cluster_h_max = 4
cluster_restarts = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


class TestLoadConfig:
    def test_defaults_without_file(self):
        cfg = cli.load_config(None)
        assert cfg["schema"] == cli.SCHEMA_VERSION
        assert cfg["federation"]["rounds"] == 40
        assert cfg["toggles"]["cluster_groups"] == ["norm"]

    def test_toml_overrides_merge(self, tiny_config):
        cfg = cli.load_config(tiny_config)
        assert cfg["federation"]["rounds"] == 2
        assert cfg["federation"]["lr"] == 0.0125  # default survives the merge
        assert cfg["world"]["num_domains"] == 2

    def test_summary_json_round_trips_as_config(self, tiny_config, tmp_path):
        cfg = cli.load_config(tiny_config)
        cli.run_experiment(cfg, tmp_path / "run")
        from_echo = cli.load_config(tmp_path / "run" / "summary.json")
        assert from_echo == cfg

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            cli.load_config("/nonexistent/conf.toml")

    def test_bad_schema(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("schema = 99\n")
        with pytest.raises(ValueError):
            cli.load_config(path)


class TestToggles:
    def test_self_training_off_means_zero_rounds(self, tiny_config):
        cfg = cli.load_config(tiny_config)
        cfg["toggles"]["self_training"] = False
        assert cli.federation_config(cfg, seed=0).rounds == 0

    def test_kd_off_zeroes_lambda(self, tiny_config):
        cfg = cli.load_config(tiny_config)
        cfg["toggles"]["kd"] = False
        assert cli.federation_config(cfg, seed=0).lambda_kd == 0.0

    def test_swat_off_pushes_start_past_horizon(self, tiny_config):
        cfg = cli.load_config(tiny_config)
        cfg["toggles"]["swat"] = False
        fcfg = cli.federation_config(cfg, seed=0)
        assert fcfg.swat_start > fcfg.rounds

    def test_cluster_aggr_off_empties_groups(self, tiny_config):
        cfg = cli.load_config(tiny_config)
        cfg["toggles"]["cluster_aggr"] = False
        assert cli.federation_config(cfg, seed=0).cluster_groups == frozenset()


class TestRunExperiment:
    def test_artifact_layout(self, tiny_config, tmp_path):
        cfg = cli.load_config(tiny_config)
        out = tmp_path / "run"
        summary = cli.run_experiment(cfg, out)
        for name in ("rounds.jsonl", "timing.jsonl", "partition.json",
                     "summary.json", "global_phi.ckpt"):
            assert (out / name).exists()
        partition = json.loads((out / "partition.json").read_text())
        for c in range(len(partition["clusters"])):
            assert (out / f"cluster_{c}.ckpt").exists()
            formats.load_checkpoint(out / f"cluster_{c}.ckpt")
        assert 0.0 <= summary["miou_mean"] <= 1.0
        assert {"per_seed", "miou_std_over_seeds", "miou_last10_std_mean",
                "per_class_iou_mean", "config"} <= set(summary)

    def test_summary_recomputable_from_rounds(self, tiny_config, tmp_path):
        cfg = cli.load_config(tiny_config)
        out = tmp_path / "run"
        summary = cli.run_experiment(cfg, out)
        records = [json.loads(l) for l in (out / "rounds.jsonl").read_text().splitlines()]
        per_seed = {}
        for rec in records:
            per_seed.setdefault(rec["seed"], []).append(rec["miou"])
        mious = []
        for seed in cfg["seeds"]:
            tail_n = max(1, int(np.ceil(0.1 * len(per_seed[seed]))))
            mious.append(float(np.mean(per_seed[seed][-tail_n:])))
        assert summary["miou_mean"] == pytest.approx(float(np.mean(mious)), abs=1e-12)

    def test_rounds_jsonl_has_no_wallclock(self, tiny_config, tmp_path):
        cfg = cli.load_config(tiny_config)
        out = tmp_path / "run"
        cli.run_experiment(cfg, out)
        for line in (out / "rounds.jsonl").read_text().splitlines():
            assert "wallclock" not in line
        timing = (out / "timing.jsonl").read_text().splitlines()
        assert all("wallclock_ms" in line for line in timing)

    def test_rerun_is_byte_identical(self, tiny_config, tmp_path):
        cfg = cli.load_config(tiny_config)
        cli.run_experiment(cfg, tmp_path / "a")
        cli.run_experiment(cfg, tmp_path / "b")
        for name in ("rounds.jsonl", "summary.json", "partition.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestVerbs:
    def test_run_verb(self, tiny_config, tmp_path, capsys):
        rc = cli.main(["run", "--config", str(tiny_config), "--out", str(tmp_path / "r")])
        assert rc == 0
        assert "mIoU" in capsys.readouterr().out

    def test_run_ablate_matrix(self, tiny_config, tmp_path):
        rc = cli.main([
            "run", "--config", str(tiny_config),
            "--out", str(tmp_path / "m"),
            "--ablate", "cluster_groups=none,norm",
        ])
        assert rc == 0
        assert (tmp_path / "m" / "cluster_groups=none" / "summary.json").exists()
        assert (tmp_path / "m" / "cluster_groups=norm" / "summary.json").exists()

    def test_ablate_fda_window_none(self, tiny_config, tmp_path):
        rc = cli.main([
            "run", "--config", str(tiny_config),
            "--out", str(tmp_path / "w"),
            "--ablate", "fda_window=none,3",
        ])
        assert rc == 0
        none_cfg = json.loads(
            (tmp_path / "w" / "fda_window=none" / "summary.json").read_text()
        )["config"]
        assert none_cfg["toggles"]["fda_pretrain"] is False

    def test_ablate_malformed(self, tiny_config):
        assert cli.main(["run", "--config", str(tiny_config), "--ablate", "rounds"]) == 2

    def test_ablate_unknown_key(self, tiny_config, tmp_path):
        rc = cli.main([
            "run", "--config", str(tiny_config),
            "--out", str(tmp_path / "x"), "--ablate", "bogus=1,2",
        ])
        assert rc == 1

    def test_seed_override(self, tiny_config, tmp_path):
        rc = cli.main([
            "run", "--config", str(tiny_config), "--seed", "3,4",
            "--out", str(tmp_path / "s"),
        ])
        assert rc == 0
        summary = json.loads((tmp_path / "s" / "summary.json").read_text())
        assert [p["seed"] for p in summary["per_seed"]] == [3, 4]

    def test_compare_verb(self, tiny_config, tmp_path):
        cfg = cli.load_config(tiny_config)
        cli.run_experiment(cfg, tmp_path / "a")
        cli.run_experiment(cfg, tmp_path / "b")
        rc = cli.main([
            "compare", str(tmp_path / "a"), str(tmp_path / "b"),
            "--out", str(tmp_path / "cmp"),
        ])
        assert rc == 0
        rows = (tmp_path / "cmp" / "compare.csv").read_text().splitlines()
        assert len(rows) == 3
        # Two identical runs: identical mIoU columns.
        assert rows[1].split(",")[1:] == rows[2].split(",")[1:]
        assert (tmp_path / "cmp" / "curves.csv").exists()

    def test_compare_requires_two_runs(self, tmp_path):
        assert cli.main(["compare", str(tmp_path), "--out", str(tmp_path)]) == 1

    def test_compare_missing_summary(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        rc = cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "b"),
                       "--out", str(tmp_path / "c")])
        assert rc == 1

    def test_gen_world_verb(self, tiny_config, tmp_path):
        out = tmp_path / "corpus"
        rc = cli.main(["gen-world", "--config", str(tiny_config), "--out", str(out)])
        assert rc == 0
        world = formats.load_corpus(out)
        assert len(world.clients) == 4

    def test_cluster_verb(self, tiny_config, tmp_path):
        rc = cli.main(["cluster", "--config", str(tiny_config), "--out", str(tmp_path)])
        assert rc == 0
        doc = json.loads((tmp_path / "partition.json").read_text())
        assert sum(len(c) for c in doc["clusters"]) == 4
        styles = json.loads((tmp_path / "styles.json").read_text())
        assert len(styles) == 4 and all(len(v) == 27 for v in styles.values())


def test_cluster_group_presets():
    assert cli.CLUSTER_GROUP_PRESETS["none"] == []
    assert cli.CLUSTER_GROUP_PRESETS["bn"] == ["norm"]
    assert set(cli.CLUSTER_GROUP_PRESETS["all"]) == {"backbone", "norm", "classifier"}
