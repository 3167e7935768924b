"""Driver pipeline: data generation, runs, pairing, determinism, config."""

import json

import pytest

from liveseg import cli, data
from liveseg.model import init_base_weights


@pytest.fixture(scope="module")
def weights_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights")
    init_base_weights(123).save(path)
    return str(path)


def run_cli(*argv):
    cli.main(list(argv))


class TestGenData:
    def test_single_bundle(self, tmp_path):
        run_cli("gen-data", "--out", str(tmp_path / "b"), "--family", "split",
                "--frames", "6", "--seed", "3")
        bundle = data.load_bundle(tmp_path / "b")
        assert bundle.spec.family == "split" and len(bundle) == 6

    def test_class_stream(self, tmp_path):
        run_cli("gen-data", "--out", str(tmp_path / "cs"))
        stream = data.load_class_stream(tmp_path / "cs")
        assert len(stream.items) == 360


class TestRun:
    def test_run_writes_output_tree(self, tmp_path, weights_dir):
        out = tmp_path / "run1"
        run_cli("run", "--scenario", "camouflage:9:5", "--weights", weights_dir,
                "--out", str(out), "--epochs", "2", "--lr", "0.01", "--seed", "5")
        assert (out / "config.txt").exists()
        assert (out / "report.csv").exists()
        payload = json.loads((out / "report.json").read_text())
        assert payload["summary"]["streams"] == 1
        stream = payload["streams"][0]
        assert (out / "events" / f"{stream['stream_id']}.json").exists()
        assert "config_hash" in payload["summary"]

    def test_run_deterministic_digests(self, tmp_path, weights_dir):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli("run", "--scenario", "camouflage:9:5", "--weights", weights_dir,
                    "--out", str(out), "--epochs", "2", "--lr", "0.01", "--seed", "7")
            outs.append(json.loads((out / "report.json").read_text())["summary"]["digest"])
        assert outs[0] == outs[1]

    def test_run_on_saved_bundle(self, tmp_path, weights_dir):
        run_cli("gen-data", "--out", str(tmp_path / "b"), "--family", "plain",
                "--frames", "5", "--seed", "2")
        run_cli("run", "--bundle", str(tmp_path / "b"), "--weights", weights_dir,
                "--out", str(tmp_path / "out"), "--variant", "original", "--seed", "1")
        payload = json.loads((tmp_path / "out" / "report.json").read_text())
        assert payload["streams"][0]["variant"] == "original"

    def test_missing_weights_exits_nonzero(self, tmp_path):
        with pytest.raises(SystemExit):
            run_cli("run", "--scenario", "plain:1:5", "--weights",
                    str(tmp_path / "nope"), "--out", str(tmp_path / "o"))

    def test_flag_overrides_config_file(self, tmp_path, weights_dir):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[protocol]\ntau_iou = 0.75\n")
        out = tmp_path / "o"
        run_cli("run", "--scenario", "camouflage:9:4", "--weights", weights_dir,
                "--config", str(cfg), "--tau", "0.6", "--out", str(out),
                "--variant", "original", "--seed", "1")
        text = (out / "config.txt").read_text()
        assert "tau_iou = 0.6" in text


class TestReport:
    def _make_runs(self, tmp_path, weights_dir):
        base_out, treat_out = tmp_path / "base", tmp_path / "treat"
        common = ["--scenario", "camouflage:9:6", "--weights", weights_dir,
                  "--epochs", "2", "--lr", "0.01", "--seed", "4"]
        run_cli("run", *common, "--variant", "original", "--out", str(base_out))
        run_cli("run", *common, "--variant", "lit_lora", "--out", str(treat_out))
        return base_out, treat_out

    def test_pairing_emits_reduction_table(self, tmp_path, weights_dir):
        base_out, treat_out = self._make_runs(tmp_path, weights_dir)
        out = tmp_path / "paired"
        run_cli("report", "--baseline", str(base_out), "--treatment", str(treat_out),
                "--out", str(out))
        table = json.loads((out / "report.json").read_text())
        assert "corrections_reduction" in table["summary"]
        csv_text = (out / "report.csv").read_text()
        assert "baseline_corrections" in csv_text.splitlines()[0]
        assert (out / "histogram.csv").read_text().startswith("bin,count")

    def test_mismatched_suites_refused(self, tmp_path, weights_dir):
        base_out, _ = self._make_runs(tmp_path, weights_dir)
        other = tmp_path / "other"
        run_cli("run", "--scenario", "plain:3:6", "--weights", weights_dir,
                "--out", str(other), "--variant", "original", "--seed", "4")
        with pytest.raises(SystemExit, match="different suites"):
            run_cli("report", "--baseline", str(base_out), "--treatment", str(other))


class TestConfig:
    def test_default_config_parses(self):
        cfg = cli.load_config(None)
        assert cfg.getfloat("protocol", "tau_iou") == 0.5
        assert cfg.getint("lora", "max_epochs") == 40

    def test_hash_stable_and_sensitive(self):
        a, b = cli.load_config(None), cli.load_config(None)
        assert cli.config_hash(a) == cli.config_hash(b)
        b.set("protocol", "tau_iou", "0.75")
        assert cli.config_hash(a) != cli.config_hash(b)


class TestBenchPipeline:
    def test_bench_pair_then_report(self, tmp_path, weights_dir, monkeypatch):
        from liveseg import suites
        mini = tuple(data.ScenarioSpec(f, frames=5, size=48, seed=s,
                                       radius_min=6, radius_max=9)
                     for f, s in (("camouflage", 41), ("distractor", 42)))
        monkeypatch.setattr(suites, "BENCH_SCENARIOS", mini)
        monkeypatch.setattr(cli.suites, "BENCH_SCENARIOS", mini)

        base_out = tmp_path / "orig"
        lit_out = tmp_path / "lit"
        run_cli("bench", "--variant", "original", "--weights", weights_dir,
                "--out", str(base_out), "--seed", "3")
        run_cli("bench", "--variant", "lit_lora", "--weights", weights_dir,
                "--out", str(lit_out), "--seed", "3", "--epochs", "2", "--lr", "0.01")
        for out in (base_out, lit_out):
            payload = json.loads((out / "report.json").read_text())
            assert payload["summary"]["streams"] == 2
            assert payload["summary"]["violations"] == []
            assert "mean_update_wall_s" in payload["summary"]

        paired = tmp_path / "paired"
        run_cli("report", "--baseline", str(base_out), "--treatment", str(lit_out),
                "--out", str(paired))
        table = json.loads((paired / "report.json").read_text())
        assert "corrections_reduction" in table["summary"]
        header = (paired / "report.csv").read_text().splitlines()[0]
        assert "baseline_corrections" in header and "treatment_corrections" in header
