import filecmp

import numpy as np
import pytest

from weldloop import link, qnet, weldsim
from weldloop.expcli import cli, config as cfg, runner


def small_conf(**overrides):
    items = {"episodes": "30", "seed": "4", "baseline_episodes": "2", "surface": "mixed"}
    items.update(overrides)
    return cfg.apply_overrides(cfg.ExperimentConfig(), items)


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return runner.run_experiment(small_conf(), out)


class TestSchedule:
    def test_modes(self):
        conf = cfg.ExperimentConfig()
        modes = [runner.episode_mode(e, conf) for e in range(1, 41)]
        assert modes[:25] == [link.MODE_RANDOM] * 25
        assert [e for e, m in enumerate(modes, 1) if m == link.MODE_TEST] == [30, 40]

    def test_short_run_counts(self, short_run):
        t = short_run.trainer
        assert [r[0] for r in t.train_rows] == list(range(1, 30))
        assert [r[0] for r in t.test_rows] == [30]
        assert len(t.buffer) == 29 * 80  # test transitions stay out of the buffer
        assert {r[0] for r in t.loss_rows} == set(range(2, 30))
        assert short_run.device_runtime.epsilons_consumed == 30 * 80

    def test_artifacts(self, short_run):
        out = short_run.out_dir
        for name in ("config.txt", "baseline.csv", "train_returns.csv", "test_returns.csv", "losses.csv",
                     "trace_ep30.csv", "policy_final.bin"):
            assert (out / name).is_file()
        rows = runner.read_csv(out / "trace_ep30.csv")
        assert len(rows) == 80 and list(rows[0]) == list(runner.TRACE_COLUMNS)
        assert qnet.from_blob((out / "policy_final.bin").read_bytes()).version == 31

    def test_byte_identical_rerun(self, short_run, tmp_path):
        again = runner.run_experiment(small_conf(), tmp_path)
        names = ["baseline.csv", "train_returns.csv", "test_returns.csv", "losses.csv", "trace_ep30.csv",
                 "policy_final.bin", "config.txt"]
        match, mismatch, errors = filecmp.cmpfiles(short_run.out_dir, again.out_dir, names, shallow=False)
        assert mismatch == [] and errors == []


class TestTransitions:
    def test_reward_and_done(self):
        steps = tuple(link.StepRecord(float(i), 1.0, 0.0, 62.5) for i in range(80))
        ts = runner.experience_to_transitions(link.ExperienceMsg(1, steps, (9.5, 2.0)))
        assert ts[0].reward == 0.1 and ts[-1].reward == 0.95
        assert ts[-1].next_obs == (9.5, 2.0)
        assert [t.done for t in ts].count(True) == 1 and ts[-1].done


class TestCompare:
    def test_equal(self):
        assert runner.compare_to_baseline([50.0] * 10, 50.0) == 0.0

    def test_ten_percent(self):
        assert runner.compare_to_baseline([55.0] * 10, 50.0) == pytest.approx(10.0)

    def test_uses_last_ten(self):
        assert runner.compare_to_baseline([0.0] * 5 + [60.0] * 10, 50.0) == pytest.approx(20.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            runner.compare_to_baseline([], 50.0)


class TestConfig:
    def test_overrides(self):
        conf = cfg.apply_overrides(cfg.ExperimentConfig(), {"sim.lambda": "0.6", "sac.lr": "1e-3", "seed": "3",
                                                           "sim.noise": "off"})
        assert (conf.sim.lam, conf.sac.lr, conf.seed, conf.sim.noise) == (0.6, 1e-3, 3, False)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config key"):
            cfg.apply_overrides(cfg.ExperimentConfig(), {"sim.bogus": "1"})
        with pytest.raises(ValueError, match="unknown config section"):
            cfg.apply_overrides(cfg.ExperimentConfig(), {"foo.bar": "1"})

    def test_dump_round_trip(self, tmp_path):
        conf = small_conf(**{"sim.kappa": "0.3", "baseline_powers": "30,60,90"})
        path = tmp_path / "c.txt"
        path.write_text(cfg.dump_config(conf))
        assert cfg.load_config(path) == conf

    def test_parse_errors(self):
        with pytest.raises(ValueError, match="key=value"):
            cfg.parse_lines("just words\n")
        assert cfg.parse_lines("# comment\n a = 1 # trailing\n") == {"a": "1"}

    def test_invalid_preset(self):
        with pytest.raises(ValueError, match="invalid preset"):
            cfg.resolve_profile("polished")


class TestCli:
    def test_baseline_noise_off(self, capsys, tmp_path):
        assert cli.main(["baseline", "--surface", "brushed", "--noise-off", "--set", "baseline_episodes=1",
                         "--out", str(tmp_path)]) == 0
        assert "best: 85 W" in capsys.readouterr().out
        assert len(runner.read_csv(tmp_path / "baseline.csv")) == len(weldsim.BASELINE_POWERS)

    def test_invalid_surface_exit_code(self, capsys):
        assert cli.main(["baseline", "--surface", "polished"]) == 2
        assert "invalid preset" in capsys.readouterr().err

    def test_run_and_plot(self, capsys, tmp_path):
        assert cli.main(["run", "--surface", "brushed", "--episodes", "12", "--seed", "1",
                         "--set", "baseline_episodes=1", "--set", "random_episodes=5", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "last-10 test mean vs baseline" in out
        svgs = sorted(p.name for p in tmp_path.glob("*.svg"))
        assert "returns.svg" in svgs and "losses.svg" in svgs and "trace_ep10.svg" in svgs
        first = (tmp_path / "returns.svg").read_bytes()
        assert cli.main(["plot", str(tmp_path)]) == 0
        assert (tmp_path / "returns.svg").read_bytes() == first


def test_evaluate_policy():
    ev = runner.evaluate_policy(qnet.zero_policy(), weldsim.PRESETS["brushed"], 0, range(3))
    assert len(ev.returns) == 3
    assert np.all(ev.mean_power_by_step == 62.5)
    assert ev.keyhole_fraction == 0.0
