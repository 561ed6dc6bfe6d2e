import dataclasses
import json
import math

import numpy as np
import pytest

from pbornn import cli
from pbornn.core import CounterRng
from pbornn.data import SynthConfig, write_returns_csv, ReturnSeries
from pbornn.harness import (
    Axis,
    BudgetParityError,
    CellResult,
    Choice,
    ConfigError,
    ExperimentConfig,
    ResultTable,
    SearchSpace,
    Trial,
    emit_results,
    format_results,
    gate_config,
    load_dataset,
    mean_baseline_mse,
    parse_config,
    random_search,
    read_results,
    run_benchmark,
    run_cell,
    run_gate,
)

TINY = """
synth.length = 400
synth.min_r2_gain = 0
budget = 60
search_iterations.sgd = 2
search_iterations.es = 2
search_iterations.npso = 2
max_epochs = 30
population = 6
pbo_iterations = 5
hidden_dims = 2, 3
"""


def tiny_config(**changes):
    return dataclasses.replace(parse_config(TINY), **changes)


def fake_trial(losses):
    def train(index, params, rng):
        return Trial(index, params, losses[index], np.array([float(index)]), 1)

    return train


class TestRandomSearch:
    space = SearchSpace({"a": Axis(1e-3, 1.0, "log"), "b": Choice((1, 2))})

    def test_single_iteration(self):
        result = random_search(self.space, 1, fake_trial([0.5]), CounterRng(0))
        assert result.best.index == 0 and len(result.trials) == 1

    def test_degenerate_axis(self):
        space = SearchSpace({"a": Axis(0.3, 0.3)})
        result = random_search(space, 6, fake_trial([1.0] * 6), CounterRng(0))
        assert {t.params["a"] for t in result.trials} == {0.3}

    def test_log_axis_range(self):
        gen = np.random.default_rng(0)
        draws = np.array([Axis(1e-3, 1.0, "log").sample(gen) for _ in range(4000)])
        assert draws.min() >= 1e-3 and draws.max() <= 1.0
        # log-uniform: half the mass sits below the geometric midpoint
        assert abs(np.mean(draws < math.sqrt(1e-3)) - 0.5) < 0.03

    def test_ties_and_divergence(self):
        result = random_search(self.space, 5, fake_trial([math.inf, 0.2, 0.1, 0.1, math.nan]), CounterRng(0))
        assert result.best.index == 2
        none = random_search(self.space, 2, fake_trial([math.inf, math.nan]), CounterRng(0))
        assert none.best is None

    def test_deterministic(self):
        a = random_search(self.space, 5, fake_trial([3, 1, 2, 5, 4]), CounterRng(7))
        b = random_search(self.space, 5, fake_trial([3, 1, 2, 5, 4]), CounterRng(7))
        assert [t.params for t in a.trials] == [t.params for t in b.trials]
        assert a.best.index == b.best.index == 1

    def test_bad_spaces(self):
        with pytest.raises(ConfigError):
            Axis(2.0, 1.0)
        with pytest.raises(ConfigError):
            Axis(0.0, 1.0, "log")
        with pytest.raises(ConfigError):
            Choice(())
        with pytest.raises(ConfigError):
            random_search(self.space, 0, fake_trial([]), CounterRng(0))


class TestBudget:
    def test_defaults_match_thirty_thousand(self):
        cfg = ExperimentConfig()
        assert cfg.planned_passes("sgd") == 100 * 300 == 30_000
        assert cfg.planned_passes("es") == cfg.planned_passes("npso") == 30 * 50 * 20
        cfg.check_parity()

    def test_parity_violation(self):
        with pytest.raises(BudgetParityError):
            dataclasses.replace(ExperimentConfig(), pbo_iterations=60).check_parity()
        with pytest.raises(BudgetParityError):
            run_benchmark(tiny_config(budget=61))

    def test_pbo_cells_spend_exactly_the_budget(self):
        cfg = tiny_config()
        ds = load_dataset(cfg)
        for arch in ("lstm", "fru"):
            cell = run_cell(cfg, ds, arch, "es")
            assert cell.forward_passes == 60
        assert run_cell(cfg, ds, "plstm", "npso").forward_passes == 60
        sgd = run_cell(cfg, ds, "lstm", "sgd")
        assert 0 < sgd.forward_passes <= 60

    def test_sgd_on_other_cells_is_not_implemented(self):
        cfg = tiny_config()
        assert run_cell(cfg, None, "fru", "sgd").status == "not implemented"


def table_of(*cells):
    return ResultTable([CellResult(a, t, s, test_mse=m, budget=10, forward_passes=10) for a, t, s, m in cells])


class TestResults:
    def test_normalisation(self):
        table = table_of(("lstm", "sgd", "ok", 4.0), ("lstm", "es", "ok", 1.0))
        table.normalise()
        assert [c.normalised_mse for c in table.cells] == [1.0, 0.25]
        assert "| LSTM | 1.000 | 0.250 |" in format_results(table, "markdown")

    def test_no_reference_leaves_nan(self):
        table = table_of(("lstm", "es", "ok", 1.0))
        table.normalise()
        assert math.isnan(table.cells[0].normalised_mse)

    def test_empty_tables(self, tmp_path):
        empty = ResultTable()
        assert json.loads(format_results(empty, "json")) == {"cells": []}
        assert format_results(empty, "csv").strip().split(",")[0] == "architecture"
        assert format_results(empty, "markdown").startswith("| | SGD | ES | NPSO |")
        emit_results(empty, tmp_path / "e.csv", "csv")
        assert read_results(tmp_path / "e.csv").cells == []

    def test_json_csv_json_round_trip(self, tmp_path):
        table = table_of(("lstm", "sgd", "ok", 0.123456789012345678), ("lstm", "es", "diverged", math.inf),
                         ("fru", "sgd", "not implemented", math.nan))
        table.cells[0].hyperparameters = {"learning_rate": 0.001234, "hidden_dim": 10}
        table.normalise()
        emit_results(table, tmp_path / "a.json", "json")
        first = read_results(tmp_path / "a.json")
        emit_results(first, tmp_path / "b.csv", "csv")
        second = read_results(tmp_path / "b.csv")
        emit_results(second, tmp_path / "c.json", "json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "c.json").read_bytes()
        for a, b in zip(table.cells, second.cells):
            for name in ("test_mse", "normalised_mse", "val_mse"):
                x, y = getattr(a, name), getattr(b, name)
                assert (math.isnan(x) and math.isnan(y)) or x == pytest.approx(y, rel=1e-12, abs=0)
            assert a.hyperparameters == b.hyperparameters

    def test_markdown_divergence_footnote(self):
        table = table_of(("lstm", "sgd", "ok", 2.0), ("lstm", "es", "diverged", math.inf),
                         ("fru", "sgd", "not implemented", math.nan))
        table.normalise()
        md = format_results(table, "markdown")
        assert "div.[^1]" in md and "[^1]: LSTM / ES diverged; raw test MSE inf." in md
        assert "| FRU | n/a |" in md

    def test_wall_time_only_on_request(self):
        table = table_of(("lstm", "es", "ok", 1.0))
        assert "wall_time" not in format_results(table, "json")
        assert "wall_time" in format_results(table, "json", timings=True)

    def test_unknown_format(self):
        with pytest.raises(ConfigError):
            format_results(ResultTable(), "xml")


class TestConfig:
    def test_parse(self):
        cfg = parse_config("""
        # comment
        architectures = lstm, fru
        synth.gamma = 0.8   # trailing comment
        search_iterations.es = 10
        calendar = false
        fru_frequencies = 0, 0.5
        csv_path = data.csv
        """)
        assert cfg.architectures == ("lstm", "fru")
        assert cfg.synth.gamma == 0.8
        assert cfg.search_iterations == {"sgd": 100, "es": 10, "npso": 20}
        assert cfg.calendar is False
        assert cfg.fru_frequencies == (0.0, 0.5)
        assert cfg.csv_path == "data.csv"

    def test_errors(self):
        for text in ("nonsense", "budget = lots", "synth.colour = red", "unknown = 1", "calendar = maybe",
                     "architectures = lstm, gru", "trainers = es, sgd\nsearch_iterations.sgd = 0\nworkers = 0"):
            with pytest.raises(ConfigError):
                parse_config(text)


class TestGate:
    def test_lag_must_exceed_window(self):
        with pytest.raises(ConfigError):
            gate_config(lag=20, truncation=20)

    def test_default_gate_is_budget_matched(self):
        cfg = gate_config()
        assert cfg.planned_passes("sgd") == cfg.planned_passes("es") == 6000
        assert cfg.synth.lag == 40 and cfg.truncation_length == 20

    def test_mean_baseline_closed_form(self):
        cfg = gate_config(length=20_000)
        ds = load_dataset(cfg)
        base = mean_baseline_mse(cfg, ds)
        # the training spread estimates the stationary spread, so the ratio is near 1
        assert base == pytest.approx(1.0, abs=0.05)
        _, y, _ = ds.segment("test")
        mu = cfg.synth.stationary_mean
        scaled_mu = (mu - ds.stats[0]) / ds.stats[1]
        assert np.mean((y - scaled_mu) ** 2) == pytest.approx(base, rel=0.1)
        control = gate_config(gamma=0.0, length=20_000)
        assert mean_baseline_mse(control, load_dataset(control)) == pytest.approx(1.0, abs=0.05)

    def test_small_gate_repeatable(self):
        cfg = dataclasses.replace(gate_config(length=400, budget=60), max_epochs=30, population=6, pbo_iterations=5,
                                  search_iterations={"sgd": 2, "es": 2}, hidden_dims=(2,))
        a, b = run_gate(cfg).summary(), run_gate(cfg).summary()
        assert a == b
        assert a["control"] is False and isinstance(a["passed"], bool)


class TestCli:
    def test_synth_and_rv(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("synth.length = 500\nsynth.min_r2_gain = 0\n")
        assert cli.main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "s.csv")]) == 0
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "bar_ts,rv" and len(lines) == 501
        stamps = np.datetime64("2021-01-04T08:00") + np.arange(90).astype("timedelta64[m]")
        write_returns_csv(ReturnSeries(stamps, np.full(90, 0.01)), tmp_path / "r.csv")
        assert cli.main(["rv", str(tmp_path / "r.csv"), "--out", str(tmp_path / "rv.csv")]) == 0
        rows = (tmp_path / "rv.csv").read_text().splitlines()
        assert len(rows) == 4 and rows[1].startswith("2021-01-04T08:00,")

    def test_exit_codes(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("no_such_key = 1\n")
        assert cli.main(["benchmark", "--config", str(bad)]) == 2
        assert cli.main(["benchmark", "--config", str(tmp_path / "missing.txt")]) == 2
        parity = tmp_path / "parity.txt"
        parity.write_text(TINY + "budget = 61\n")
        assert cli.main(["benchmark", "--config", str(parity)]) == 3
        assert cli.main(["accept", "--lag", "10"]) == 2
        assert cli.main(["accept", "--budget", "6001"]) == 3

    def test_train_and_search(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text(TINY)
        out = tmp_path / "t.json"
        args = ["train", "--config", str(cfg), "--arch", "lstm", "--trainer", "es", "--param", "hidden_dim=2",
                "--param", "learning_rate=0.01", "--param", "noise_std=0.05", "--out", str(out)]
        assert cli.main(args) == 0
        report = json.loads(out.read_text())
        assert report["forward_passes"] == 30 and report["hyperparameters"]["hidden_dim"] == 2
        assert cli.main(["search", "--config", str(cfg), "--arch", "fru", "--trainer", "npso", "--format", "csv",
                         "--out", str(tmp_path / "s.csv")]) == 0
        assert read_results(tmp_path / "s.csv").cells[0].forward_passes == 60

    def test_benchmark_identical_across_workers(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text(TINY)
        paths = []
        for workers in (1, 4):
            path = tmp_path / f"w{workers}.json"
            assert cli.main(["benchmark", "--config", str(cfg), "--seed", "11", "--workers", str(workers),
                             "--out", str(path)]) == 0
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        cells = json.loads(paths[0].read_text())["cells"]
        assert len(cells) == 9
        assert next(c for c in cells if c["architecture"] == "lstm" and c["trainer"] == "sgd")["normalised_mse"] == 1.0
