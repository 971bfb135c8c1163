import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import open_world
from consim.cli import main
from consim.harness import (
    CSV_COLUMNS,
    EpisodeResult,
    ExperimentConfig,
    ScenarioConfig,
    build_teacher,
    compute_spl,
    optimal_length,
    parse_config,
    read_results_csv,
    run_episode,
    run_experiment,
    summarize,
)
from consim.world import FovModel, WorldParams, detect_target, generate_world, load_world, student_start_pose

SMALL = WorldParams(width=40, height=40, n_rooms=2, min_room=10, door_width=6, n_targets=100)


@pytest.fixture(scope="module")
def world():
    return generate_world(7, SMALL)


def small_config(**kw):
    base = dict(world_seeds=(7,), n_targets=3, world_width=40, world_height=40, n_rooms=2,
                teacher_steps=300, step_budget=800)
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------- SPL


def test_spl_examples():
    assert compute_spl([EpisodeResult(True, 10.0, 10.0)]) == 1.0
    assert compute_spl([EpisodeResult(False, 3.0, 10.0)]) == 0.0
    assert abs(compute_spl([EpisodeResult(True, 20.0, 10.0), EpisodeResult(True, 10.0, 10.0)]) - 0.75) <= 1e-12
    with pytest.raises(ValueError):
        compute_spl([])


def test_spl_excludes_degenerate_episodes():
    rs = [EpisodeResult(True, 0.0, 0.0), EpisodeResult(True, 12.0, 6.0)]
    assert compute_spl(rs) == 0.5
    assert math.isnan(rs[0].spl_term)


@given(st.lists(st.tuples(st.booleans(), st.floats(0.1, 100), st.floats(0.1, 100)), min_size=1, max_size=50))
def test_spl_in_unit_interval(eps):
    rs = [EpisodeResult(s, max(p, l) if s else p, l) for s, p, l in eps]
    v = compute_spl(rs)
    assert 0.0 <= v <= 1.0
    for r in rs:
        if r.success:
            assert r.p >= r.l


# ---------------------------------------------------------------- config


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(scenario="elsewhere")
    with pytest.raises(ValueError):
        ScenarioConfig(method="teleport")
    with pytest.raises(ValueError):
        ScenarioConfig(pe=1.5)
    with pytest.raises(ValueError):
        ScenarioConfig(n_hyp=6)


def test_parse_config():
    cfg = parse_config("""
        # comment
        scenarios = constrained_start
        methods = proposed, frontier
        pes = 0, 0.5   # trailing comment
        world_seeds = 1,2
        n_targets = 7
        view_angle_deg = 40
    """)
    assert cfg.methods == ("proposed", "frontier")
    assert cfg.pes == (0.0, 0.5)
    assert cfg.world_seeds == (1, 2)
    assert cfg.n_targets == 7
    assert cfg.fov == FovModel()


@pytest.mark.parametrize("text", ["bogus = 1", "pes = 0\npes = 1", "n_targets = many", "no equals sign",
                                  "methods = teleport", "n_targets = 0"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


# ---------------------------------------------------------------- episodes


def test_optimal_length_reaches_detection(world):
    tid = sorted(world.targets)[0]
    start = student_start_pose(world, tid, 0)
    l = optimal_length(world, start, tid, FovModel())
    assert 0 < l <= 3.3


def test_immediate_detection_is_success_with_zero_path():
    w = open_world(9, 9, {0: (0.45, 0.45)})
    fov = FovModel(3.2, 2 * math.pi - 0.01, 1.6)
    cfg = ScenarioConfig(method="w/o_merge", fov=fov)
    start = student_start_pose(w, 0, 0)
    assert detect_target(w, start, 0, fov)
    r = run_episode(w, cfg, 0, 0)
    assert r.success and r.p == 0.0 and r.steps == 0


def test_zero_budget_fails(world):
    r = run_episode(world, ScenarioConfig(method="frontier", step_budget=0), sorted(world.targets)[5], 0)
    assert not r.success and r.p == 0.0


@pytest.mark.parametrize("method", ["w/o_merge", "frontier"])
def test_baselines_send_no_bytes(world, method):
    r = run_episode(world, ScenarioConfig(method=method, step_budget=600), sorted(world.targets)[1], 0)
    assert r.query_bytes == r.response_bytes == r.merges == 0


def test_proposed_exchanges_and_succeeds_on_some_target(world):
    cfg = ScenarioConfig(method="proposed", step_budget=1500, teacher_steps=300)
    results = []
    for tid in sorted(world.targets)[:4]:
        r = run_episode(world, cfg, tid, 0)
        assert r.query_bytes >= 536 and r.query_bytes % 536 == 0
        results.append(r)
    assert any(r.success for r in results)
    for r in results:
        if r.success:
            assert r.p >= r.l


def test_unknown_target(world):
    with pytest.raises(KeyError):
        run_episode(world, ScenarioConfig(), 10**6, 0)


def test_constrained_start_goal_teacher_ends_at_student_start(world):
    tid = sorted(world.targets)[2]
    kit = build_teacher(world, tid, 3, ScenarioConfig(scenario="constrained_start_goal", teacher_steps=100))
    assert kit.dataset.records[-1].pose == student_start_pose(world, tid, 3)


# ---------------------------------------------------------------- experiments


def test_experiment_is_deterministic_and_pe_free_for_baselines():
    cfg = small_config(scenarios=("constrained_start",), pes=(0.0, 1.0))
    s1, csv1, rows = run_experiment(cfg)
    s2, csv2, _ = run_experiment(cfg)
    assert csv1 == csv2
    assert csv1.splitlines()[0].split(",") == list(CSV_COLUMNS)
    for m in ("frontier", "w/o_merge"):
        a = [r.result for r in rows if r.method == m and r.pe == 0.0]
        b = [r.result for r in rows if r.method == m and r.pe == 1.0]
        assert a == b
    assert not s1.failures
    for k in s1.curves():
        assert 0.0 <= s1.mean_spl(*k) <= 1.0
        series = s1.sorted_series(*k)
        assert series == sorted(series, reverse=True)


def test_csv_roundtrip():
    _, text, rows = run_experiment(small_config(scenarios=("constrained_start",), methods=("frontier",)))
    back = read_results_csv(text)
    assert [r.result for r in back] == [r.result for r in sorted(rows, key=lambda r: r.key())]
    assert summarize(back).lines() == summarize(rows).lines()


# ---------------------------------------------------------------- CLI


def test_cli_gen_world(tmp_path):
    out = tmp_path / "w.txt"
    assert main(["gen-world", "--seed", "3", "--out", str(out), "--width", "40", "--height", "40",
                 "--rooms", "2"]) == 0
    w = load_world(out)
    assert w.spec.width == 40 and len(w.targets) == 100


def test_cli_run_and_spl(tmp_path, capsys):
    conf = tmp_path / "exp.conf"
    conf.write_text("world_seeds = 7\nn_targets = 2\nworld_width = 40\nworld_height = 40\nn_rooms = 2\n"
                    "teacher_steps = 200\nstep_budget = 500\n")
    out = tmp_path / "res.csv"
    assert main(["run", "--config", str(conf), "--method", "frontier", "--pe", "0.5", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "frontier pe=0.5" in printed
    text = out.read_bytes()
    assert text.startswith(b"world,scenario,method,pe,target_id")
    assert b"\r\n" in text
    assert main(["spl", "--in", str(out)]) == 0
    assert capsys.readouterr().out == printed


def test_cli_config_error_exit_code(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n")
    assert main(["run", "--config", str(conf), "--out", str(tmp_path / "x.csv")]) != 0
    assert "unknown key" in capsys.readouterr().err
    assert main(["spl", "--in", str(tmp_path / "missing.csv")]) != 0
