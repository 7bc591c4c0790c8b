import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np
import pytest

import distofo
from distofo.bounds import BoundInputs, build_report
from distofo.controller import ControllerConfig, run
from distofo.errors import ConfigError, EmptyInput
from distofo.harness import (
    Arm,
    RunConfig,
    bound_report,
    build_fixture,
    compare_bounds,
    export,
    resolve_problem,
    run_experiment,
    run_replica,
    solve_optimum,
    write_experiment,
)
from distofo.harness.cli import main
from distofo.netgraph import averaging_matrix, metropolis_weights, standard_graphs
from distofo.objective import BoxConstraint, ReducedObjective, tracking_objectives
from distofo.plant import AffinePlant, sensitivity_oracle

from conftest import PATH3_B, PATH3_H

DATA = Path(distofo.__file__).parent / "data"


def _small(**ctrl):
    cfg = RunConfig.load(DATA / "path3_bounds.json")
    return cfg.with_overrides(controller={"horizon": 60, **ctrl},
                              experiment={"replicas": 3, "stride": 10})


def test_arm_parse():
    assert Arm.parse("tau=5").tau == 5
    assert Arm.parse("centralized").baseline == "centralized"
    for bad in ("tau=0", "tau=x", "local"):
        with pytest.raises(ConfigError):
            Arm.parse(bad)


@pytest.mark.parametrize("raw", [
    {"controller": {"eta": -1.0}},
    {"controller": {"horizon": 1.5}},
    {"experiment": {"arms": []}},
    {"experiment": {"replicas": 0}},
    {"objective": {"normalization": "median"}},
    {"plant": {"kind": "ac_grid"}},
    {"controller": {"mode": "projected"}},
    {"bounds": {"scale": -2}},
    {"controllr": {}},
    {"controller": {"etaa": 0.1}},
])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_config_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    assert main(["run", str(bad)]) == 2
    assert main(["bounds", str(tmp_path / "missing.json")]) == 2


def test_config_hash_tracks_content():
    a = RunConfig.from_dict({"controller": {"eta": 0.01}})
    b = RunConfig.from_dict({"controller": {"eta": 0.01}})
    c = RunConfig.from_dict({"controller": {"eta": 0.02}})
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_defaults_build_grid_fixture():
    fx = build_fixture(RunConfig.from_dict({}))
    assert fx.graph.node_count == 8 and fx.graph.is_tree()
    assert fx.plant.dim == 8


def test_seeds_and_mode():
    cfg = RunConfig.load(DATA / "dc_grid_constrained.json")
    assert cfg.mode == "projected"
    assert cfg.seeds == list(range(20))
    assert RunConfig.load(DATA / "dc_grid_unconstrained.json").mode == "unconstrained"


def test_optimum_zero_sensitivity():
    red = ReducedObjective(AffinePlant(np.zeros((3, 3)), np.ones(3)), tracking_objectives(np.ones(3)))
    np.testing.assert_allclose(solve_optimum(red.quadratic_model()).u, 0.0, atol=1e-14)


def test_grid_optimum_matches_normal_equations():
    cfg = RunConfig.load(DATA / "dc_grid_unconstrained.json")
    fx = build_fixture(cfg)
    h, v_ref = sensitivity_oracle(fx.plant)
    b = fx.plant.measure(np.zeros(8))
    expected = np.linalg.solve(np.eye(8) + h.T @ h, h.T @ (v_ref - b))
    np.testing.assert_allclose(resolve_problem(cfg).u_star, expected, atol=1e-9)


def test_grid_optimum_zero_load_change():
    cfg = RunConfig.load(DATA / "dc_grid_unconstrained.json").with_overrides(
        plant={"load_change": 0.0})
    np.testing.assert_allclose(resolve_problem(cfg).u_star, 0.0, atol=1e-10)


@pytest.mark.parametrize("d", [0.0, 0.3, -0.5])
def test_grid_optimum_disturbance_invariant(d):
    base = RunConfig.load(DATA / "dc_grid_unconstrained.json")
    ref = resolve_problem(base).u_star
    moved = resolve_problem(base.with_overrides(plant={"disturbance": d})).u_star
    np.testing.assert_allclose(moved, ref, atol=1e-9)


def test_constrained_optimum_agrees_with_active_set():
    prob = resolve_problem(RunConfig.load(DATA / "dc_grid_constrained.json"))
    assert prob.optimum.cross_check is not None and prob.optimum.cross_check <= 1e-8
    assert prob.constraint.contains(prob.u_star)
    assert prob.u_star[5] == pytest.approx(0.9 * prob.u_star_free[5], rel=1e-10)


def test_constrained_path3_optimum():
    red = ReducedObjective(AffinePlant(PATH3_H, PATH3_B), tracking_objectives(np.zeros(3)))
    box = BoxConstraint.uniform(3, -0.05, 0.05)
    opt = solve_optimum(red.quadratic_model(), box)
    assert np.all(np.abs(opt.u) <= 0.05 + 1e-15)
    assert opt.cross_check <= 1e-8


def test_run_replica_metadata():
    cfg = _small()
    tr = run_replica(cfg, Arm.parse("tau=4"), 7)
    assert tr.metadata["arm"] == "tau=4"
    assert tr.metadata["config_hash"] == cfg.config_hash()
    assert tr.horizon == 60


def test_experiment_deterministic_and_thinned():
    cfg = _small()
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    ra, rb = a.arms["tau=4"], b.arms["tau=4"]
    assert ra.seeds == [0, 1, 2]
    np.testing.assert_array_equal(ra.rel_err_matrix(), rb.rel_err_matrix())
    assert ra.traces[0].metadata["k"] == [0, 10, 20, 30, 40, 50, 60]
    assert a.summary() == b.summary()


def test_trace_csv_columns(tmp_path):
    cfg = _small()
    tr = run_replica(cfg, Arm.parse("tau=4"), 0)
    path = export(tr, tmp_path / "t.csv", stride=20)
    rows = list(csv.reader(io.StringIO(path.read_text())))
    assert rows[0] == ["k", "u_0", "u_1", "u_2", "probe_0", "probe_1", "probe_2",
                       "objective", "rel_err", "e_norm"]
    assert [r[0] for r in rows[1:]] == ["0", "20", "40", "60"]
    assert float(rows[1][1]) == tr.u[0, 0]
    # floats round-trip exactly
    assert float(rows[2][4]) == tr.probe[20, 0]


def test_exports_byte_stable(tmp_path):
    cfg = _small()
    tr = run_replica(cfg, Arm.parse("tau=4"), 1)
    one = export(tr, tmp_path / "a.json", "json", stride=5).read_bytes()
    two = export(run_replica(cfg, Arm.parse("tau=4"), 1), tmp_path / "b.json", "json",
                 stride=5).read_bytes()
    assert one == two
    data = json.loads(one)
    assert data["k"][:3] == [0, 5, 10]
    with pytest.raises(TypeError):
        export(object(), tmp_path / "x.csv")


def test_write_experiment_files(tmp_path):
    res = run_experiment(_small(), seeds=[0, 1])
    paths = write_experiment(res, tmp_path)
    names = sorted(p.relative_to(tmp_path).as_posix() for p in paths)
    assert names == ["summary.json", "tau4/seed0.csv", "tau4/seed1.csv", "tau4_mean.csv"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["arms"]["tau=4"]["seeds"] == [0, 1]
    digest = lambda: {p: hashlib.sha256((tmp_path / p).read_bytes()).hexdigest()  # noqa: E731
                      for p in names}
    first = digest()
    write_experiment(run_experiment(_small(), seeds=[0, 1]), tmp_path)
    assert digest() == first


def test_compare_bounds_empty():
    w = metropolis_weights(standard_graphs("path", 3))
    rep = build_report(BoundInputs.from_weights(w, 1, 1e-4, 0.01, 1.0, 2.0, 1.5, E0=1.0))
    with pytest.raises(EmptyInput):
        compare_bounds([], rep)


def test_compare_bounds_averaging_dominated():
    # with exact averaging the consensus error vanishes and the bound must hold
    red_plant = AffinePlant(PATH3_H, PATH3_B)
    objs = [o.scaled(4.0) for o in tracking_objectives(np.zeros(3))]
    w = averaging_matrix(3, 2)
    u_star = solve_optimum(ReducedObjective(red_plant, objs).quadratic_model()).u
    traces = [run(ControllerConfig(eta=1e-4, delta=0.01, tau=2, horizon=80, seed=s),
                  red_plant, objs, w, np.zeros(3), u_star) for s in range(30)]
    rep = build_report(BoundInputs.from_weights(w, 2, 1e-4, 0.01, 2.2, 2.2, 1.39, E0=40.0))
    cmp = compare_bounds(traces, rep)
    assert cmp.banner is None and cmp.verdict is True
    assert cmp.k[0] == 3
    assert "k,empirical,stderr,bound,dominated" in cmp.to_csv()


def test_compare_bounds_banner_when_violated():
    cfg = _small()
    traces = [run_replica(cfg, Arm.parse("tau=4"), s) for s in range(2)]
    w = metropolis_weights(standard_graphs("path", 3), 4)
    rep = build_report(BoundInputs.from_weights(w, 4, 1.0, 0.01, 2.2, 2.2, 1.39, E0=40.0))
    cmp = compare_bounds(traces, rep)
    assert cmp.banner.startswith("hypotheses violated")
    assert cmp.verdict is None
    assert cmp.to_csv().startswith("# hypotheses violated")
    with pytest.raises(ValueError):
        compare_bounds(traces, rep, which="lemma")


def test_bound_report_path3():
    rep = bound_report(RunConfig.load(DATA / "path3_bounds.json").with_overrides(
        bounds={"e0_samples": 300}))
    assert rep.hypotheses_ok
    # the fixture config already carries the scale that makes m exceed one
    assert rep.provenance["scale_c"] == 1.0
    assert rep.inputs["m"] > 1.0
    assert rep.tau_min >= 1


def test_cli_bounds_violated_on_grid(capsys):
    cfg = RunConfig.load(DATA / "dc_grid_unconstrained.json")
    path = Path(cfg.source)
    assert main(["bounds", str(path)]) == 3
    out = capsys.readouterr()
    assert "hypotheses violated" in out.err
    assert "step_size_ok = False" in out.out


def test_cli_bounds_json(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["bounds", str(DATA / "path3_bounds.json"), "--json", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["step_size_ok"] is True
    assert data["inputs"]["tau"] == 4


def test_cli_optimum(capsys):
    assert main(["optimum", str(DATA / "dc_grid_constrained.json")]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["u_star"][5] == pytest.approx(0.45, rel=1e-9)
    assert data["upper"][5] == pytest.approx(0.45, rel=1e-9)


def test_cli_run_smoke(tmp_path, capsys):
    code = main(["run", str(DATA / "path3_bounds.json"), "--seeds", "2", "--horizon", "30",
                 "--out", str(tmp_path), "--arms", "tau=2", "centralized"])
    assert code == 0
    assert (tmp_path / "summary.json").exists()
    assert (tmp_path / "tau2" / "seed1.csv").exists()
    assert (tmp_path / "centralized_mean.csv").exists()
    assert "tau=2" in capsys.readouterr().out
