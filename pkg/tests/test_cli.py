import csv
import json
import re

import pytest

from pscsb.bounds import omega_max
from pscsb.cli import main
from pscsb.sem_core import Scenario


def gen(tmp_path, *flags, name="s.json"):
    out = tmp_path / name
    assert main(["generate", *flags, "--out", str(out)]) == 0
    return out


def small(tmp_path, name="s.json", seed=3):
    return gen(tmp_path, "--K", "6", "--T", "400", "--m", "2", "--changes", "1", "2",
               "--seed", str(seed), name=name)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_is_deterministic(tmp_path):
    a = small(tmp_path, "a.json")
    b = small(tmp_path, "b.json")
    assert a.read_bytes() == b.read_bytes()
    c = small(tmp_path, "c.json", seed=4)
    assert a.read_bytes() != c.read_bytes()


def test_generate_stationary(tmp_path):
    sc = Scenario.load(gen(tmp_path, "--K", "5", "--changes", "0", "0"))
    assert sc.K == 5
    assert len(sc.graph_segments) == 1 and len(sc.dist_segments) == 1


def test_generate_full_scale_defaults(tmp_path):
    sc = Scenario.load(gen(tmp_path, "--paper-defaults", "--seed", "7"))
    assert (sc.K, sc.m, sc.T) == (18, 4, 25000)
    assert [len(g) for g in sc.grouping] == [6, 6, 6]
    assert len(sc.graph_segments) == 5 and len(sc.dist_segments) == 5


def test_generate_rejects_bad_params(tmp_path, capsys):
    assert main(["generate", "--K", "4", "--groups", "2,3", "--out", str(tmp_path / "x.json")]) == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "x.json").exists()
    assert main(["generate", "--paper-defaults", "--K", "5", "--out", str(tmp_path / "y.json")]) == 1


def test_run_writes_three_csvs_and_is_repeatable(tmp_path, capsys):
    s = small(tmp_path)
    args = ["run", "--scenario", str(s), "--policies", "ps-sem-ucb-gr,glr-cucb", "--reps", "2",
            "--seed", "1", "--threads", "1"]
    assert main([*args, "--out", str(tmp_path / "r1")]) == 0
    summary = capsys.readouterr().out
    assert "ps-sem-ucb-gr" in summary and "glr-cucb" in summary
    assert main([*args, "--out", str(tmp_path / "r2")]) == 0
    names = sorted(p.name for p in (tmp_path / "r1").iterdir())
    assert names == ["aggregate.csv", "events.csv", "rounds.csv"]
    for n in names:
        assert (tmp_path / "r1" / n).read_bytes() == (tmp_path / "r2" / n).read_bytes()


def test_run_errors(tmp_path, capsys):
    s = small(tmp_path)
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == 1
    assert main(["run", "--scenario", str(s), "--policies", "ucb-magic"]) == 1
    assert main(["run", "--scenario", str(s), "--policies", "cts", "--param", "glr-cucb.p=0.1"]) == 1
    assert main(["run", "--scenario", str(s), "--policies", "cts", "--param", "cts.bogus=1",
                 "--threads", "1", "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert err.count("pscsb run: error:") == 4
    assert not (tmp_path / "o").exists()


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--no-such-flag"])
    assert exc.value.code != 0


def test_config_file_and_override(tmp_path):
    s = small(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": str(s), "policies": "cts", "reps": 1, "threads": 1,
                               "out": str(tmp_path / "from_cfg"),
                               "param": {"cts": {}}}))
    assert main(["run", "--config", str(cfg)]) == 0
    assert {r["rep"] for r in read_rows(tmp_path / "from_cfg" / "rounds.csv")} == {"0"}
    assert main(["run", "--config", str(cfg), "--reps", "2", "--out", str(tmp_path / "flag")]) == 0
    assert {r["rep"] for r in read_rows(tmp_path / "flag" / "rounds.csv")} == {"0", "1"}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"repz": 3}))
    assert main(["run", "--config", str(bad)]) == 1


def test_policy_parameters_reach_the_policy(tmp_path):
    s = small(tmp_path)
    common = ["run", "--scenario", str(s), "--policies", "cucb-sw", "--reps", "1", "--threads", "1"]
    assert main([*common, "--out", str(tmp_path / "a")]) == 0
    assert main([*common, "--param", "cucb-sw.window=5", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "rounds.csv").read_text()
    b = (tmp_path / "b" / "rounds.csv").read_text()
    assert a != b


def test_bounds_unit_defaults(capsys):
    assert main(["bounds"]) == 0
    out = capsys.readouterr().out
    lemma = float(re.search(r"lemma1\s+(\S+)", out).group(1))
    assert abs(lemma - 12.2899) <= 1e-3
    corollary = float(re.search(r"corollary \(order bound\)\s+(\S+)", out).group(1))
    assert abs(corollary - 3.6487) <= 1e-3
    assert re.search(r"local\s+8\n", out) and re.search(r"global\s+11\n", out)
    assert re.search(r"group\s+6\n", out)


def test_bounds_remark_monotone_in_kappa(capsys):
    values = []
    for kappa in (1, 2, 3, 4):
        assert main(["bounds", "--kappa", str(kappa)]) == 0
        values.append(float(re.search(r"\n  group\s+(\S+)", capsys.readouterr().out).group(1)))
    assert values == sorted(values) and len(set(values)) == 4


def test_bounds_from_scenario(tmp_path, capsys):
    s = small(tmp_path)
    assert main(["bounds", "--from-scenario", str(s)]) == 0
    out = capsys.readouterr().out
    w = omega_max(Scenario.load(s))
    assert f"{w:.6g}" in out


def test_bounds_zero_gap_is_an_error(tmp_path, capsys):
    sc = Scenario.load(small(tmp_path))
    doc = sc.to_dict()
    for seg in doc["dist_segments"]:
        seg["mu"] = [0.0] * sc.K
        seg["noise_scale"] = 0.0
    path = tmp_path / "flat.json"
    path.write_text(json.dumps(doc))
    assert main(["bounds", "--from-scenario", str(path)]) == 1
    assert "gap" in capsys.readouterr().err


def test_plot_curves_and_markers(tmp_path):
    s = small(tmp_path)
    assert main(["run", "--scenario", str(s), "--policies", "glr-cucb", "--reps", "1", "--threads", "1",
                 "--out", str(tmp_path / "r")]) == 0
    svg_path = tmp_path / "p.svg"
    assert main(["plot", "--aggregate", str(tmp_path / "r" / "aggregate.csv"), "--scenario", str(s),
                 "--out", str(svg_path)]) == 0
    svg = svg_path.read_text()
    assert svg.count('class="curve"') == 1
    sc = Scenario.load(s)
    dist = [int(t) for t in re.findall(r'class="dist-change" data-t="(\d+)"', svg)]
    graph = [int(t) for t in re.findall(r'class="graph-change" data-t="(\d+)"', svg)]
    assert dist == list(sc.dist_change_rounds)
    assert graph == list(sc.graph_change_rounds)
    points = re.search(r'class="curve"[^>]*points="([^"]+)"', svg).group(1)
    ys = [float(p.split(",")[1]) for p in points.split()]
    # SVG y grows downwards, so a nondecreasing curve has nonincreasing y
    assert all(b <= a + 1e-9 for a, b in zip(ys, ys[1:]))


def test_plot_rejects_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("policy,t\nx,1\n")
    assert main(["plot", "--aggregate", str(bad), "--out", str(tmp_path / "p.svg")]) == 1
    bad.write_text("policy,t,mean_cum_regret\nx,one,2\n")
    assert main(["plot", "--aggregate", str(bad), "--out", str(tmp_path / "p.svg")]) == 1
    assert not (tmp_path / "p.svg").exists()


def test_cts_final_slope_exceeds_group_restarts(tmp_path):
    s = gen(tmp_path, "--K", "6", "--T", "3000", "--m", "2", "--changes", "1", "2", "--seed", "5")
    assert main(["run", "--scenario", str(s), "--policies", "cts,ps-sem-ucb-gr", "--reps", "3",
                 "--seed", "2", "--threads", "1", "--out", str(tmp_path / "r")]) == 0
    sc = Scenario.load(s)
    last = max(sc.dist_segments[-1].start, sc.graph_segments[-1][0])
    rows = read_rows(tmp_path / "r" / "aggregate.csv")
    series = {}
    for r in rows:
        series.setdefault(r["policy"], {})[int(r["t"])] = float(r["mean_cum_regret"])
    slope = {p: (v[sc.T] - v[last]) / (sc.T - last) for p, v in series.items()}
    assert slope["cts"] > slope["ps-sem-ucb-gr"]
