import csv
import filecmp

import numpy as np
import pytest

from evcredit.cli import main


def run(*args):
    return main([str(a) for a in args])


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen", "--out", d, "--groups", 60, "--horizon", 10, "--seed", 1) == 0
    return d


@pytest.fixture(scope="module")
def complete(tmp_path_factory):
    d = tmp_path_factory.mktemp("complete")
    assert run("gen", "--out", d, "--complete", "--horizon", 10, "--dvf", "v_total") == 0
    return d


def test_gen_layout(data):
    assert (data / "observations.txt").exists() and (data / "config.txt").exists()
    assert len(list((data / "traj").glob("*.csv"))) == 60


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    for d in (a, b):
        assert run("gen", "--out", d, "--groups", 10, "--horizon", 5, "--seed", 3, "--anonymize") == 0
    assert filecmp.cmp(a / "observations.txt", b / "observations.txt", shallow=False)
    assert filecmp.cmp(a / "truth.csv", b / "truth.csv", shallow=False)
    c = tmp_path / "c"
    c.mkdir()
    run("gen", "--out", c, "--groups", 10, "--horizon", 5, "--seed", 4, "--anonymize")
    assert (a / "observations.txt").read_text() != (c / "observations.txt").read_text()


def test_ev_modes(complete, tmp_path):
    assert run("ev", "--data", complete, "--mode", "exact", "--out", tmp_path) == 0
    exact = {r["agent"]: float(r["ev"]) for r in rows(tmp_path / "ev.csv")}
    assert run("ev", "--data", complete, "--mode", "estimate", "--out", tmp_path) == 0
    est = {r["agent"]: float(r["ev"]) for r in rows(tmp_path / "ev.csv")}
    assert exact.keys() == est.keys()
    assert all(abs(exact[a] - est[a]) < 1e-9 for a in exact)
    assert abs(sum(exact.values())) < 1e-6


def test_ev_exact_incomplete(data, tmp_path, capsys):
    assert run("ev", "--data", data, "--mode", "exact", "--out", tmp_path) == 3
    assert "missing" in capsys.readouterr().err


def test_ev_fraction_reproducible(complete, tmp_path):
    run("ev", "--data", complete, "--fraction", 0.5, "--out", tmp_path, "--seed", 2)
    first = (tmp_path / "ev.csv").read_text()
    run("ev", "--data", complete, "--fraction", 0.5, "--out", tmp_path, "--seed", 2)
    assert (tmp_path / "ev.csv").read_text() == first
    assert run("ev", "--data", complete, "--fraction", 1.5, "--out", tmp_path) == 1


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("groups=7\nhorizon=4\n")
    out = tmp_path / "o"
    out.mkdir()
    assert run("gen", "--config", cfg, "--out", out, "--groups", 5) == 0
    assert len(list((out / "traj").glob("*.csv"))) == 5
    assert "horizon=4" in (out / "config.txt").read_text()
    cfg.write_text("bogus=1\n")
    assert run("gen", "--config", cfg, "--out", out) == 1


@pytest.mark.parametrize(
    "argv, code",
    [
        (["gen", "--agents", "13"], 1),
        (["gen", "--out", "/nonexistent/dir"], 2),
        (["ev", "--data", "/nonexistent/dir"], 2),
        (["gen", "--horizon", "zero"], 1),
        (["frobnicate"], 1),
        (["error-study", "--agents", "24", "--seeds", "1"], 1),
    ],
)
def test_exit_codes(argv, code, tmp_path):
    if "--out" not in argv:
        argv = argv + ["--out", str(tmp_path)]
    assert main(argv) == code


def test_bad_k(data, tmp_path):
    assert run("cluster", "--data", data, "--k", 0, "--out", tmp_path) == 1
    assert run("cluster", "--data", data, "--k", 99, "--out", tmp_path) == 1


def test_empty_selection(data, tmp_path):
    run("ev", "--data", data, "--out", tmp_path)
    code = run("imitate", "--data", data, "--ev", tmp_path / "ev.csv", "--method", "ev2bc",
               "--threshold-kind", "absolute", "--threshold", 1e30, "--out", tmp_path)
    assert code == 4


def test_pipeline_composes(data, tmp_path):
    assert run("ev", "--data", data, "--out", tmp_path) == 0
    assert run("cluster", "--data", data, "--k", 3, "--restarts", 4, "--behavior", "--out", tmp_path) == 0
    assn = rows(tmp_path / "assignment.csv")
    assert len(assn) == 12 and {r["cluster"] for r in assn} <= {"0", "1", "2"}
    assert "behavior_init=true" in (tmp_path / "cluster_summary.txt").read_text()
    clus = tmp_path / "clus"
    clus.mkdir()
    assert run("ev", "--data", data, "--mode", "clustered", "--assignment", tmp_path / "assignment.csv", "--out", clus) == 0
    assert len(rows(clus / "ev.csv")) == 12
    assert run("imitate", "--data", data, "--ev", tmp_path / "ev.csv", "--out", tmp_path) == 0
    pols = sorted(p.name for p in tmp_path.glob("policy_*.txt"))
    assert pols == ["policy_bc.txt", "policy_ev2bc.txt", "policy_group-bc.txt"]
    assert run("eval", "--data", data, "--policy", tmp_path / "policy_bc.txt", "--policy", tmp_path / "policy_ev2bc.txt",
               "--episodes", 2, "--out", tmp_path) == 0
    res = rows(tmp_path / "results.csv")
    assert [r["method"] for r in res] == ["policy_bc", "policy_ev2bc"]
    assert all(r["dvf"] == "v_final" and r["episodes"] == "2" for r in res)
    # fitting inside eval gives the same numbers as evaluating the saved policy
    fit = tmp_path / "fit"
    fit.mkdir()
    assert run("eval", "--data", data, "--ev", tmp_path / "ev.csv", "--method", "bc", "--episodes", 2, "--out", fit) == 0
    assert rows(fit / "results.csv")[0]["mean"] == res[0]["mean"]


def test_error_study_small(tmp_path):
    assert run("error-study", "--fractions", "0.5,1.0", "--seeds", 1, "--restarts", 2, "--out", tmp_path) == 0
    res = rows(tmp_path / "error_study.csv")
    assert [r["regime"] for r in res] == ["observed", "observed", "degenerate", "degenerate-clustered"]
    assert float(res[1]["mean_abs_error"]) < 1e-6


@pytest.fixture(scope="module")
def anon(tmp_path_factory):
    d = tmp_path_factory.mktemp("anon")
    assert run("gen", "--out", d, "--groups", 60, "--anonymize") == 0
    return d


def test_degenerate_equal_credit(anon, tmp_path):
    assert run("ev", "--data", anon, "--out", tmp_path) == 0
    ev = {r["agent"]: r["ev"] for r in rows(tmp_path / "ev.csv")}
    from evcredit.toc import load_dataset

    for ob in load_dataset(anon).obs.observations:
        assert len({ev[a] for a in ob.group}) == 1


def test_subsample_has_stderr(complete, tmp_path):
    assert run("ev", "--data", complete, "--fraction", 0.25, "--out", tmp_path) == 0
    res = rows(tmp_path / "ev.csv")
    assert all(r["stderr"] not in ("", "nan") for r in res if r["ev"] != "nan")


def test_bc_equals_ev2bc_at_minus_infinity(data, tmp_path):
    run("ev", "--data", data, "--out", tmp_path)
    assert run("imitate", "--data", data, "--ev", tmp_path / "ev.csv", "--method", "ev2bc",
               "--threshold-kind", "absolute", "--threshold=-inf", "--out", tmp_path) == 0
    assert run("imitate", "--data", data, "--method", "bc", "--out", tmp_path) == 0
    assert (tmp_path / "policy_ev2bc.txt").read_text() == (tmp_path / "policy_bc.txt").read_text()


def test_behavior_cluster_recovers_archetypes(anon, tmp_path):
    import itertools

    from evcredit.toc import load_dataset

    assert run("cluster", "--data", anon, "--k", 10, "--restarts", 10, "--behavior", "--out", tmp_path) == 0
    lab = {r["agent"]: r["cluster"] for r in rows(tmp_path / "assignment.csv")}
    ds = load_dataset(anon)
    arch = {a: ds.archetypes[ds.true_agent(a)].label for a in lab}
    same, other = [], []
    for a, b in itertools.combinations(lab, 2):
        (same if arch[a] == arch[b] else other).append(lab[a] == lab[b])
    # agents of one archetype share a cluster far more often than unrelated agents
    assert np.mean(same) > 3 * np.mean(other)
