import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evcredit.errors import EmptyReportError, FormatError, NoDataError
from evcredit.estimation import AgentEstimate, EvReport, estimate_all
from evcredit.imitation import (
    SelectionRule,
    TabularPolicy,
    evaluate_policy,
    fit_bc,
    fit_ev2bc,
    fit_group_bc,
    fit_pairs,
    resolve_percentile,
    select_agents,
    write_results,
)
from evcredit.toc import Discretizer, TocConfig, generate_dataset, standard_pool

SMALL = TocConfig(horizon=12)


def report(evs):
    return EvReport(
        {a: AgentEstimate(a, v, 1, 1, math.nan) if v is not None else AgentEstimate(a, math.nan, 0, 0, math.nan) for a, v in evs.items()}
    )


def constant_policy(action, n=12):
    p = np.zeros(n)
    p[action] = 1.0
    return TabularPolicy({}, p)


def same(p, q):
    return set(p.table) == set(q.table) and all(np.allclose(p.table[s], q.table[s]) for s in p.table) and np.allclose(p.fallback, q.fallback)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(standard_pool(), 40, SMALL, seed=3)


class TestSelection:
    def test_absolute(self):
        r = report({"a": 1.0, "b": 5.0, "c": None, "d": 3.0})
        assert select_agents(r, SelectionRule("absolute", 2.0)) == {"b", "d"}

    def test_percentile(self):
        r = report({f"a{i}": float(i) for i in range(10)})
        assert select_agents(r, SelectionRule("percentile", 90)) == {"a9"}
        assert select_agents(r, SelectionRule("percentile", 0)) == set(r.agents)
        assert select_agents(r, SelectionRule("percentile", 100)) == set()

    def test_percentile_conventions(self):
        v = [1.0, 2.0, 3.0, 4.0]
        assert resolve_percentile(v, 50) == 2.5
        assert resolve_percentile(v, 50, "nearest-rank") == 2.0
        assert resolve_percentile(v, 90, "nearest-rank") == 4.0
        assert resolve_percentile(v, 0) == -math.inf

    def test_empty_report(self):
        with pytest.raises(EmptyReportError):
            select_agents(report({"a": None}), SelectionRule())

    def test_rule_validation(self):
        with pytest.raises(ValueError):
            SelectionRule("percentile", 120)
        with pytest.raises(ValueError):
            SelectionRule("median")

    @settings(max_examples=60)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0, 100), st.floats(0, 100))
    def test_monotone(self, vals, p, q):
        r = report({f"a{i}": v for i, v in enumerate(vals)})
        lo, hi = sorted((p, q))
        assert select_agents(r, SelectionRule("percentile", hi)) <= select_agents(r, SelectionRule("percentile", lo))


class TestFit:
    def test_empirical_counts(self):
        pol = fit_pairs([(np.array([0, 0, 0, 1]), np.array([1, 1, 2, 0]))], 3)
        assert pol.table[0].tolist() == pytest.approx([0, 2 / 3, 1 / 3])
        assert pol.table[1].tolist() == [1, 0, 0]
        assert pol.fallback.tolist() == [0.25, 0.5, 0.25]
        assert pol.dist(7) is pol.fallback

    def test_no_pairs(self):
        with pytest.raises(NoDataError):
            fit_pairs([], 3)

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=1, max_size=40), st.integers(0, 2**32 - 1))
    def test_maximizes_likelihood(self, pairs, seed):
        s = np.array([p[0] for p in pairs])
        a = np.array([p[1] for p in pairs])
        pol = fit_pairs([(s, a)], 5)

        def ll(table):
            return sum(math.log(max(table[int(si)][int(ai)], 1e-300)) for si, ai in zip(s, a))

        best = ll(pol.table)
        rng = np.random.default_rng(seed)
        for _ in range(5):
            other = {k: 0.7 * v + 0.3 * rng.dirichlet(np.ones(5)) for k, v in pol.table.items()}
            assert ll(other) <= best + 1e-9

    def test_group_bc_zero_is_bc(self, ds):
        assert same(fit_group_bc(ds, 0), fit_bc(ds))

    def test_ev2bc_zero_is_bc(self, ds):
        rep = estimate_all(ds.obs)
        assert rep.inestimable() == []
        assert same(fit_ev2bc(ds, rep, SelectionRule("percentile", 0)), fit_bc(ds))

    def test_ev2bc_uses_only_selected(self, ds):
        rep = report({a: (10.0 if a == "TakeX-1" else 0.0) for a in ds.obs.agents})
        pol = fit_ev2bc(ds, rep, SelectionRule("absolute", 5.0))
        assert same(pol, fit_bc(ds, ["TakeX-1"]))
        assert pol.fallback[1] == 1.0

    def test_ev2bc_nothing_selected(self, ds):
        rep = report({a: 0.0 for a in ds.obs.agents})
        with pytest.raises(EmptyReportError):
            fit_ev2bc(ds, rep, SelectionRule("absolute", 1.0))

    def test_group_bc_strict_cutoff(self, ds):
        with pytest.raises(NoDataError):
            fit_group_bc(ds, 100)


class TestPolicyIo:
    def test_roundtrip(self, tmp_path, ds):
        pol = fit_bc(ds)
        pol.save(tmp_path / "p.txt")
        assert same(TabularPolicy.load(tmp_path / "p.txt"), pol)

    @pytest.mark.parametrize("text", ["state=0 probs=1\n", "state=* probs=0.5,0.2\n", "state=x probs=1\nstate=* probs=1\n"])
    def test_bad(self, text):
        with pytest.raises(FormatError):
            TabularPolicy.loads(text)

    def test_validates(self):
        with pytest.raises(ValueError):
            TabularPolicy({0: np.array([0.5, 0.4])}, np.array([1.0, 0.0]))


class TestEvaluate:
    def test_fixed_take_one(self):
        mean, sd = evaluate_policy(constant_policy(1), TocConfig(), "v_min", episodes=3)
        assert mean == 50.0 and sd == 0.0

    def test_zero_policy_final(self):
        cfg = TocConfig(horizon=4)
        mean, _ = evaluate_policy(constant_policy(0), cfg, "v_final", episodes=2)
        assert mean == pytest.approx(200 * 1.25**4)

    def test_seeded(self, ds):
        pol = fit_bc(ds)
        a = evaluate_policy(pol, SMALL, "v_total", episodes=4, seed=9)
        b = evaluate_policy(pol, SMALL, "v_total", episodes=4, seed=9)
        assert a == b
        with pytest.raises(ValueError):
            evaluate_policy(pol, SMALL, "v_total", episodes=0)

    def test_results_file(self, tmp_path):
        write_results([{"method": "bc", "dvf": "v_min", "mean": 1.5, "sd": 0.0, "episodes": 5, "seed": 0}], tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text() == "method,dvf,mean,sd,episodes,seed\nbc,v_min,1.5,0.0,5,0\n"
