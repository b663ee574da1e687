import os
import subprocess
import sys

import numpy as np
import pytest

from evcredit import kernels as K
from evcredit.estimation import GroupObservation, ObservationSet

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def random_obs(rng, n=10, groups=40, size=3):
    agents = tuple(f"a{i}" for i in range(n))
    return ObservationSet(agents, [GroupObservation(tuple(rng.choice(agents, size, replace=False)), float(rng.normal())) for _ in range(groups)])


def test_popcounts():
    assert K.popcounts(3).tolist() == [0, 1, 1, 2, 1, 2, 2, 3]


@needs_numba
def test_shapley_backends_agree(rng):
    n = 7
    vals = rng.normal(size=1 << n)
    w = rng.random(n)
    assert np.allclose(K._shapley_nb(vals, n, w), K._shapley_np(vals, n, w), atol=1e-12)


@needs_numba
def test_table_strata_backends_agree(rng):
    n = 6
    vals = rng.normal(size=1 << n)
    ok = np.array([False, True, False, True, True, False, False])
    for x, y in zip(K._table_strata_nb(vals, n, ok), K._table_strata_np(vals, n, ok)):
        assert np.allclose(x, y, atol=1e-12)


@needs_numba
def test_group_strata_backends_agree(rng):
    obs = random_obs(rng)
    ptr, idx, sizes, scores = obs.csr(dedup=False)
    a = K._group_strata_nb(ptr, idx, sizes, scores, 10, 4)
    b = K._group_strata_np(ptr, idx, sizes, scores, 10, 4)
    for x, y in zip(a, b):
        assert np.allclose(x, y, atol=1e-12)


@needs_numba
@pytest.mark.parametrize("penalty", [0.0, 0.7])
def test_objective_and_climb_backends_agree(rng, penalty):
    obs = random_obs(rng, n=12, groups=50)
    ptr, idx, _, scores = obs.csr(dedup=False)
    aptr, aidx = obs.agent_csr()
    k = 4
    init = rng.integers(0, k, 12)
    for _ in range(5):
        u = rng.integers(0, k, 12)
        args = K._prep(u, ptr, idx, scores, init)
        a = K._objective_nb(args[0], k, *args[1:], penalty)
        b = K._objective_np(args[0], k, *args[1:], penalty)
        assert a[0] == b[0]
        assert a[1] == pytest.approx(b[1], rel=1e-10, abs=1e-12)
        assert a[2] == pytest.approx(b[2], rel=1e-10, abs=1e-12)
    u0 = np.array([0, 1, 2, 3] * 3)
    args = K._prep(u0, ptr, idx, scores, init)
    ua, sa = K._climb_nb(args[0], k, args[1], args[2], args[3], aptr, aidx, args[4], penalty, 1000, 1e-12)
    ub, sb = K._climb_np(args[0], k, args[1], args[2], args[3], aptr, aidx, args[4], penalty, 1000, 1e-12)
    assert ua.tolist() == ub.tolist() and sa == sb


SCRIPT = """
import numpy as np
from evcredit import kernels, estimation as E, game as G
rng = np.random.default_rng(0)
agents = tuple(f"a{i}" for i in range(9))
obs = E.ObservationSet(agents, [E.GroupObservation(tuple(rng.choice(agents, 3, replace=False)), float(rng.normal())) for _ in range(30)])
u = E.ev_cluster_search(obs, 3, restarts=5, seed=1)
g = G.CharacteristicGame.from_function(agents[:6], lambda c: float(len(c) ** 2 + ("a0" in c)))
print(kernels.backend())
print(u.labels.tolist())
print(repr(u.objective))
print([repr(float(x)) for x in E.estimate_all(obs).values()])
print([repr(float(x)) for x in G.shapley_exact(g).values])
"""


def _run(disable):
    env = dict(os.environ)
    env.pop(K.DISABLE_ENV, None)
    if disable:
        env[K.DISABLE_ENV] = "1"
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return out.stdout.splitlines()


def test_climb_rejects_mismatched_index():
    ptr = np.array([0, 2])
    idx = np.array([0, 1])
    with pytest.raises(ValueError):
        K.climb(np.array([0, 1]), 2, ptr, idx, np.array([1.0]), np.array([0, 1, 2]), np.array([0, 5]), np.zeros(2), 0.0)


def test_fallback_flag_same_results():
    fast, slow = _run(False), _run(True)
    assert slow[0] == "numpy"
    if K.HAVE_NUMBA:
        assert fast[0] == "numba"
    assert fast[1] == slow[1]
    for a, b in zip(fast[2:], slow[2:]):
        fa = np.array(eval(a.replace("nan", "float('nan')")), dtype=float)
        fb = np.array(eval(b.replace("nan", "float('nan')")), dtype=float)
        assert np.allclose(fa, fb, rtol=1e-9, atol=1e-12, equal_nan=True)
