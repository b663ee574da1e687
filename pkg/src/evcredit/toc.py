"""Tragedy-of-the-Commons simulator.

A shared pool grows by a fixed rate each step and the agents' consumption is
subtracted; once the pool hits zero it stays there. When total demand exceeds
the grown pool the pool is split in proportion to demand.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, GroupSizeError, InfeasibleError, InvalidActionError
from .estimation import GroupObservation, ObservationSet, load_observations, save_observations
from .records import fmt_float


@dataclass(frozen=True)
class TocConfig:
    growth: float = 0.25
    x0: float = 200.0
    horizon: int = 50
    group_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.growth > -1:
            raise ValueError("growth must exceed -1")
        if not self.x0 >= 0:
            raise ValueError("x0 must be non-negative")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.group_size < 1:
            raise ValueError("group_size must be at least 1")

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TocConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = (float if f.type in ("float", float) else int)(d[f.name])
        return cls(**kw)


class Kind(str, Enum):
    TAKE_X = "TakeX"
    TAKE_X_NO_DEPLETE = "TakeXNoDeplete"
    TAKE_PERCENT = "TakePercent"
    TAKE_AVG = "TakeAvg"


@dataclass(frozen=True)
class Archetype:
    kind: Kind
    x: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.x < 0:
            raise ValueError("archetype parameter must be non-negative")
        if self.kind is Kind.TAKE_PERCENT and self.x > 100:
            raise ValueError("TakePercent parameter is a percentage in 0..100")

    @property
    def label(self) -> str:
        if self.kind is Kind.TAKE_AVG:
            return self.kind.value
        return f"{self.kind.value}-{self.x:g}"


class Dvf(str, Enum):
    FINAL = "v_final"
    TOTAL = "v_total"
    MIN = "v_min"


@dataclass
class TocTrajectory:
    pool: np.ndarray  # (T+1,)
    consumption: np.ndarray  # (m, T)
    participants: tuple[str, ...]

    @property
    def horizon(self) -> int:
        return self.consumption.shape[1]


def step(pool: float, demands, cfg: TocConfig) -> tuple[float, np.ndarray]:
    """Grow the pool then serve demands, rationing proportionally if short."""
    d = np.asarray(demands, dtype=np.float64)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise InvalidActionError("demands must be non-negative numbers")
    if pool < 0:
        raise ValueError("pool must be non-negative")
    grown = (1.0 + cfg.growth) * pool
    total = float(d.sum())
    if total <= grown:
        return grown - total, d.copy()
    return 0.0, d * (grown / total)


def archetype_action(arch: Archetype, pool: float, others_prev_mean: float, t: int, cfg: TocConfig | None = None) -> float:
    """Demand of an archetype given the current (pre-growth) pool."""
    cfg = cfg or TocConfig()
    if arch.kind is Kind.TAKE_X:
        return arch.x
    if arch.kind is Kind.TAKE_X_NO_DEPLETE:
        grown = (1.0 + cfg.growth) * pool
        return arch.x if grown - arch.x > 0 else 0.0
    if arch.kind is Kind.TAKE_PERCENT:
        return arch.x / 100.0 * pool
    return 0.0 if t == 0 else float(others_prev_mean)


def simulate(
    demand_fn: Callable[[int, float, np.ndarray], np.ndarray],
    participants: Sequence[str],
    cfg: TocConfig,
) -> TocTrajectory:
    """Run the dynamics for ``cfg.horizon`` steps.

    ``demand_fn(t, pool, prev_actual)`` returns the seats' demands; at
    ``t=0`` ``prev_actual`` is all zeros.
    """
    m, T = len(participants), cfg.horizon
    pool = np.zeros(T + 1)
    cons = np.zeros((m, T))
    pool[0] = cfg.x0
    prev = np.zeros(m)
    for t in range(T):
        pool[t + 1], prev = step(pool[t], demand_fn(t, pool[t], prev), cfg)
        cons[:, t] = prev
    return TocTrajectory(pool, cons, tuple(participants))


def _others_mean(prev: np.ndarray) -> np.ndarray:
    m = prev.shape[0]
    if m == 1:
        return np.zeros(1)
    return (prev.sum() - prev) / (m - 1)


def rollout(group: Sequence[tuple[str, Archetype]], cfg: TocConfig) -> TocTrajectory:
    """Simulate a group of ``(agent id, archetype)`` seats."""
    if len(group) != cfg.group_size:
        raise GroupSizeError(f"group has {len(group)} agents, config expects {cfg.group_size}")
    archs = [a for _, a in group]

    def demands(t, pool, prev):
        om = _others_mean(prev)
        return np.array([archetype_action(a, pool, om[j], t, cfg) for j, a in enumerate(archs)])

    return simulate(demands, [i for i, _ in group], cfg)


def score(traj: TocTrajectory, dvf: Dvf | str) -> float:
    dvf = Dvf(dvf)
    if dvf is Dvf.FINAL:
        return float(traj.pool[-1])
    if dvf is Dvf.TOTAL:
        return float(traj.consumption.sum())
    return float(traj.consumption.sum(axis=1).min())


def standard_pool(replicas: int = 1) -> list[tuple[str, Archetype]]:
    """TakeX, TakeXNoDeplete and TakePercent with X in {1, 3, 10}, plus three TakeAvg.

    ``replicas > 1`` repeats the twelve agents with a ``.r<j>`` suffix.
    """
    base = [Archetype(k, x) for k in (Kind.TAKE_X, Kind.TAKE_X_NO_DEPLETE, Kind.TAKE_PERCENT) for x in (1, 3, 10)]
    base += [Archetype(Kind.TAKE_AVG)] * 3
    out = []
    for r in range(replicas):
        n_avg = 0
        for a in base:
            name = a.label
            if a.kind is Kind.TAKE_AVG:
                name = f"{name}-{n_avg}"
                n_avg += 1
            if replicas > 1:
                name = f"{name}.r{r}"
            out.append((name, a))
    return out


# ---------------------------------------------------------------------------
# discretization


ABS_ACTIONS = (0.0, 1.0, 2.0, 3.0, 5.0, 10.0)
PCT_ACTIONS = (1.0, 2.0, 3.0, 5.0, 10.0, 20.0)


@dataclass(frozen=True)
class Discretizer:
    """Pool-size bins and consumption-action bins.

    States: ``n_states`` equal-width bins over ``[0, 2 x0]``, clamped at the
    ends. Actions: fixed amounts plus percentages of the current pool. An
    observed consumption maps to the action whose amount is nearest in log
    scale; zero maps to action 0.
    """

    x0: float = 200.0
    n_states: int = 20
    abs_actions: tuple[float, ...] = ABS_ACTIONS
    pct_actions: tuple[float, ...] = PCT_ACTIONS

    @property
    def n_actions(self) -> int:
        return len(self.abs_actions) + len(self.pct_actions)

    def action_names(self) -> list[str]:
        return [f"abs{a:g}" for a in self.abs_actions] + [f"pct{p:g}" for p in self.pct_actions]

    def state(self, pool: float) -> int:
        hi = 2.0 * self.x0
        if hi <= 0:
            return 0
        return int(min(max(math.floor(pool / hi * self.n_states), 0), self.n_states - 1))

    def amounts(self, pool: float) -> np.ndarray:
        return np.array(list(self.abs_actions) + [p / 100.0 * pool for p in self.pct_actions])

    def amount(self, action: int, pool: float) -> float:
        return float(self.amounts(pool)[action])

    def action(self, consumed: float, pool: float) -> int:
        if consumed <= 0:
            return 0
        amt = self.amounts(pool)
        d = np.full(amt.shape, np.inf)
        pos = amt > 0
        d[pos] = np.abs(np.log(amt[pos]) - math.log(consumed))
        return int(np.argmin(d))

    def encode(self, traj: TocTrajectory, seat: int) -> tuple[np.ndarray, np.ndarray]:
        """(state, action) sequences of one seat, using the pre-step pool."""
        T = traj.horizon
        s = np.array([self.state(traj.pool[t]) for t in range(T)], dtype=np.int64)
        a = np.array([self.action(traj.consumption[seat, t], traj.pool[t]) for t in range(T)], dtype=np.int64)
        return s, a


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Observations plus the trajectories behind them.

    ``truth`` maps one-time ids to the hidden agent they stand for and is
    empty unless the dataset was anonymized.
    """

    obs: ObservationSet
    trajectories: dict[str, TocTrajectory]
    archetypes: dict[str, Archetype]
    cfg: TocConfig
    dvf: Dvf
    truth: dict[str, str] = field(default_factory=dict)

    @property
    def anonymized(self) -> bool:
        return bool(self.truth)

    def true_agent(self, agent: str) -> str:
        return self.truth.get(agent, agent)

    def rescore(self, dvf: Dvf | str) -> "Dataset":
        dvf = Dvf(dvf)
        obs = [GroupObservation(ob.group, score(self.trajectories[ob.traj], dvf), ob.traj) for ob in self.obs.observations]
        return Dataset(
            ObservationSet(self.obs.agents, obs, self.obs.sizes),
            self.trajectories, self.archetypes, self.cfg, dvf, self.truth,
        )

    def state_actions(self, disc: Discretizer | None = None) -> dict[str, list[tuple[np.ndarray, np.ndarray]]]:
        """Per observed agent id, its (states, actions) in every trajectory it joined."""
        disc = disc or Discretizer(self.cfg.x0)
        out: dict[str, list] = {a: [] for a in self.obs.agents}
        for ob in self.obs.observations:
            traj = self.trajectories[ob.traj]
            for seat, a in enumerate(traj.participants):
                out[a].append(disc.encode(traj, seat))
        return out


def generate_dataset(
    agent_pool: Sequence[tuple[str, Archetype]],
    num_groups: int | None,
    cfg: TocConfig,
    dvf: Dvf | str = Dvf.FINAL,
    anonymize: bool = False,
    complete: bool = False,
    seed: int | None = None,
) -> Dataset:
    """Roll out sampled groups and score them.

    With ``complete`` every size-``group_size`` group is rolled out once in
    lexicographic order. Otherwise ``num_groups`` groups are drawn, each
    uniformly without replacement, from ``default_rng(seed)`` (default
    ``cfg.seed``). With ``anonymize`` each appearance gets a fresh id and the
    mapping back to the pool is kept in ``Dataset.truth``.
    """
    dvf = Dvf(dvf)
    n, m = len(agent_pool), cfg.group_size
    if n < m:
        raise InfeasibleError(f"pool of {n} agents cannot fill groups of {m}")
    ids = [i for i, _ in agent_pool]
    if len(set(ids)) != n:
        raise ValueError("agent ids in the pool must be unique")
    if complete:
        draws = list(combinations(range(n), m))
    else:
        if num_groups is None or num_groups < 1:
            raise ValueError("num_groups must be at least 1")
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        draws = [tuple(sorted(rng.choice(n, size=m, replace=False).tolist())) for _ in range(num_groups)]
    # seat order follows sorted agent ids so that it matches the canonical group
    order = sorted(range(n), key=lambda i: ids[i])
    rank = {i: r for r, i in enumerate(order)}
    width = max(5, len(str(len(draws) * m)))
    trajs: dict[str, TocTrajectory] = {}
    obs = []
    truth: dict[str, str] = {}
    tw = max(4, len(str(len(draws))))
    for o, draw in enumerate(draws):
        seats = sorted(draw, key=lambda i: rank[i])
        traj = rollout([agent_pool[i] for i in seats], cfg)
        tid = f"t{o:0{tw}d}"
        if anonymize:
            anon = tuple(f"u{o * m + j:0{width}d}" for j in range(m))
            for a, i in zip(anon, seats):
                truth[a] = ids[i]
            traj.participants = anon
        trajs[tid] = traj
        obs.append(GroupObservation(traj.participants, score(traj, dvf), tid))
    agents = tuple(truth) if anonymize else tuple(ids)
    return Dataset(ObservationSet(agents, obs, {m}), trajs, dict(agent_pool), cfg, dvf, truth)


def save_dataset(ds: Dataset, out: str | Path) -> None:
    """Write ``observations.txt``, ``traj/<id>.csv``, ``agents.csv``, ``config.txt`` and, if anonymized, ``truth.csv``."""
    out = Path(out)
    (out / "traj").mkdir(parents=True, exist_ok=True)
    save_observations(ds.obs, out / "observations.txt")
    for tid, traj in ds.trajectories.items():
        with open(out / "traj" / f"{tid}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "pool"] + [f"c_{j}" for j in range(len(traj.participants))])
            w.writerow(["#participants", ""] + list(traj.participants))
            for t in range(traj.horizon + 1):
                c = [fmt_float(x) for x in traj.consumption[:, t]] if t < traj.horizon else [""] * len(traj.participants)
                w.writerow([t, fmt_float(traj.pool[t])] + c)
    with open(out / "agents.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "kind", "x"])
        for a, arch in ds.archetypes.items():
            w.writerow([a, arch.kind.value, fmt_float(arch.x)])
    if ds.truth:
        with open(out / "truth.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "agent"])
            for a, t in ds.truth.items():
                w.writerow([a, t])
    lines = [f"{k}={v}" for k, v in ds.cfg.to_dict().items()] + [f"dvf={ds.dvf.value}"]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def _read_traj(path: Path) -> TocTrajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or rows[1][0] != "#participants":
        raise FormatError(f"{path}: not a trajectory file")
    parts = tuple(rows[1][2:])
    body = rows[2:]
    try:
        pool = np.array([float(r[1]) for r in body])
        cons = np.array([[float(x) for x in r[2:]] for r in body[:-1]]).reshape(len(body) - 1, len(parts)).T
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: bad step record") from exc
    return TocTrajectory(pool, np.ascontiguousarray(cons), parts)


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    obs = load_observations(path / "observations.txt")
    kv = read_kv(path / "config.txt")
    try:
        cfg = TocConfig.from_dict(kv)
        dvf = Dvf(kv.get("dvf", Dvf.FINAL.value))
    except ValueError as exc:
        raise FormatError(f"{path}/config.txt: {exc}") from exc
    trajs = {}
    for ob in obs.observations:
        if ob.traj is not None and ob.traj not in trajs:
            trajs[ob.traj] = _read_traj(path / "traj" / f"{ob.traj}.csv")
    archetypes = {}
    with open(path / "agents.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            archetypes[row["agent"]] = Archetype(Kind(row["kind"]), float(row["x"]))
    truth = {}
    if (path / "truth.csv").exists():
        with open(path / "truth.csv", newline="") as fh:
            truth = {row["id"]: row["agent"] for row in csv.DictReader(fh)}
    return Dataset(obs, trajs, archetypes, cfg, dvf, truth)
