"""Tabular behavior cloning: plain, trajectory-filtered (Group-BC) and EV-selected (EV2BC)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyReportError, FormatError, NoDataError
from .estimation import EvReport
from .records import fmt_float, format_record, iter_records
from .toc import Dataset, Discretizer, Dvf, TocConfig, score, simulate


@dataclass
class TabularPolicy:
    """Action distribution per discrete state, with a fallback for unseen states."""

    table: dict[int, np.ndarray]
    fallback: np.ndarray

    def __post_init__(self):
        for key, p in list(self.table.items()) + [("fallback", self.fallback)]:
            p = np.asarray(p, dtype=np.float64)
            if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"distribution for state {key} is not a probability vector")

    @property
    def n_actions(self) -> int:
        return self.fallback.shape[0]

    def dist(self, state: int) -> np.ndarray:
        return self.table.get(int(state), self.fallback)

    def dumps(self) -> str:
        lines = [format_record({"state": "*", "probs": ",".join(fmt_float(p) for p in self.fallback)})]
        for s in sorted(self.table):
            lines.append(format_record({"state": s, "probs": ",".join(fmt_float(p) for p in self.table[s])}))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TabularPolicy":
        table, fallback = {}, None
        for lineno, rec in iter_records(text.splitlines()):
            try:
                probs = np.array([float(x) for x in rec["probs"].split(",")])
                if rec["state"] == "*":
                    fallback = probs
                else:
                    table[int(rec["state"])] = probs
            except (KeyError, ValueError) as exc:
                raise FormatError(f"line {lineno}: bad policy record") from exc
        if fallback is None:
            raise FormatError("policy has no fallback record (state=*)")
        try:
            return cls(table, fallback)
        except ValueError as exc:
            raise FormatError(str(exc)) from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "TabularPolicy":
        return cls.loads(Path(path).read_text())


@dataclass(frozen=True)
class SelectionRule:
    """EV threshold: an absolute value or a percentile of the estimable EVs.

    ``method`` is the percentile convention: ``"linear"`` interpolates
    between order statistics, ``"nearest-rank"`` takes the smallest sample
    with at least p% of samples at or below it. A percentile of 0 always
    resolves to minus infinity so that every estimable agent passes.
    """

    kind: str = "percentile"
    value: float = 90.0
    method: str = "linear"

    def __post_init__(self):
        if self.kind not in ("percentile", "absolute"):
            raise ValueError(f"unknown threshold kind {self.kind!r}")
        if self.kind == "percentile" and not 0.0 <= self.value <= 100.0:
            raise ValueError("percentile must lie in [0, 100]")
        if self.method not in ("linear", "nearest-rank"):
            raise ValueError(f"unknown percentile method {self.method!r}")


def resolve_percentile(values: Sequence[float], p: float, method: str = "linear") -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise NoDataError("no values")
    if p <= 0:
        return -math.inf
    if method == "nearest-rank":
        return float(v[max(math.ceil(p / 100.0 * v.size), 1) - 1])
    return float(np.percentile(v, p))


def select_agents(report: EvReport, rule: SelectionRule) -> set[str]:
    """Estimable agents whose EV is strictly above the resolved threshold."""
    est = {a: report[a].ev for a in report.estimable()}
    if not est:
        raise EmptyReportError("no estimable agents in the report")
    if rule.kind == "absolute":
        c = rule.value
    else:
        c = resolve_percentile(list(est.values()), rule.value, rule.method)
    return {a for a, ev in est.items() if ev > c}


# ---------------------------------------------------------------------------
# fitting


def fit_pairs(pairs: Iterable[tuple[np.ndarray, np.ndarray]], n_actions: int) -> TabularPolicy:
    """Per-state empirical action distribution; fallback is the overall marginal."""
    counts: dict[int, np.ndarray] = {}
    total = np.zeros(n_actions)
    for s, a in pairs:
        s = np.asarray(s, dtype=np.int64)
        a = np.asarray(a, dtype=np.int64)
        for st in np.unique(s):
            row = counts.setdefault(int(st), np.zeros(n_actions))
            row += np.bincount(a[s == st], minlength=n_actions)
        total += np.bincount(a, minlength=n_actions)
    if total.sum() == 0:
        raise NoDataError("no (state, action) pairs admitted")
    return TabularPolicy({s: c / c.sum() for s, c in counts.items()}, total / total.sum())


def _pairs(ds: Dataset, disc: Discretizer, keep_obs=None, keep_agent=None):
    for o, ob in enumerate(ds.obs.observations):
        if keep_obs is not None and not keep_obs(o):
            continue
        traj = ds.trajectories[ob.traj]
        for seat, agent in enumerate(traj.participants):
            if keep_agent is None or keep_agent(agent):
                yield disc.encode(traj, seat)


def fit_bc(ds: Dataset, agents: Iterable[str] | None = None, disc: Discretizer | None = None) -> TabularPolicy:
    """Behavior cloning on every pair authored by ``agents`` (default: everyone).

    Pairs from trajectories shared with unselected agents are still used.
    """
    disc = disc or Discretizer(ds.cfg.x0)
    keep = None
    if agents is not None:
        admitted = set(agents)
        keep = admitted.__contains__
    return fit_pairs(_pairs(ds, disc, keep_agent=keep), disc.n_actions)


def fit_group_bc(
    ds: Dataset, percentile: float = 90.0, disc: Discretizer | None = None, method: str = "linear"
) -> TabularPolicy:
    """Behavior cloning on whole trajectories scoring strictly above a score percentile."""
    disc = disc or Discretizer(ds.cfg.x0)
    scores = [ob.score for ob in ds.obs.observations]
    if not scores:
        raise NoDataError("dataset has no observations")
    c = resolve_percentile(scores, percentile, method)
    kept = {o for o, s in enumerate(scores) if s > c}
    if not kept:
        raise NoDataError(f"no trajectory scores above the cutoff {c!r}")
    return fit_pairs(_pairs(ds, disc, keep_obs=kept.__contains__), disc.n_actions)


def fit_ev2bc(ds: Dataset, report: EvReport, rule: SelectionRule, disc: Discretizer | None = None) -> TabularPolicy:
    sel = select_agents(report, rule)
    if not sel:
        raise EmptyReportError("selection rule admits no agent")
    return fit_bc(ds, sel, disc)


# ---------------------------------------------------------------------------
# evaluation


def rollout_policy(policy: TabularPolicy, cfg: TocConfig, rng: np.random.Generator, disc: Discretizer | None = None):
    """One episode with every seat sampling from ``policy``."""
    disc = disc or Discretizer(cfg.x0)
    m = cfg.group_size
    cum = {}

    def demands(t, pool, prev):
        s = disc.state(pool)
        if s not in cum:
            c = np.cumsum(policy.dist(s))
            cum[s] = c / c[-1]
        acts = np.minimum(np.searchsorted(cum[s], rng.random(m), side="right"), policy.n_actions - 1)
        amt = disc.amounts(pool)
        return amt[acts]

    return simulate(demands, [f"seat{j}" for j in range(m)], cfg)


def evaluate_policy(
    policy: TabularPolicy,
    cfg: TocConfig,
    dvf: Dvf | str,
    episodes: int = 5,
    seed: int = 0,
    disc: Discretizer | None = None,
) -> tuple[float, float]:
    """Mean and (population) standard deviation of the DVF over seeded episodes.

    Episode ``e`` samples actions from ``default_rng([seed, e])``.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    vals = np.array(
        [score(rollout_policy(policy, cfg, np.random.default_rng([seed, e]), disc), dvf) for e in range(episodes)]
    )
    return float(vals.mean()), float(vals.std())


RESULT_COLUMNS = ("method", "dvf", "mean", "sd", "episodes", "seed")


def write_results(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r["method"], Dvf(r["dvf"]).value, fmt_float(r["mean"]), fmt_float(r["sd"]), int(r["episodes"]), int(r["seed"])])
