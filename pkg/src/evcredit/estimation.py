"""Exchange-value estimation from observed groups, and EV-Clustering.

The estimator is the size-stratified plug-in: for each observed group size,
the mean score of groups containing the agent minus the mean score of groups
without it, averaged over the sizes where both sides have data. Repeated
observations of the same group are averaged before stratifying, so a
complete observation set reproduces the exact constrained value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import FormatError, InestimableAgentError, InvalidKError
from .game import CharacteristicGame, Group, canonical, check_agent_id
from .records import fmt_float, format_record, iter_records, parse_float, parse_sizes, split_ids


@dataclass(frozen=True)
class GroupObservation:
    group: Group
    score: float
    traj: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "group", canonical(self.group))
        object.__setattr__(self, "score", float(self.score))
        if not self.group:
            raise ValueError("an observed group must be non-empty")
        if len(set(self.group)) != len(self.group):
            raise ValueError(f"group {self.group} repeats an agent")


class ObservationSet:
    """Agents, permitted sizes and a sequence of scored group observations.

    ``sizes=None`` infers the permitted sizes from the observations.
    """

    def __init__(
        self,
        agents: Sequence[str],
        observations: Iterable[GroupObservation] = (),
        sizes: Iterable[int] | None = None,
    ):
        self.agents = tuple(agents)
        for a in self.agents:
            check_agent_id(a)
        if len(set(self.agents)) != len(self.agents):
            raise ValueError("agent ids must be unique")
        self._index = {a: i for i, a in enumerate(self.agents)}
        self.observations = list(observations)
        for ob in self.observations:
            unknown = [a for a in ob.group if a not in self._index]
            if unknown:
                raise ValueError(f"observation references unknown agents {unknown}")
        if sizes is None:
            self.sizes = frozenset(len(ob.group) for ob in self.observations)
        else:
            self.sizes = frozenset(int(s) for s in sizes)
            bad = {len(ob.group) for ob in self.observations} - self.sizes
            if bad:
                raise ValueError(f"observed group sizes {sorted(bad)} not permitted")

    def __len__(self) -> int:
        return len(self.observations)

    def index(self, agent: str) -> int:
        return self._index[agent]

    @classmethod
    def from_game(cls, game: CharacteristicGame) -> "ObservationSet":
        """One observation per tabulated non-empty group."""
        obs = [GroupObservation(g, v) for g, v in sorted(game.values.items(), key=lambda kv: (len(kv[0]), kv[0])) if g]
        sizes = None if game.sizes is None else {s for s in game.sizes if s > 0}
        return cls(game.agents, obs, sizes)

    def subset(self, indices: Iterable[int]) -> "ObservationSet":
        return ObservationSet(self.agents, [self.observations[i] for i in indices], self.sizes)

    def mean_scores(self) -> dict[Group, float]:
        """Average score of each distinct observed group."""
        acc: dict[Group, list[float]] = {}
        for ob in self.observations:
            acc.setdefault(ob.group, []).append(ob.score)
        return {g: math.fsum(v) / len(v) for g, v in acc.items()}

    def to_game(self) -> CharacteristicGame:
        return CharacteristicGame(self.agents, self.mean_scores(), self.sizes)

    def csr(self, dedup: bool = False):
        """Membership in CSR form: ``(ptr, idx, sizes, scores)`` over agent positions."""
        if dedup:
            items = list(self.mean_scores().items())
        else:
            items = [(ob.group, ob.score) for ob in self.observations]
        return _csr([[self._index[a] for a in g] for g, _ in items], [s for _, s in items])

    def agent_csr(self):
        """Observation indices per agent in CSR form: ``(aptr, aidx)``."""
        lists: list[list[int]] = [[] for _ in self.agents]
        for o, ob in enumerate(self.observations):
            for a in ob.group:
                lists[self._index[a]].append(o)
        aptr = np.zeros(len(lists) + 1, dtype=np.int64)
        aptr[1:] = np.cumsum([len(x) for x in lists])
        aidx = np.fromiter((o for x in lists for o in x), dtype=np.int64, count=int(aptr[-1]))
        return aptr, aidx


def _csr(members: list[list[int]], scores: list[float]):
    ptr = np.zeros(len(members) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(m) for m in members])
    idx = np.fromiter((a for m in members for a in m), dtype=np.int64, count=int(ptr[-1]))
    sizes = np.array([len(m) for m in members], dtype=np.int64)
    return ptr, idx, sizes, np.asarray(scores, dtype=np.float64)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class AgentEstimate:
    """Estimate for one agent.

    ``n_incl``/``n_excl`` count the distinct groups used on each side, over
    the strata that entered the estimate. ``ev`` is NaN when inestimable.
    """

    agent: str
    ev: float
    n_incl: int
    n_excl: int
    stderr: float
    skipped_sizes: tuple[int, ...] = ()

    @property
    def estimable(self) -> bool:
        return not math.isnan(self.ev)


@dataclass
class EvReport:
    entries: dict[str, AgentEstimate]

    @property
    def agents(self) -> tuple[str, ...]:
        return tuple(self.entries)

    def __getitem__(self, agent: str) -> AgentEstimate:
        return self.entries[agent]

    def values(self) -> np.ndarray:
        return np.array([e.ev for e in self.entries.values()])

    def estimable(self) -> list[str]:
        return [a for a, e in self.entries.items() if e.estimable]

    def inestimable(self) -> list[str]:
        return [a for a, e in self.entries.items() if not e.estimable]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["agent", "ev", "n_incl", "n_excl", "stderr"])
            for e in self.entries.values():
                w.writerow([e.agent, fmt_float(e.ev), e.n_incl, e.n_excl, fmt_float(e.stderr)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "EvReport":
        entries = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"agent", "ev", "n_incl", "n_excl", "stderr"} <= set(reader.fieldnames):
                raise FormatError(f"{path}: expected columns agent,ev,n_incl,n_excl,stderr")
            for row in reader:
                try:
                    entries[row["agent"]] = AgentEstimate(
                        row["agent"], float(row["ev"]), int(row["n_incl"]), int(row["n_excl"]), float(row["stderr"])
                    )
                except ValueError as exc:
                    raise FormatError(f"{path}: bad row {row}") from exc
        return cls(entries)


def _stratified_estimates(labels, ptr, idx, sizes, scores, n_units):
    """Stratified difference-of-means estimates for every unit at once."""
    n_sizes = int(sizes.max()) + 1 if sizes.size else 1
    in_sum, in_sq, in_cnt, tot_sum, tot_sq, tot_cnt = kernels.group_strata(
        ptr, idx, sizes, scores, n_units, n_sizes
    )
    ex_cnt = tot_cnt[None, :] - in_cnt
    ex_sum = tot_sum[None, :] - in_sum
    ex_sq = tot_sq[None, :] - in_sq
    present = tot_cnt > 0
    out = {}
    for u, label in enumerate(labels):
        use = (in_cnt[u] > 0) & (ex_cnt[u] > 0)
        skipped = tuple(int(s) for s in np.flatnonzero(present & ~use))
        if not use.any():
            out[label] = AgentEstimate(label, math.nan, 0, 0, math.nan, skipped)
            continue
        ni, ne = in_cnt[u, use], ex_cnt[u, use]
        mi, me = in_sum[u, use] / ni, ex_sum[u, use] / ne
        ev = float(np.mean(mi - me))
        if (ni < 2).any() or (ne < 2).any():
            se = math.nan
        else:
            vi = np.maximum(in_sq[u, use] - ni * mi**2, 0.0) / (ni - 1)
            ve = np.maximum(ex_sq[u, use] - ne * me**2, 0.0) / (ne - 1)
            se = float(math.sqrt(np.sum(vi / ni + ve / ne)) / use.sum())
        out[label] = AgentEstimate(label, ev, int(ni.sum()), int(ne.sum()), se, skipped)
    return out


def estimate_all(obs: ObservationSet) -> EvReport:
    """Plug-in estimate for every agent; inestimable agents carry ``ev=nan``."""
    if len(obs) == 0:
        return EvReport({a: AgentEstimate(a, math.nan, 0, 0, math.nan) for a in obs.agents})
    ptr, idx, sizes, scores = obs.csr(dedup=True)
    return EvReport(_stratified_estimates(obs.agents, ptr, idx, sizes, scores, len(obs.agents)))


def estimate_ev(obs: ObservationSet, agent: str) -> AgentEstimate:
    """Plug-in estimate for one agent.

    Raises:
        InestimableAgentError: no group size has observations both with and
            without ``agent``.
    """
    if agent not in obs.agents:
        raise KeyError(agent)
    est = estimate_all(obs)[agent]
    if not est.estimable:
        raise InestimableAgentError(f"agent {agent!r} has no stratum with both including and excluding groups")
    return est


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterAssignment:
    agents: tuple[str, ...]
    labels: np.ndarray
    k: int
    objective: float | None = field(default=None, compare=False)
    variance: float | None = field(default=None, compare=False)

    def __post_init__(self):
        self.agents = tuple(self.agents)
        self.labels = np.asarray(self.labels, dtype=np.int64).copy()
        if self.labels.shape != (len(self.agents),):
            raise ValueError("one cluster label per agent required")
        if self.k < 1:
            raise InvalidKError("k must be at least 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"cluster labels must lie in 0..{self.k - 1}")
        if not self.labels.size:
            raise ValueError("an assignment needs at least one agent")

    @classmethod
    def from_mapping(cls, mapping: dict[str, int], k: int | None = None) -> "ClusterAssignment":
        agents = tuple(mapping)
        labels = np.array([mapping[a] for a in agents])
        return cls(agents, labels, int(labels.max()) + 1 if k is None else k)

    def __getitem__(self, agent: str) -> int:
        return int(self.labels[self.agents.index(agent)])

    def as_dict(self) -> dict[str, int]:
        return {a: int(c) for a, c in zip(self.agents, self.labels)}

    def aligned(self, agents: Sequence[str]) -> np.ndarray:
        m = self.as_dict()
        try:
            return np.array([m[a] for a in agents], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"assignment does not cover agent {exc.args[0]!r}") from None

    def canonical_labels(self) -> tuple[int, ...]:
        """Labels renumbered by first appearance, for comparing partitions."""
        remap: dict[int, int] = {}
        return tuple(remap.setdefault(int(c), len(remap)) for c in self.labels)

    def same_partition(self, other: "ClusterAssignment") -> bool:
        return self.agents == other.agents and self.canonical_labels() == other.canonical_labels()

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["agent", "cluster"])
            for a, c in zip(self.agents, self.labels):
                w.writerow([a, int(c)])

    @classmethod
    def from_csv(cls, path: str | Path, k: int | None = None) -> "ClusterAssignment":
        mapping = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"agent", "cluster"} <= set(reader.fieldnames):
                raise FormatError(f"{path}: expected columns agent,cluster")
            for row in reader:
                try:
                    mapping[row["agent"]] = int(row["cluster"])
                except ValueError as exc:
                    raise FormatError(f"{path}: bad row {row}") from exc
        if not mapping:
            raise FormatError(f"{path}: no rows")
        return cls.from_mapping(mapping, k)


def cluster_label(c: int) -> str:
    return f"c{c}"


def _images(obs: ObservationSet, u: ClusterAssignment, multiset: bool):
    lab = u.aligned(obs.agents)
    out = []
    for ob in obs.observations:
        cl = [int(lab[obs.index(a)]) for a in ob.group]
        out.append(tuple(sorted(cl)) if multiset else tuple(sorted(set(cl))))
    return out


def _image_means(obs, u, multiset):
    acc: dict[tuple[int, ...], list[float]] = {}
    for img, ob in zip(_images(obs, u, multiset), obs.observations):
        acc.setdefault(img, []).append(ob.score)
    return {img: math.fsum(v) / len(v) for img, v in acc.items()}


def clustered_value(obs: ObservationSet, u: ClusterAssignment) -> CharacteristicGame:
    """Clustered game over cluster labels ``c0..c{k-1}``.

    Each observation maps to the set of clusters its members occupy; the
    value of a realized cluster set is the mean score of the observations
    mapping to it. Unrealized sets are absent; the permitted sizes are the
    realized image sizes.
    """
    means = _image_means(obs, u, multiset=False)
    labels = tuple(cluster_label(c) for c in range(u.k))
    values = {tuple(cluster_label(c) for c in img): v for img, v in means.items()}
    return CharacteristicGame(labels, values, frozenset(len(img) for img in means))


def cluster_level_ev(obs: ObservationSet, u: ClusterAssignment, multiset: bool = False) -> EvReport:
    """Stratified estimates for each cluster label on the clustered game.

    With ``multiset=True`` images keep member multiplicity: strata are the
    group sizes and a cluster is "included" when any member belongs to it.
    If only one cluster holds agents, every cluster gets EV 0.
    """
    labels = tuple(cluster_label(c) for c in range(u.k))
    counts = np.bincount(u.labels, minlength=u.k)
    if np.count_nonzero(counts) == 1:
        return EvReport({lab: AgentEstimate(lab, 0.0, 0, 0, math.nan) for lab in labels})
    means = _image_means(obs, u, multiset)
    if not means:
        return EvReport({lab: AgentEstimate(lab, math.nan, 0, 0, math.nan) for lab in labels})
    members = [sorted(set(img)) for img in means]
    ptr, idx, _, scores = _csr(members, list(means.values()))
    sizes = np.array([len(img) for img in means], dtype=np.int64)
    return EvReport(_stratified_estimates(labels, ptr, idx, sizes, scores, u.k))


def clustered_ev(obs: ObservationSet, u: ClusterAssignment, multiset: bool = False) -> EvReport:
    """Per-agent EVs inherited from each agent's cluster on the clustered game."""
    level = cluster_level_ev(obs, u, multiset)
    lab = u.aligned(obs.agents)
    entries = {}
    for a, c in zip(obs.agents, lab):
        e = level[cluster_label(int(c))]
        entries[a] = AgentEstimate(a, e.ev, e.n_incl, e.n_excl, e.stderr, e.skipped_sizes)
    return EvReport(entries)


def ev_variance(report: EvReport) -> float:
    """Population variance of the estimable agents' EVs (0 if none)."""
    v = report.values()
    v = v[~np.isnan(v)]
    return float(np.var(v)) if v.size else 0.0


def _search_inputs(obs: ObservationSet):
    ptr, idx, _, scores = obs.csr(dedup=False)
    aptr, aidx = obs.agent_csr()
    return ptr, idx, scores, aptr, aidx


def cluster_objective(
    obs: ObservationSet, u: ClusterAssignment, init: ClusterAssignment | None = None, penalty: float = 0.0
) -> tuple[int, float, float]:
    """``(agents in inestimable clusters, penalized objective, EV variance)``.

    ``penalty`` is in objective units (already scaled).
    """
    ptr, idx, scores, _, _ = _search_inputs(obs)
    lab = u.aligned(obs.agents)
    ini = lab if init is None else init.aligned(obs.agents)
    return kernels.cluster_objective(lab, u.k, ptr, idx, scores, ini, penalty)


def _random_surjective(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    u = rng.integers(0, k, size=n)
    u[rng.permutation(n)[:k]] = np.arange(k)
    return u


def ev_cluster_search(
    obs: ObservationSet,
    k: int,
    restarts: int = 500,
    init: ClusterAssignment | None = None,
    penalty_weight: float = 0.0,
    seed: int = 0,
    perturb: float = 0.1,
    penalty_scale: str = "score-var-per-agent",
    max_sweeps: int = 1000,
) -> ClusterAssignment:
    """Hill-climbing search for the assignment maximizing clustered-EV variance.

    The objective is the variance over agents of their clustered EVs minus
    ``penalty_weight`` times the fraction of agents whose cluster differs
    from ``init``. ``penalty_scale`` sets the unit of the weight:
    ``"score-var-per-agent"`` charges ``penalty_weight`` times the score
    variance for each agent moved off its init cluster, ``"score-var"``
    charges that amount for moving all of them, and ``"none"`` uses the
    weight as given. Assignments leaving fewer agents in inestimable
    clusters always rank higher.

    Restart ``r`` draws from ``default_rng([seed, r])``. With ``init`` the
    first restart climbs from ``init`` itself and later ones from ``init``
    with each agent reassigned at random with probability ``perturb``;
    otherwise starts are uniform random assignments using all ``k``
    clusters. The best result wins, ties going to the earliest restart.
    """
    n = len(obs.agents)
    if k < 1 or k > n:
        raise InvalidKError(f"k={k} must lie in 1..{n}")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    ptr, idx, scores, aptr, aidx = _search_inputs(obs)
    if init is not None:
        ini = init.aligned(obs.agents)
        if ini.max() >= k:
            raise InvalidKError(f"init uses cluster {int(ini.max())} but k={k}")
    else:
        ini = np.zeros(n, dtype=np.int64)
        penalty_weight = 0.0
    if penalty_scale not in ("score-var-per-agent", "score-var", "none"):
        raise ValueError(f"unknown penalty scale {penalty_scale!r}")
    pen = float(penalty_weight)
    if penalty_scale != "none" and pen and scores.size:
        pen *= float(np.var(scores))
        if penalty_scale == "score-var-per-agent":
            pen *= n

    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        if init is None:
            start = _random_surjective(rng, n, k)
        elif r == 0:
            start = ini.copy()
        else:
            start = ini.copy()
            flip = rng.random(n) < perturb
            start[flip] = rng.integers(0, k, size=int(flip.sum()))
        u, _ = kernels.climb(start, k, ptr, idx, scores, aptr, aidx, ini, pen, max_sweeps)
        inv, val, var = kernels.cluster_objective(u, k, ptr, idx, scores, ini, pen)
        if best is None or inv < best[0] or (inv == best[0] and val > best[1] + 1e-12 * (1.0 + abs(best[1]))):
            best = (inv, val, var, u)
    inv, val, var, u = best
    return ClusterAssignment(obs.agents, u, k, objective=val, variance=var)


# ---------------------------------------------------------------------------
# text format


def dumps_observations(obs: ObservationSet) -> str:
    lines = [format_record({"agents": ",".join(obs.agents), "sizes": ",".join(str(s) for s in sorted(obs.sizes))})]
    for ob in obs.observations:
        rec: dict[str, object] = {"group": ",".join(ob.group), "score": fmt_float(ob.score)}
        if ob.traj is not None:
            rec["traj"] = ob.traj
        lines.append(format_record(rec))
    return "\n".join(lines) + "\n"


def loads_observations(text: str) -> ObservationSet:
    agents = None
    sizes = None
    obs = []
    for lineno, rec in iter_records(text.splitlines()):
        if "agents" in rec:
            agents = split_ids(rec["agents"])
            if rec.get("sizes"):
                sizes = parse_sizes(rec["sizes"])
            continue
        if "group" not in rec or "score" not in rec:
            raise FormatError(f"line {lineno}: expected group= and score= fields")
        try:
            obs.append(GroupObservation(split_ids(rec["group"]), parse_float(rec["score"], lineno), rec.get("traj")))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    if agents is None:
        agents = tuple(sorted({a for ob in obs for a in ob.group}))
    try:
        return ObservationSet(agents, obs, sizes)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_observations(obs: ObservationSet, path: str | Path) -> None:
    Path(path).write_text(dumps_observations(obs))


def load_observations(path: str | Path) -> ObservationSet:
    return loads_observations(Path(path).read_text())


def complete_observations(agents: Sequence[str], fn, size: int) -> ObservationSet:
    """Every size-``size`` group once, scored by ``fn``."""
    obs = [GroupObservation(g, fn(canonical(g))) for g in combinations(agents, size)]
    return ObservationSet(agents, obs, {size})
