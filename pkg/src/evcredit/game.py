"""Characteristic-function games and their exact credit vectors.

Groups are stored as sorted tuples of agent ids. Internally a complete
table is laid out as a flat array indexed by bitmask over agent positions
(bit ``i`` set means ``game.agents[i]`` is a member).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import (
    CapacityError,
    FormatError,
    IncompleteGameError,
    NoFeasibleSizeError,
    UndefinedTransformError,
)
from .records import fmt_float, format_record, iter_records, parse_float, parse_sizes, split_ids

EXACT_LIMIT = 12

Group = tuple[str, ...]


def canonical(group: Iterable[str]) -> Group:
    return tuple(sorted(group))


def check_agent_id(agent: str) -> None:
    if not isinstance(agent, str) or not agent:
        raise ValueError(f"agent id must be a non-empty string, got {agent!r}")
    if "," in agent or "=" in agent or any(ch.isspace() for ch in agent):
        raise ValueError(f"agent id {agent!r} may not contain ',', '=' or whitespace")


@dataclass(frozen=True)
class CharacteristicGame:
    """Agents, optional permitted group sizes and group values.

    ``sizes=None`` means unconstrained: every subset is in the domain and the
    empty group is worth 0. The table may be partial; operations that need a
    complete table check for it and raise :class:`IncompleteGameError`.
    """

    agents: tuple[str, ...]
    values: Mapping[Group, float]
    sizes: frozenset[int] | None = None
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        agents = tuple(self.agents)
        if not agents:
            raise ValueError("a game needs at least one agent")
        for a in agents:
            check_agent_id(a)
        if len(set(agents)) != len(agents):
            raise ValueError("agent ids must be unique")
        index = {a: i for i, a in enumerate(agents)}
        n = len(agents)
        sizes = None
        if self.sizes is not None:
            sizes = frozenset(int(s) for s in self.sizes)
            bad = [s for s in sizes if s < 0 or s > n]
            if bad:
                raise ValueError(f"permitted sizes {sorted(bad)} outside 0..{n}")
        values: dict[Group, float] = {}
        for group, value in self.values.items():
            key = canonical(group)
            if len(set(key)) != len(key):
                raise ValueError(f"group {group!r} repeats an agent")
            unknown = [a for a in key if a not in index]
            if unknown:
                raise ValueError(f"group {group!r} has unknown agents {unknown}")
            if sizes is not None and len(key) not in sizes:
                raise ValueError(f"group {group!r} has size {len(key)} outside permitted sizes")
            values[key] = float(value)
        if sizes is None:
            if values.get((), 0.0) != 0.0:
                raise ValueError("the empty group must be worth 0 in an unconstrained game")
            values[()] = 0.0
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_index", index)

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def constrained(self) -> bool:
        return self.sizes is not None

    def domain_sizes(self) -> frozenset[int]:
        return self.sizes if self.sizes is not None else frozenset(range(self.n + 1))

    def value(self, group: Iterable[str]) -> float:
        key = canonical(group)
        try:
            return self.values[key]
        except KeyError:
            raise IncompleteGameError(f"no value for group {key}") from None

    @classmethod
    def from_function(
        cls,
        agents: Sequence[str],
        fn: Callable[[Group], float],
        sizes: Iterable[int] | None = None,
    ) -> "CharacteristicGame":
        """Tabulate ``fn`` over every group in the domain."""
        agents = tuple(agents)
        dom = range(len(agents) + 1) if sizes is None else sorted(set(sizes))
        values = {}
        for s in dom:
            for g in combinations(agents, s):
                values[canonical(g)] = 0.0 if (s == 0 and sizes is None) else float(fn(canonical(g)))
        return cls(agents, values, None if sizes is None else frozenset(sizes))

    @classmethod
    def from_table(cls, agents: Sequence[str], table: np.ndarray) -> "CharacteristicGame":
        """Unconstrained game from a bitmask-indexed value array of length ``2**n``."""
        agents = tuple(agents)
        n = len(agents)
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (1 << n,):
            raise ValueError(f"table must have length {1 << n}")
        values = {}
        for mask in range(1, 1 << n):
            values[canonical(agents[i] for i in range(n) if mask >> i & 1)] = float(table[mask])
        return cls(agents, values)

    def mask(self, group: Iterable[str]) -> int:
        m = 0
        for a in group:
            m |= 1 << self._index[a]
        return m

    def table(self) -> np.ndarray:
        """Bitmask-indexed values; NaN where the group has no value."""
        if self.n > kernels.MAX_BITMASK_K:
            raise CapacityError(f"{self.n} agents is too many for a bitmask table")
        out = np.full(1 << self.n, np.nan)
        for group, v in self.values.items():
            out[self.mask(group)] = v
        return out

    def missing_counts(self, sizes: Iterable[int] | None = None) -> dict[int, int]:
        """Number of absent groups for each size in ``sizes`` (default: the domain)."""
        n = self.n
        sizes = self.domain_sizes() if sizes is None else sizes
        have = np.bincount([len(g) for g in self.values], minlength=n + 1)
        out = {}
        for s in sorted(sizes):
            miss = math.comb(n, s) - int(have[s])
            if miss:
                out[s] = miss
        return out

    def __add__(self, other: "CharacteristicGame") -> "CharacteristicGame":
        if set(self.agents) != set(other.agents) or self.sizes != other.sizes:
            raise ValueError("can only add games over the same agents and sizes")
        if self.values.keys() != other.values.keys():
            raise ValueError("can only add games with the same tabulated groups")
        return CharacteristicGame(
            self.agents, {g: v + other.values[g] for g, v in self.values.items()}, self.sizes
        )


@dataclass(frozen=True)
class CreditVector:
    agents: tuple[str, ...]
    values: np.ndarray
    kind: str  # "shapley" | "exchange" | "constrained-exchange"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).copy()
        if vals.shape != (len(self.agents),):
            raise ValueError("one value per agent required")
        if self.kind not in ("shapley", "exchange", "constrained-exchange"):
            raise ValueError(f"unknown credit kind {self.kind!r}")
        vals.setflags(write=False)
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "values", vals)

    def __getitem__(self, agent: str) -> float:
        return float(self.values[self.agents.index(agent)])

    def as_dict(self) -> dict[str, float]:
        return {a: float(v) for a, v in zip(self.agents, self.values)}

    def total(self) -> float:
        return float(math.fsum(self.values))


# ---------------------------------------------------------------------------
# exact solvers


def _complete_table(game: CharacteristicGame, limit: int) -> np.ndarray:
    if game.constrained:
        raise IncompleteGameError("exact Shapley/Exchange values need an unconstrained game")
    if game.n > limit:
        raise CapacityError(f"{game.n} agents exceeds the exact limit of {limit}")
    table = game.table()
    if np.isnan(table).any():
        miss = game.missing_counts()
        raise IncompleteGameError(f"missing group values by size: {miss}")
    return table


def shapley_weights(n: int) -> np.ndarray:
    """Coalition weights ``|C|! (n-1-|C|)! / n!`` indexed by ``|C|`` (length n+1)."""
    w = np.zeros(n + 1)
    for s in range(n):
        w[s] = 1.0 / (n * math.comb(n - 1, s))
    return w


def shapley_exact(game: CharacteristicGame, limit: int = EXACT_LIMIT) -> CreditVector:
    """Shapley values by the coalition-weight closed form, O(2^n n)."""
    table = _complete_table(game, limit)
    sv = kernels.shapley_table(table, game.n, shapley_weights(game.n))
    return CreditVector(game.agents, sv, "shapley")


def _stratified(table: np.ndarray, n: int, sizes: Iterable[int]) -> np.ndarray:
    size_ok = np.zeros(n + 1, dtype=bool)
    for s in sizes:
        size_ok[s] = True
    incl, n_incl, excl, n_excl = kernels.table_strata(table, n, size_ok)
    used = np.flatnonzero(size_ok)
    diff = incl[:, used] / n_incl[:, used] - excl[:, used] / n_excl[:, used]
    return diff.mean(axis=1)


def exchange_exact(game: CharacteristicGame, limit: int = EXACT_LIMIT) -> CreditVector:
    """Exchange values of a complete game.

    Uses the size-stratified form over sizes 1..n-1, which never touches
    v(N); it agrees with the permutation definition and with
    :func:`sv_to_ev`.
    """
    table = _complete_table(game, limit)
    n = game.n
    if n < 2:
        raise UndefinedTransformError("exchange values need at least two agents")
    return CreditVector(game.agents, _stratified(table, n, range(1, n)), "exchange")


def sv_to_ev(sv: CreditVector, grand_value: float, n: int) -> CreditVector:
    """Map Shapley values to exchange values: ``n/(n-1) * (SV - v(N)/n)``."""
    if sv.kind != "shapley":
        raise ValueError(f"expected a shapley vector, got {sv.kind!r}")
    if n < 2:
        raise UndefinedTransformError("the SV to EV map is undefined for n < 2")
    ev = n / (n - 1) * (sv.values - grand_value / n)
    return CreditVector(sv.agents, ev, "exchange")


def exchange_constrained_exact(game: CharacteristicGame, limit: int = EXACT_LIMIT) -> CreditVector:
    """Exchange values of a size-constrained game.

    Averages, over permitted positive sizes m, the gap between the mean value
    of size-m groups containing the agent and those without it. An
    unconstrained game is treated as having sizes ``0..n-1``.
    """
    n = game.n
    sizes = game.sizes if game.constrained else frozenset(range(n))
    if n in sizes:
        raise NoFeasibleSizeError(
            f"size {n} (the full group) is outside the constrained domain; drop it from the sizes"
        )
    pos = sorted(s for s in sizes if s > 0)
    if not pos:
        raise NoFeasibleSizeError("no permitted group size above zero")
    if game.n > limit:
        raise CapacityError(f"{game.n} agents exceeds the exact limit of {limit}")
    miss = game.missing_counts(pos)
    if miss:
        raise IncompleteGameError(f"missing group values by size: {miss}")
    table = np.nan_to_num(game.table(), nan=0.0)
    return CreditVector(game.agents, _stratified(table, n, pos), "constrained-exchange")


# ---------------------------------------------------------------------------
# axioms


@dataclass
class AxiomReport:
    tol: float
    zero_sum_residual: float
    symmetric_pairs: list[tuple[str, str]]
    symmetry_residual: float
    dummies: list[str]
    dummy_residual: float
    dummy_sv_residual: float
    linearity_residual: float | None = None

    @property
    def zero_sum(self) -> bool:
        return self.zero_sum_residual <= self.tol

    @property
    def symmetry(self) -> bool:
        return self.symmetry_residual <= self.tol

    @property
    def dummy(self) -> bool:
        return self.dummy_residual <= self.tol and self.dummy_sv_residual <= self.tol

    @property
    def linearity(self) -> bool | None:
        if self.linearity_residual is None:
            return None
        return self.linearity_residual <= self.tol

    @property
    def ok(self) -> bool:
        return self.zero_sum and self.symmetry and self.dummy and self.linearity is not False


def _symmetric(table: np.ndarray, n: int, i: int, j: int, tol: float) -> bool:
    bi, bj = 1 << i, 1 << j
    for mask in range(1 << n):
        if mask & (bi | bj):
            continue
        if abs(table[mask | bi] - table[mask | bj]) > tol:
            return False
    return True


def _is_dummy(table: np.ndarray, n: int, i: int, tol: float) -> bool:
    masks = np.arange(1 << n)
    without = masks[(masks >> i & 1) == 0]
    return bool(np.all(np.abs(table[without | (1 << i)] - table[without]) <= tol))


def check_axioms(
    game: CharacteristicGame,
    other: CharacteristicGame | None = None,
    tol: float = 1e-9,
    limit: int = EXACT_LIMIT,
) -> AxiomReport:
    """Check zero-sum, symmetry, dummy and (with ``other``) linearity of the EV.

    Symmetric pairs and dummies are detected from the table with tolerance
    ``tol``; residuals are maxima over them (0 when there are none).
    """
    table = _complete_table(game, limit)
    n = game.n
    ev = exchange_exact(game, limit).values
    sv = shapley_exact(game, limit).values
    grand = table[(1 << n) - 1]

    pairs = [(i, j) for i, j in combinations(range(n), 2) if _symmetric(table, n, i, j, tol)]
    sym_res = max((abs(ev[i] - ev[j]) for i, j in pairs), default=0.0)
    dummies = [i for i in range(n) if _is_dummy(table, n, i, tol)]
    dum_res = max((abs(ev[i] + grand / (n - 1)) for i in dummies), default=0.0)
    dum_sv = max((abs(sv[i]) for i in dummies), default=0.0)

    lin = None
    if other is not None:
        total = game + other
        ev_sum = exchange_exact(total, limit).values
        ev_other = exchange_exact(other, limit)
        ev_o = np.array([ev_other[a] for a in game.agents])
        lin = float(np.max(np.abs(ev_sum - ev - ev_o)))

    return AxiomReport(
        tol=tol,
        zero_sum_residual=abs(math.fsum(ev)),
        symmetric_pairs=[(game.agents[i], game.agents[j]) for i, j in pairs],
        symmetry_residual=float(sym_res),
        dummies=[game.agents[i] for i in dummies],
        dummy_residual=float(dum_res),
        dummy_sv_residual=float(dum_sv),
        linearity_residual=lin,
    )


# ---------------------------------------------------------------------------
# text format


def dumps_game(game: CharacteristicGame) -> str:
    header = {"agents": ",".join(game.agents)}
    if game.sizes is not None:
        header["sizes"] = ",".join(str(s) for s in sorted(game.sizes))
    lines = [format_record(header)]
    for group in sorted(game.values, key=lambda g: (len(g), g)):
        if not group:
            continue
        lines.append(format_record({"group": ",".join(group), "value": fmt_float(game.values[group])}))
    return "\n".join(lines) + "\n"


def loads_game(text: str) -> CharacteristicGame:
    agents = sizes = None
    values: dict[Group, float] = {}
    for lineno, rec in iter_records(text.splitlines()):
        if "agents" in rec:
            if agents is not None:
                raise FormatError(f"line {lineno}: second header record")
            agents = split_ids(rec["agents"])
            if "sizes" in rec:
                sizes = parse_sizes(rec["sizes"])
            continue
        if agents is None:
            raise FormatError(f"line {lineno}: group record before the agents= header")
        if "group" not in rec or "value" not in rec:
            raise FormatError(f"line {lineno}: expected group= and value= fields")
        key = canonical(split_ids(rec["group"]))
        if key in values:
            raise FormatError(f"line {lineno}: duplicate group {key}")
        values[key] = parse_float(rec["value"], lineno)
    if agents is None:
        raise FormatError("missing agents= header")
    try:
        return CharacteristicGame(agents, values, sizes)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_game(game: CharacteristicGame, path: str | Path) -> None:
    Path(path).write_text(dumps_game(game))


def load_game(path: str | Path) -> CharacteristicGame:
    return loads_game(Path(path).read_text())
