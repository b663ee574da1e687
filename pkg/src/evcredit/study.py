"""Estimation error as a function of how much of the game is observed."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingConfig, embed_state_action, kmeans_cluster, select_by_ev_variance
from .errors import CapacityError
from .estimation import EvReport, GroupObservation, ObservationSet, clustered_ev, estimate_all, ev_cluster_search
from .game import EXACT_LIMIT, exchange_constrained_exact
from .records import fmt_float
from .seeding import derive_seed
from .toc import Dataset, Discretizer, Dvf, TocConfig, generate_dataset, standard_pool


@dataclass
class StudyConfig:
    fractions: tuple[float, ...] = (0.1, 0.25, 0.5, 1.0)
    seeds: int = 20
    dvf: str = "v_final"
    toc: TocConfig = field(default_factory=TocConfig)
    replicas: int = 1
    normalize_to: float | None = 1000.0  # rescale scores so that max |score| equals this
    degenerate: bool = True
    clustered: bool = True
    k: int = 10  # archetype configurations in the standard pool
    kmeans_seeds: int = 3
    restarts: int = 20
    penalty_weight: float = 0.1


@dataclass
class StudyRow:
    regime: str
    fraction: float
    mean_abs_error: float
    sd: float
    seeds: int


def _scaled(obs: ObservationSet, scale: float) -> ObservationSet:
    return ObservationSet(
        obs.agents, [GroupObservation(o.group, o.score * scale, o.traj) for o in obs.observations], obs.sizes
    )


def _abs_error(report: EvReport, truth: dict[str, float], owner=lambda a: a) -> float:
    # inestimable agents count as a zero estimate
    errs = [abs((0.0 if not e.estimable else e.ev) - truth[owner(a)]) for a, e in report.entries.items()]
    return float(np.mean(errs))


def degenerate_clustering(ds: Dataset, obs: ObservationSet, cfg: StudyConfig, seed: int):
    """Behavior clusters (best k-means seed by EV variance) refined by EV-Clustering."""
    disc = Discretizer(ds.cfg.x0)
    emb = embed_state_action(ds.state_actions(disc), EmbeddingConfig(), n_actions=disc.n_actions)
    k = min(cfg.k, len(emb))
    cands = [kmeans_cluster(emb, k, seed=derive_seed(seed, f"kmeans:{s}")) for s in range(cfg.kmeans_seeds)]
    init = select_by_ev_variance(cands, obs)
    return ev_cluster_search(
        obs, k, restarts=cfg.restarts, init=init,
        penalty_weight=cfg.penalty_weight, seed=derive_seed(seed, "search"),
    )


def error_study(cfg: StudyConfig, seed: int = 0) -> list[StudyRow]:
    """Mean absolute EV error against the exact values of the complete game.

    Subsample regimes draw ``round(f * #groups)`` distinct groups of the
    complete dataset. The degenerate regime draws the same number of groups
    uniformly and gives every appearance a fresh id; its error is averaged
    over appearances, each compared with the exact EV of the hidden agent.
    """
    agent_pool = standard_pool(cfg.replicas)
    if len(agent_pool) > EXACT_LIMIT:
        raise CapacityError(f"{len(agent_pool)} agents exceeds the exact limit of {EXACT_LIMIT}")
    dvf = Dvf(cfg.dvf)
    full = generate_dataset(agent_pool, None, cfg.toc, dvf, complete=True)
    scale = 1.0
    if cfg.normalize_to:
        top = max(abs(o.score) for o in full.obs.observations)
        scale = cfg.normalize_to / top if top > 0 else 1.0
    obs = _scaled(full.obs, scale)
    truth = exchange_constrained_exact(obs.to_game()).as_dict()
    n_groups = len(obs)

    rows = []
    for f in cfg.fractions:
        errs = []
        for s in range(cfg.seeds):
            rng = np.random.default_rng(derive_seed(seed, f"fraction:{f!r}:{s}"))
            take = np.sort(rng.choice(n_groups, size=max(1, round(f * n_groups)), replace=False))
            errs.append(_abs_error(estimate_all(obs.subset(take.tolist())), truth))
        rows.append(StudyRow("observed", float(f), float(np.mean(errs)), float(np.std(errs)), cfg.seeds))

    if cfg.degenerate:
        raw, clus = [], []
        for s in range(cfg.seeds):
            ds = generate_dataset(
                agent_pool, n_groups, cfg.toc, dvf, anonymize=True, seed=derive_seed(seed, f"degenerate:{s}")
            )
            dobs = _scaled(ds.obs, scale)
            raw.append(_abs_error(estimate_all(dobs), truth, ds.true_agent))
            if cfg.clustered:
                u = degenerate_clustering(ds, dobs, cfg, derive_seed(seed, f"cluster:{s}"))
                clus.append(_abs_error(clustered_ev(dobs, u), truth, ds.true_agent))
        rows.append(StudyRow("degenerate", 0.0, float(np.mean(raw)), float(np.std(raw)), cfg.seeds))
        if cfg.clustered:
            rows.append(StudyRow("degenerate-clustered", 0.0, float(np.mean(clus)), float(np.std(clus)), cfg.seeds))
    return rows


def write_study(rows: list[StudyRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime", "fraction", "mean_abs_error", "sd", "seeds"])
        for r in rows:
            w.writerow([r.regime, fmt_float(r.fraction), fmt_float(r.mean_abs_error), fmt_float(r.sd), r.seeds])
