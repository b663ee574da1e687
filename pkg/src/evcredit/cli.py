"""Command-line pipeline: ``evcredit {gen,ev,cluster,imitate,eval,error-study}``.

Stages hand off through files in ``--out``. Every stage derives its own seed
from ``--seed`` and the stage name. Exit codes: 0 ok, 1 bad config, 2 I/O
failure, 3 insufficient data, 4 empty selection.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import errors
from .embedding import EmbeddingConfig, embed_state_action, kmeans_cluster, select_by_ev_variance
from .estimation import (
    ClusterAssignment,
    EvReport,
    AgentEstimate,
    clustered_ev,
    ev_cluster_search,
    estimate_all,
)
from .game import exchange_constrained_exact
from .imitation import (
    SelectionRule,
    TabularPolicy,
    evaluate_policy,
    fit_bc,
    fit_group_bc,
    select_agents,
    write_results,
)
from .records import fmt_float
from .seeding import derive_seed
from .study import StudyConfig, error_study, write_study
from .toc import Discretizer, Dvf, TocConfig, generate_dataset, load_dataset, read_kv, save_dataset, standard_pool

log = logging.getLogger("evcredit")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_EMPTY = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _global(p):
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--config", default=None, help="flat key=value file; keys mirror the long flags")
    p.add_argument("--out", default=None, help="output directory (must exist; default .)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="evcredit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a ToC dataset")
    _global(g)
    g.add_argument("--agents", type=int, default=None, help="pool size, a multiple of 12 (default 12)")
    g.add_argument("--group-size", type=int, default=None)
    g.add_argument("--groups", type=int, default=None, help="number of sampled groups")
    g.add_argument("--complete", action="store_true", default=None, help="every group once")
    g.add_argument("--anonymize", action="store_true", default=None, help="one-time ids per appearance")
    g.add_argument("--dvf", default=None, choices=[d.value for d in Dvf])
    g.add_argument("--growth", type=float, default=None)
    g.add_argument("--x0", type=float, default=None)
    g.add_argument("--horizon", type=int, default=None)

    e = sub.add_parser("ev", help="exact, estimated or clustered exchange values")
    _global(e)
    e.add_argument("--data", default=None, help="dataset directory")
    e.add_argument("--mode", default=None, choices=["exact", "estimate", "clustered"])
    e.add_argument("--dvf", default=None, choices=[d.value for d in Dvf], help="rescore before computing")
    e.add_argument("--fraction", type=float, default=None, help="seeded subsample of the observations")
    e.add_argument("--assignment", default=None, help="cluster CSV for --mode clustered")

    c = sub.add_parser("cluster", help="EV-Clustering, optionally behavior-initialized")
    _global(c)
    c.add_argument("--data", default=None)
    c.add_argument("--k", type=int, default=None)
    c.add_argument("--restarts", type=int, default=None)
    c.add_argument("--penalty-weight", type=float, default=None)
    c.add_argument("--behavior", action="store_true", default=None, help="initialize from behavior clusters")
    c.add_argument("--kmeans-seeds", type=int, default=None)
    c.add_argument("--dvf", default=None, choices=[d.value for d in Dvf])

    for name, helptext in (("imitate", "fit policies"), ("eval", "fit and evaluate policies")):
        m = sub.add_parser(name, help=helptext)
        _global(m)
        m.add_argument("--data", default=None)
        m.add_argument("--ev", default=None, help="EV CSV, required for ev2bc")
        m.add_argument("--method", default=None, choices=["bc", "group-bc", "ev2bc", "all"])
        m.add_argument("--dvf", default=None, choices=[d.value for d in Dvf])
        m.add_argument("--threshold-kind", default=None, choices=["percentile", "absolute"])
        m.add_argument("--threshold", type=float, default=None, help="EV2BC percentile or absolute cutoff")
        m.add_argument("--group-percentile", type=float, default=None)
        m.add_argument("--percentile-method", default=None, choices=["linear", "nearest-rank"])
        if name == "eval":
            m.add_argument("--episodes", type=int, default=None)
            m.add_argument("--policy", action="append", default=None, help="evaluate saved policy files instead")

    s = sub.add_parser("error-study", help="EV error versus observed fraction")
    _global(s)
    s.add_argument("--agents", type=int, default=None)
    s.add_argument("--fractions", default=None, help="comma-separated")
    s.add_argument("--seeds", type=int, default=None)
    s.add_argument("--dvf", default=None, choices=[d.value for d in Dvf])
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--restarts", type=int, default=None)
    s.add_argument("--penalty-weight", type=float, default=None)
    s.add_argument("--no-degenerate", action="store_true", default=None)
    return ap


DEFAULTS = {
    "seed": 0,
    "out": ".",
    "agents": 12,
    "group_size": 3,
    "groups": 220,
    "complete": False,
    "anonymize": False,
    "growth": 0.25,
    "x0": 200.0,
    "horizon": 50,
    "mode": "estimate",
    "k": 10,
    "restarts": 500,
    "penalty_weight": 0.1,
    "behavior": False,
    "kmeans_seeds": 3,
    "method": "all",
    "threshold_kind": "percentile",
    "threshold": 90.0,
    "group_percentile": 90.0,
    "percentile_method": "linear",
    "episodes": 5,
    "fractions": "0.1,0.25,0.5,1.0",
    "seeds": 20,
    "no_degenerate": False,
}

# per-command overrides of DEFAULTS
COMMAND_DEFAULTS = {"gen": {"dvf": "v_final"}, "error-study": {"restarts": 20, "dvf": "v_final"}}


def _coerce(key, raw: str, action):
    if action is not None and action.type is not None:
        return action.type(raw)
    if isinstance(DEFAULTS.get(key), bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
    if action is not None and action.choices is not None and raw not in action.choices:
        raise ConfigError(f"config key {key!r} must be one of {list(action.choices)}")
    return raw


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge defaults < config file < explicit flags."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.cmd]
    actions = {a.dest: a for a in sub._actions}
    defaults = {**DEFAULTS, **COMMAND_DEFAULTS.get(args.cmd, {})}
    opts = {k: v for k, v in defaults.items() if k in actions}
    if args.config:
        try:
            kv = read_kv(args.config)
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        for key, raw in kv.items():
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("config", "help"):
                raise ConfigError(f"unknown config key {key!r} for {args.cmd}")
            try:
                opts[dest] = _coerce(dest, raw, actions[dest])
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
    for k, v in vars(args).items():
        if v is not None and k not in ("cmd", "config"):
            opts[k] = v
    return opts


def _out_dir(opts) -> Path:
    out = Path(opts["out"])
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    return out


def _need(opts, key):
    if not opts.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return opts[key]


def _toc_cfg(opts) -> TocConfig:
    try:
        return TocConfig(opts["growth"], opts["x0"], opts["horizon"], opts["group_size"], derive_seed(opts["seed"], "gen"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load(opts):
    path = Path(_need(opts, "data"))
    if not (path / "observations.txt").exists():
        raise FileNotFoundError(f"{path} is not a dataset directory (no observations.txt)")
    ds = load_dataset(path)
    if opts.get("dvf") and Dvf(opts["dvf"]) is not ds.dvf:
        ds = ds.rescore(opts["dvf"])
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_gen(opts) -> int:
    out = _out_dir(opts)
    n = opts["agents"]
    if n < 12 or n % 12:
        raise ConfigError("--agents must be a positive multiple of 12")
    cfg = _toc_cfg(opts)
    pool = standard_pool(n // 12)
    try:
        ds = generate_dataset(
            pool, None if opts["complete"] else opts["groups"], cfg, opts["dvf"],
            anonymize=opts["anonymize"], complete=opts["complete"],
        )
    except (ValueError, errors.InfeasibleError) as exc:
        raise ConfigError(str(exc)) from exc
    save_dataset(ds, out)
    sc = np.array([o.score for o in ds.obs.observations])
    print(f"groups={len(ds.obs)} agents={len(ds.obs.agents)} dvf={ds.dvf.value} "
          f"score_min={fmt_float(sc.min())} score_mean={fmt_float(sc.mean())} score_max={fmt_float(sc.max())}")
    return EXIT_OK


def cmd_ev(opts) -> int:
    out = _out_dir(opts)
    ds = _load(opts)
    obs = ds.obs
    if opts.get("fraction") is not None:
        f = opts["fraction"]
        if not 0 < f <= 1:
            raise ConfigError("--fraction must lie in (0, 1]")
        rng = np.random.default_rng(derive_seed(opts["seed"], "ev:fraction"))
        take = np.sort(rng.choice(len(obs), size=max(1, round(f * len(obs))), replace=False))
        obs = obs.subset(take.tolist())
    mode = opts["mode"]
    if mode == "exact":
        game = obs.to_game()
        pos = sorted(s for s in game.sizes if s > 0)
        miss = game.missing_counts(pos)
        if miss:
            detail = ", ".join(f"size {s}: {m} missing" for s, m in miss.items())
            print(f"exact mode needs every permitted group; {detail}", file=sys.stderr)
            return EXIT_DATA
        cv = exchange_constrained_exact(game)
        counts = estimate_all(obs)
        report = EvReport({
            a: AgentEstimate(a, float(v), counts[a].n_incl, counts[a].n_excl, 0.0)
            for a, v in zip(cv.agents, cv.values)
        })
    elif mode == "estimate":
        report = estimate_all(obs)
    else:
        u = ClusterAssignment.from_csv(_need(opts, "assignment"))
        report = clustered_ev(obs, u)
    report.to_csv(out / "ev.csv")
    bad = report.inestimable()
    print(f"agents={len(report.entries)} inestimable={len(bad)} mode={mode}")
    return EXIT_OK


def cmd_cluster(opts) -> int:
    out = _out_dir(opts)
    ds = _load(opts)
    obs = ds.obs
    k = opts["k"]
    if not 1 <= k <= len(obs.agents):
        raise ConfigError(f"--k must lie in 1..{len(obs.agents)}")
    if opts["restarts"] < 1:
        raise ConfigError("--restarts must be at least 1")
    init = None
    if opts["behavior"]:
        if not ds.trajectories:
            print("behavior initialization needs trajectories", file=sys.stderr)
            return EXIT_DATA
        disc = Discretizer(ds.cfg.x0)
        emb = embed_state_action(ds.state_actions(disc), EmbeddingConfig(), n_actions=disc.n_actions)
        cands = [kmeans_cluster(emb, k, seed=derive_seed(opts["seed"], f"cluster:kmeans:{s}")) for s in range(opts["kmeans_seeds"])]
        init = select_by_ev_variance(cands, obs)
    u = ev_cluster_search(
        obs, k, restarts=opts["restarts"], init=init,
        penalty_weight=opts["penalty_weight"] if init is not None else 0.0,
        seed=derive_seed(opts["seed"], "cluster:search"),
    )
    u.to_csv(out / "assignment.csv")
    (out / "cluster_summary.txt").write_text(
        f"k={k}\nrestarts={opts['restarts']}\npenalty_weight={fmt_float(opts['penalty_weight'])}\n"
        f"behavior_init={str(init is not None).lower()}\nobjective={fmt_float(u.objective)}\nvariance={fmt_float(u.variance)}\n"
    )
    print(f"k={k} objective={fmt_float(u.objective)} variance={fmt_float(u.variance)}")
    return EXIT_OK


def _methods(opts):
    return ["bc", "group-bc", "ev2bc"] if opts["method"] == "all" else [opts["method"]]


def _fit(ds, method, opts):
    disc = Discretizer(ds.cfg.x0)
    if method == "bc":
        return fit_bc(ds, None, disc)
    if method == "group-bc":
        return fit_group_bc(ds, opts["group_percentile"], disc, opts["percentile_method"])
    try:
        rule = SelectionRule(opts["threshold_kind"], opts["threshold"], opts["percentile_method"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = EvReport.from_csv(_need(opts, "ev"))
    sel = select_agents(report, rule)
    if not sel:
        raise errors.EmptyReportError(f"rule {rule} selects no agent")
    log.info("ev2bc admits %s", sorted(sel))
    return fit_bc(ds, sel, disc)


def cmd_imitate(opts) -> int:
    out = _out_dir(opts)
    ds = _load(opts)
    for method in _methods(opts):
        _fit(ds, method, opts).save(out / f"policy_{method}.txt")
        print(f"wrote policy_{method}.txt")
    return EXIT_OK


def cmd_eval(opts) -> int:
    out = _out_dir(opts)
    episodes = opts["episodes"]
    if episodes < 1:
        raise ConfigError("--episodes must be at least 1")
    seed = derive_seed(opts["seed"], "eval")
    rows = []
    if opts.get("policy"):
        ds = _load(opts) if opts.get("data") else None
        cfg = ds.cfg if ds is not None else TocConfig()
        dvf = Dvf(opts.get("dvf") or (ds.dvf if ds is not None else Dvf.FINAL))
        for path in opts["policy"]:
            pol = TabularPolicy.load(path)
            mean, sd = evaluate_policy(pol, cfg, dvf, episodes, seed)
            rows.append(dict(method=Path(path).stem, dvf=dvf, mean=mean, sd=sd, episodes=episodes, seed=opts["seed"]))
    else:
        ds = _load(opts)
        dvf = ds.dvf
        for method in _methods(opts):
            pol = _fit(ds, method, opts)
            mean, sd = evaluate_policy(pol, ds.cfg, dvf, episodes, seed)
            rows.append(dict(method=method, dvf=dvf, mean=mean, sd=sd, episodes=episodes, seed=opts["seed"]))
    write_results(rows, out / "results.csv")
    for r in rows:
        print(f"{r['method']} {Dvf(r['dvf']).value} mean={fmt_float(r['mean'])} sd={fmt_float(r['sd'])}")
    return EXIT_OK


def cmd_error_study(opts) -> int:
    out = _out_dir(opts)
    n = opts["agents"]
    if n < 12 or n % 12:
        raise ConfigError("--agents must be a positive multiple of 12")
    try:
        fractions = tuple(float(x) for x in opts["fractions"].split(",") if x)
    except ValueError as exc:
        raise ConfigError(f"bad --fractions: {exc}") from exc
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("fractions must lie in (0, 1]")
    cfg = StudyConfig(
        fractions=fractions, seeds=opts["seeds"], dvf=opts["dvf"], replicas=n // 12,
        k=opts["k"], restarts=opts["restarts"],
        penalty_weight=opts["penalty_weight"], degenerate=not opts["no_degenerate"],
    )
    if cfg.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    rows = error_study(cfg, seed=derive_seed(opts["seed"], "error-study"))
    write_study(rows, out / "error_study.csv")
    for r in rows:
        print(f"{r.regime} fraction={fmt_float(r.fraction)} error={fmt_float(r.mean_abs_error)} sd={fmt_float(r.sd)}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "ev": cmd_ev,
    "cluster": cmd_cluster,
    "imitate": cmd_imitate,
    "eval": cmd_eval,
    "error-study": cmd_error_study,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = resolve(args, parser)
        return COMMANDS[args.cmd](opts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (errors.InvalidKError, errors.CapacityError, errors.UndefinedTransformError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, errors.FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except errors.EmptyReportError as exc:
        print(f"empty selection: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (errors.IncompleteGameError, errors.NoDataError, errors.NoValidCandidateError,
            errors.InestimableAgentError, errors.NoFeasibleSizeError) as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
