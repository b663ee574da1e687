"""Behavior embeddings and behavior clusters.

Two embeddings are offered: concatenated per-state action frequencies over
the most visited states, and TF-IDF weights of action n-grams. Either can be
projected to a few principal components before k-means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidKError, NoDataError, NoValidCandidateError
from .estimation import ClusterAssignment, ObservationSet, cluster_objective
from .records import fmt_float


@dataclass(frozen=True)
class EmbeddingConfig:
    mode: str = "state-action"  # or "ngram-tfidf"
    top_states: int = 200
    ngram_range: tuple[int, int] = (1, 3)
    min_df: float = 0.05
    max_df: float = 0.9
    max_features: int | None = 100_000
    reduce_to: int | None = 3
    cutoff: int | None = None  # max tokens kept per action sequence

    def __post_init__(self):
        if self.mode not in ("state-action", "ngram-tfidf"):
            raise ValueError(f"unknown embedding mode {self.mode!r}")
        if self.top_states < 1:
            raise ValueError("top_states must be at least 1")
        lo, hi = self.ngram_range
        if not 1 <= lo <= hi:
            raise ValueError("ngram_range must satisfy 1 <= low <= high")
        if not 0.0 <= self.min_df <= self.max_df <= 1.0:
            raise ValueError("need 0 <= min_df <= max_df <= 1")
        if self.reduce_to is not None and self.reduce_to < 1:
            raise ValueError("reduce_to must be positive")


@dataclass(frozen=True)
class BehaviorEmbedding:
    agent: str
    vector: np.ndarray
    feature_names: tuple[str, ...]


def stack(embeddings: Sequence[BehaviorEmbedding]) -> tuple[tuple[str, ...], np.ndarray]:
    if not embeddings:
        raise NoDataError("no embeddings")
    names = embeddings[0].feature_names
    if any(e.feature_names != names for e in embeddings):
        raise ValueError("embeddings in one batch must share feature names")
    return tuple(e.agent for e in embeddings), np.vstack([e.vector for e in embeddings])


# ---------------------------------------------------------------------------
# PCA by power iteration with deflation


def _power_eig(A: np.ndarray, n_comp: int, tol: float, max_iter: int):
    d = A.shape[0]
    A = A.copy()
    vals, vecs = [], []
    for c in range(n_comp):
        v = np.ones(d) + np.arange(d) / max(d, 1)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = A @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                lam = 0.0
                break
            w /= nw
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            lam = float(v @ A @ v)
            if done:
                break
        if lam <= 0.0:
            vals.append(0.0)
            vecs.append(np.zeros(d))
            continue
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            v = -v
        vals.append(lam)
        vecs.append(v)
        A -= lam * np.outer(v, v)
    return np.array(vals), np.array(vecs).T


def pca_project(X: np.ndarray, n_comp: int = 3, tol: float = 1e-8, max_iter: int = 1000) -> np.ndarray:
    """Principal-component scores of the rows of ``X``.

    Eigenvectors come from power iteration on whichever of the Gram or
    covariance matrix is smaller. Components beyond the rank are zero.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    Xc = X - X.mean(axis=0)
    if n <= d:
        vals, U = _power_eig(Xc @ Xc.T, n_comp, tol, max_iter)
        scores = U * np.sqrt(np.maximum(vals, 0.0))
    else:
        _, V = _power_eig(Xc.T @ Xc, n_comp, tol, max_iter)
        scores = Xc @ V
    return scores


# ---------------------------------------------------------------------------
# embeddings


def embed_state_action(
    trajectories: Mapping[str, Sequence[tuple[Sequence[int], Sequence[int]]]],
    cfg: EmbeddingConfig = EmbeddingConfig(),
    n_actions: int | None = None,
) -> list[BehaviorEmbedding]:
    """Concatenated action distributions in the most visited states.

    ``trajectories`` maps each agent to its (states, actions) sequences. The
    ``top_states`` states with the highest total visit count (ties to the
    lower state id) are kept; unvisited states give an all-zero block.
    """
    agents = list(trajectories)
    pairs = {}
    for a in agents:
        segs = [(np.asarray(s, dtype=np.int64), np.asarray(x, dtype=np.int64)) for s, x in trajectories[a]]
        pairs[a] = (
            np.concatenate([s for s, _ in segs]) if segs else np.zeros(0, np.int64),
            np.concatenate([x for _, x in segs]) if segs else np.zeros(0, np.int64),
        )
    if not agents or all(p[0].size == 0 for p in pairs.values()):
        raise NoDataError("no state-action pairs to embed")
    all_s = np.concatenate([p[0] for p in pairs.values()])
    all_a = np.concatenate([p[1] for p in pairs.values()])
    n_states = int(all_s.max()) + 1
    A = int(all_a.max()) + 1 if n_actions is None else int(n_actions)
    visits = np.bincount(all_s, minlength=n_states)
    order = np.lexsort((np.arange(n_states), -visits))
    top = [int(s) for s in order[: cfg.top_states] if visits[s] > 0]
    col = {s: j for j, s in enumerate(top)}
    names = tuple(f"s{s}:a{x}" for s in top for x in range(A))
    rows = np.zeros((len(agents), len(top), A))
    for r, a in enumerate(agents):
        s, x = pairs[a]
        for si, xi in zip(s, x):
            j = col.get(int(si))
            if j is not None:
                rows[r, j, xi] += 1
    tot = rows.sum(axis=2, keepdims=True)
    rows = np.divide(rows, tot, out=np.zeros_like(rows), where=tot > 0).reshape(len(agents), -1)
    return _finish(agents, rows, names, cfg)


def _finish(agents, X, names, cfg):
    if cfg.reduce_to is not None:
        X = pca_project(X, cfg.reduce_to)
        names = tuple(f"pc{j}" for j in range(X.shape[1]))
    return [BehaviorEmbedding(a, X[r].copy(), names) for r, a in enumerate(agents)]


def _ngrams(lo: int, hi: int, cutoff: int | None):
    def analyze(doc):
        out = []
        for seq in doc:
            toks = [str(t) for t in seq]
            if cutoff is not None:
                toks = toks[:cutoff]
            for n in range(lo, hi + 1):
                out.extend(" ".join(toks[i : i + n]) for i in range(len(toks) - n + 1))
        return out

    return analyze


def embed_ngram(
    action_sequences: Mapping[str, Sequence[Sequence]],
    cfg: EmbeddingConfig = EmbeddingConfig(mode="ngram-tfidf"),
) -> list[BehaviorEmbedding]:
    """TF-IDF over action n-grams, one document per agent.

    Uses the smoothed idf ``ln((1+D)/(1+df)) + 1`` with L2-normalized rows.
    N-grams never span two of an agent's sequences.
    """
    from sklearn.feature_extraction.text import TfidfVectorizer

    if cfg.mode != "ngram-tfidf":
        raise ValueError("embed_ngram needs mode='ngram-tfidf'")
    agents = list(action_sequences)
    docs = [list(action_sequences[a]) for a in agents]
    if not agents or all(len(s) == 0 for d in docs for s in d) or all(len(d) == 0 for d in docs):
        raise NoDataError("all action sequences are empty")
    vec = TfidfVectorizer(
        analyzer=_ngrams(*cfg.ngram_range, cfg.cutoff),
        min_df=float(cfg.min_df),
        max_df=float(cfg.max_df),
        max_features=cfg.max_features,
        smooth_idf=True,
        sublinear_tf=False,
        norm="l2",
        lowercase=False,
    )
    try:
        X = vec.fit_transform(docs).toarray()
    except ValueError as exc:
        raise NoDataError(f"no n-gram survives the document-frequency filter: {exc}") from exc
    names = tuple(str(t) for t in vec.get_feature_names_out())
    return _finish(agents, X, names, cfg)


def save_embeddings(embeddings: Sequence[BehaviorEmbedding], path: str | Path) -> None:
    agents, X = stack(embeddings)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent"] + [f"f{j}" for j in range(X.shape[1])])
        for a, row in zip(agents, X):
            w.writerow([a] + [fmt_float(x) for x in row])


# ---------------------------------------------------------------------------
# k-means


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        j = rng.integers(n) if tot <= 0 else rng.choice(n, p=d2 / tot)
        centers.append(X[j])
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(axis=1))
    return np.array(centers)


def _assign(X, C):
    d = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    lab = np.argmin(d, axis=1)
    return lab, float(d[np.arange(X.shape[0]), lab].sum())


def _lloyd(X, C, max_iter, tol):
    k = C.shape[0]
    lab, inertia = _assign(X, C)
    for _ in range(max_iter):
        newC = C.copy()
        for c in range(k):
            mem = lab == c
            if mem.any():
                newC[c] = X[mem].mean(axis=0)
            else:
                # reseed an empty cluster with the point farthest from its center
                far = ((X - newC[lab]) ** 2).sum(axis=1)
                newC[c] = X[int(np.argmax(far))]
        shift = float(((newC - C) ** 2).sum())
        C = newC
        lab, inertia = _assign(X, C)
        if shift <= tol:
            break
    return lab, inertia


def kmeans_cluster(
    embeddings: Sequence[BehaviorEmbedding] | np.ndarray,
    k: int,
    seed: int = 0,
    n_init: int = 10,
    max_iter: int = 300,
    tol: float = 1e-12,
    agents: Sequence[str] | None = None,
) -> ClusterAssignment:
    """Lloyd's k-means with k-means++ seeding; best of ``n_init`` runs by inertia.

    Run ``r`` seeds from ``default_rng([seed, r])``; ties keep the earlier run.
    """
    if isinstance(embeddings, np.ndarray):
        X = np.asarray(embeddings, dtype=np.float64)
        agents = tuple(agents) if agents is not None else tuple(f"a{i}" for i in range(X.shape[0]))
    else:
        agents, X = stack(list(embeddings))
    n = X.shape[0]
    if n == 0:
        raise NoDataError("nothing to cluster")
    if k < 1 or k > n:
        raise InvalidKError(f"k={k} must lie in 1..{n}")
    best = None
    for r in range(n_init):
        rng = np.random.default_rng([seed, r])
        lab, inertia = _lloyd(X, _kmeanspp(X, k, rng), max_iter, tol)
        if best is None or inertia < best[1] - 1e-12 * (1.0 + abs(best[1])):
            best = (lab, inertia)
    return ClusterAssignment(agents, best[0], k, objective=-best[1])


def dispersion_curve(
    embeddings: Sequence[BehaviorEmbedding] | np.ndarray, ks: Iterable[int] = range(2, 9), seed: int = 0
) -> list[tuple[int, float]]:
    """Within-cluster squared distance for each k (for an elbow plot)."""
    out = []
    for k in ks:
        X = embeddings if isinstance(embeddings, np.ndarray) else stack(list(embeddings))[1]
        if k > X.shape[0]:
            break
        out.append((k, -kmeans_cluster(X, k, seed).objective))
    return out


def select_by_ev_variance(candidates: Sequence[ClusterAssignment], obs: ObservationSet) -> ClusterAssignment:
    """Candidate whose clustered EVs vary most across agents.

    Candidates leaving fewer agents in inestimable clusters rank first; ties
    go to the earliest candidate.
    """
    if not candidates:
        raise NoValidCandidateError("no candidates")
    best = None
    n = len(obs.agents)
    for i, cand in enumerate(candidates):
        inv, _, var = cluster_objective(obs, cand)
        if inv >= n:
            continue
        if best is None or inv < best[0] or (inv == best[0] and var > best[1] + 1e-12 * (1.0 + abs(best[1]))):
            best = (inv, var, i)
    if best is None:
        raise NoValidCandidateError("every candidate leaves all agents inestimable")
    c = candidates[best[2]]
    return ClusterAssignment(c.agents, c.labels, c.k, objective=best[1], variance=best[1])
