"""Batch application of a trained query policy under an analyst budget.

A session ranks every instance by its query probability, presents the
argmax to the analyst, folds the answer into the per-instance features, and
repeats until the budget runs out. The discovery curve records cumulative
anomalies found per query.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detector, features, policy
from .data import ANOMALY, Label, RawDataset, StandardizedDataset, standardize
from .features import MetaFeatures, QueryState, apply_feature_mask
from .policy import PolicyModel

DEFAULT_BUDGET = 100


class SessionError(RuntimeError):
    """Protocol violation: exhausted budget, wrong pending index, etc."""


@dataclass
class QuerySession:
    """Live query-session state for one dataset and one policy."""

    dataset: StandardizedDataset
    model: PolicyModel
    scores: np.ndarray
    mf: MetaFeatures
    qs: QueryState
    budget: int
    k: int
    seed: int
    feature_mask: tuple[int, ...] = ()
    query_log: list[tuple[int, Label]] = field(default_factory=list)
    curve: list[int] = field(default_factory=list)
    anomalies: list[int] = field(default_factory=list)
    queried: np.ndarray = None
    pending: int | None = None
    _pending_probs: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def queries_used(self) -> int:
        return len(self.query_log)

    @property
    def exhausted(self) -> bool:
        return self.queries_used >= self.budget or bool(self.queried.all())

    @property
    def discovered_total(self) -> int:
        return self.curve[-1] if self.curve else 0


def session_open(
    dataset: RawDataset | StandardizedDataset,
    model: PolicyModel,
    budget: int = DEFAULT_BUDGET,
    k: int = features.DEFAULT_K,
    seed: int = 0,
    n_trees: int = detector.DEFAULT_TREES,
    psi: int = detector.DEFAULT_PSI,
    feature_mask: tuple[int, ...] = (),
) -> QuerySession:
    """Open a session: fit the detector, freeze its scores, and compute the
    initial feature matrix (no labels yet)."""
    std = standardize(dataset) if isinstance(dataset, RawDataset) else dataset
    if std.n < 1:
        raise ValueError("empty dataset")
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if std.n == 1:
        scores = np.array([1.0])
    else:
        forest = detector.fit(std.X_std, n_trees=n_trees, psi=psi, seed=seed)
        scores = detector.score_all(forest, std.X_std)
    d_cap = features.init_cap(std.X_std, seed)
    qs = QueryState(std.n)
    mf = features.extract(std.X_std, scores, qs, k=k, d_cap=d_cap)
    return QuerySession(
        dataset=std,
        model=model,
        scores=scores,
        mf=mf,
        qs=qs,
        budget=budget,
        k=k,
        seed=seed,
        feature_mask=feature_mask,
        queried=np.zeros(std.n, dtype=bool),
    )


def query_probabilities(session: QuerySession, model: PolicyModel | None = None) -> np.ndarray:
    """pi(query | features) for every instance under the session's current
    feature matrix."""
    model = model or session.model
    G = session.mf.G
    if session.feature_mask:
        G = apply_feature_mask(G, session.feature_mask, session.mf.d_cap)
    probs, _ = policy.forward(model, G)
    return probs[:, 1]


def next_query(
    session: QuerySession, model: PolicyModel | None = None
) -> tuple[int, np.ndarray]:
    """Pick the instance to show the analyst.

    Returns (index, probability vector over all instances). Already-queried
    instances are masked from selection; ties break toward the lowest
    index. While a query is pending, repeated calls return it unchanged.
    """
    if session.pending is not None:
        return session.pending, session._pending_probs
    if session.queries_used >= session.budget:
        raise SessionError("query budget exhausted")
    if session.queried.all():
        raise SessionError("all instances already queried")
    p = query_probabilities(session, model)
    masked = np.where(session.queried, -1.0, p)
    idx = int(np.argmax(masked))
    session.pending = idx
    session._pending_probs = p
    return idx, p


def submit_label(session: QuerySession, index: int, answer: Label) -> QuerySession:
    """Record the analyst's verdict for the pending query."""
    if session.pending is None:
        raise SessionError("no query is pending")
    if index != session.pending:
        raise SessionError(f"label for instance {index} but instance {session.pending} is pending")
    session.qs.mark(index, answer)
    features.update(session.mf, session.dataset.X_std, session.qs, index)
    session.queried[index] = True
    session.query_log.append((index, answer))
    gained = 1 if answer is Label.ANOMALY else 0
    session.curve.append(session.discovered_total + gained)
    if answer is Label.ANOMALY:
        session.anomalies.append(index)
    session.pending = None
    session._pending_probs = None
    return session


def run_simulated(
    dataset: RawDataset | StandardizedDataset,
    model: PolicyModel,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    **session_kwargs,
) -> np.ndarray:
    """Play a full session answering queries from ground-truth labels;
    returns the discovery curve (length min(budget, n))."""
    if dataset.y is None:
        raise ValueError("simulated analyst needs ground-truth labels")
    session = session_open(dataset, model, budget=budget, seed=seed, **session_kwargs)
    y = dataset.y
    while not session.exhausted:
        idx, _ = next_query(session)
        answer = Label.ANOMALY if y[idx] == ANOMALY else Label.NORMAL
        submit_label(session, idx, answer)
    return np.asarray(session.curve, dtype=np.int64)


def replay(
    dataset: RawDataset | StandardizedDataset,
    model: PolicyModel,
    log: list[tuple[int, Label]],
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    **session_kwargs,
) -> QuerySession:
    """Re-run a session from an exported (index, answer) log; the selection
    sequence must match, or the log does not belong to this configuration."""
    session = session_open(dataset, model, budget=budget, seed=seed, **session_kwargs)
    for index, answer in log:
        idx, _ = next_query(session)
        if idx != index:
            raise SessionError(
                f"replay diverged: session selects instance {idx}, log says {index}"
            )
        submit_label(session, idx, answer)
    return session


def unsupervised_curve(scores: np.ndarray, y: np.ndarray, budget: int) -> np.ndarray:
    """Discovery curve of the label-blind baseline: query instances in
    descending detector-score order (ties toward the lower index)."""
    n = len(scores)
    order = np.lexsort((np.arange(n), -np.asarray(scores)))[: min(budget, n)]
    return np.cumsum(np.asarray(y)[order] == ANOMALY).astype(np.int64)


def curve_rows(session: QuerySession) -> list[tuple[int, int, int, str]]:
    rows = []
    for t, ((idx, answer), cum) in enumerate(zip(session.query_log, session.curve), start=1):
        rows.append((t, cum, idx, answer.name.lower()))
    return rows


def write_curve_csv(session: QuerySession, path: str | Path) -> None:
    """Export the query log: query_index, cumulative_anomalies,
    queried_instance, answer."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_index", "cumulative_anomalies", "queried_instance", "answer"])
        writer.writerows(curve_rows(session))
