"""AUC-PR, structural Hamming distances, the zero-graph baseline and the benchmark grid."""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NoPositivesError
from .graphs import Cpdag, dag_to_cpdag, sample_er_dag
from .semgen import TEST_DEPENDENCIES, TestDependency, generate_test_data
from .seeding import substream

log = logging.getLogger(__name__)

ZERO_GRAPH = "zero_graph"
CSV_COLUMNS = ["d", "M", "dependency", "trial", "auc_pr", "shd", "accuracy", "runtime_s", "model_id"]


def auc_pr(scores, truth) -> float:
    """Area under the precision-recall step curve.

    Equal scores form one threshold group, so the curve has one point per
    distinct score; the area is ``sum (R_k - R_{k-1}) P_k``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    n_pos = truth.sum()
    if n_pos == 0:
        raise NoPositivesError("AUC-PR needs at least one positive pair")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    last = np.r_[s[1:] != s[:-1], True]  # last index of each tie group
    tp, n = tp[last], np.flatnonzero(last) + 1
    recall = tp / n_pos
    precision = tp / n
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pair_scores(probs: np.ndarray):
    """Edge score ``1 - P(no edge)`` for every unordered pair ``i < j``."""
    i, j = np.triu_indices(probs.shape[0], k=1)
    return 1.0 - probs[i, j, 0]


def pair_truth(edges, d: int):
    mat = np.zeros((d, d), dtype=bool)
    for a, b in edges:
        mat[a, b] = mat[b, a] = True
    return mat[np.triu_indices(d, k=1)]


def shd_undirected(pred, truth, d: int) -> int:
    norm = lambda es: {(min(a, b), max(a, b)) for a, b in es}  # noqa: E731
    return len(norm(pred) ^ norm(truth))


def accuracy_undirected(shd: int, d: int) -> float:
    return 1.0 - shd / (d * (d - 1) / 2)


def shd_cpdag(pred: Cpdag, truth: Cpdag) -> int:
    """+1 per pair whose adjacency differs, +1 per shared edge whose mark differs."""
    if pred.d != truth.d:
        raise ValueError(f"CPDAGs over different node counts: {pred.d} vs {truth.d}")

    def marks(c: Cpdag):
        out = {e: "-" for e in c.undirected}
        for a, b in c.directed:
            out[(min(a, b), max(a, b))] = ">" if a < b else "<"
        return out

    mp, mt = marks(pred), marks(truth)
    total = 0
    for pair in set(mp) | set(mt):
        if (pair in mp) != (pair in mt):
            total += 1
        elif mp[pair] != mt[pair]:
            total += 1
    return total


@dataclass
class MetricReport:
    d: int
    M: int
    dependency: str
    trial: int
    model_id: str
    auc_pr: float = float("nan")
    shd: float = float("nan")
    accuracy: float = float("nan")
    runtime_seconds: float = float("nan")
    seed: int = 0
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "d": self.d,
            "M": self.M,
            "dependency": self.dependency,
            "trial": self.trial,
            "auc_pr": self.auc_pr,
            "shd": self.shd,
            "accuracy": self.accuracy,
            "runtime_s": self.runtime_seconds,
            "model_id": self.model_id,
        }


def _trial_auc(scores, truth) -> float:
    """AUC-PR of one trial; ``nan`` when the sampled graph has no edges."""
    return auc_pr(scores, truth) if truth.any() else float("nan")


def zero_graph_report(g, d, m, dep, trial, seed) -> MetricReport:
    truth = pair_truth(g.edges, d)
    shd = shd_undirected(set(), g.edges, d)
    # all-equal scores: the step curve collapses to the positive rate
    auc = _trial_auc(np.zeros(len(truth)), truth)
    return MetricReport(d, m, dep, trial, ZERO_GRAPH, auc, shd, accuracy_undirected(shd, d), 0.0, seed)


def _model_report(model, x, g, d, m, dep, trial, seed, model_id):
    from .bamnet import predict
    from .cpdagnet import predicted_labels

    t0 = time.perf_counter()
    probs = predict(x, model)
    runtime = time.perf_counter() - t0
    truth = pair_truth(g.edges, d)
    auc = _trial_auc(pair_scores(probs), truth)
    pred_edges = predicted_labels(probs).pairs_of(1)
    shd = shd_undirected(pred_edges, g.edges, d)
    return probs, MetricReport(d, m, dep, trial, model_id, auc, shd, accuracy_undirected(shd, d), runtime, seed)


def _cells(grid):
    as_list = lambda v: list(v) if isinstance(v, (list, tuple)) else [v]  # noqa: E731
    deps = grid.get("dependency", "chebyshev")
    deps = list(TEST_DEPENDENCIES) if deps == "all" else as_list(deps)
    return list(itertools.product(as_list(grid["d"]), as_list(grid["M"]), deps))


def run_benchmark(grid: dict, models: dict | None = None, out=None, seed: int = 0, cpdag_models: dict | None = None):
    """Evaluate models on fresh ER graphs over a ``{d, M, dependency, trials[, q]}`` grid.

    ``models`` maps ids to stage-1 networks; ``cpdag_models`` maps ids to
    ``(stage1, stage2)`` pairs and adds CPDAG rows whose ``shd`` is the CPDAG
    SHD. The zero-graph baseline is always included. Returns the list of
    :class:`MetricReport` and writes the CSV when ``out`` is given.
    """
    from .cpdagnet import estimate_cpdag

    models = models or {}
    cpdag_models = cpdag_models or {}
    trials = int(grid.get("trials", 5))
    reports = []
    for d, m, dep in _cells(grid):
        for trial in range(trials):
            rng = substream(seed, f"bench/{d}/{m}/{dep}/{trial}")
            q = grid.get("q")
            if q is None:
                q = int(rng.integers(1, max(1, min(d // 3, 5)) + 1))
            try:
                g = sample_er_dag(d, q, rng)
                x = generate_test_data(g, TestDependency(dep), m, rng)
            except Exception as exc:  # recorded, not fatal
                log.warning("trial %s/%s/%s/%d failed: %s", d, m, dep, trial, exc)
                for mid in [ZERO_GRAPH, *models, *(f"{k}+cpdag" for k in cpdag_models)]:
                    reports.append(MetricReport(d, m, dep, trial, mid, seed=seed, error=str(exc)))
                continue
            reports.append(zero_graph_report(g, d, m, dep, trial, seed))
            for mid, model in models.items():
                try:
                    reports.append(_model_report(model, x, g, d, m, dep, trial, seed, mid)[1])
                except Exception as exc:
                    reports.append(MetricReport(d, m, dep, trial, mid, seed=seed, error=str(exc)))
            for mid, (s1, s2) in cpdag_models.items():
                try:
                    t0 = time.perf_counter()
                    est, _, probs = estimate_cpdag(x, s1, s2)
                    runtime = time.perf_counter() - t0
                    auc = _trial_auc(pair_scores(probs), pair_truth(g.edges, d))
                    shd = shd_cpdag(est, dag_to_cpdag(g))
                    reports.append(MetricReport(d, m, dep, trial, f"{mid}+cpdag", auc, shd, float("nan"), runtime, seed))
                except Exception as exc:
                    reports.append(MetricReport(d, m, dep, trial, f"{mid}+cpdag", seed=seed, error=str(exc)))
    if out is not None:
        write_benchmark_csv(reports, out)
    return reports


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)


def aggregate(reports):
    """``{(d, M, dependency, model_id): {metric: (mean, std)}}`` over successful trials."""
    groups = {}
    for r in reports:
        groups.setdefault((r.d, r.M, r.dependency, r.model_id), []).append(r)
    out = {}
    for key, rs in groups.items():
        ok = [r for r in rs if r.error is None]
        stats = {}
        for metric in ("auc_pr", "shd", "accuracy", "runtime_seconds"):
            vals = np.array([getattr(r, metric) for r in ok], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            stats[metric] = (float(np.mean(vals)), float(np.std(vals))) if len(vals) else (float("nan"), float("nan"))
        out[key] = stats
    return out


def write_benchmark_csv(reports, path) -> None:
    """One row per trial and model, then one ``mean±std`` aggregate row per cell and model."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([_fmt(v) for v in r.row().values()])
        for (d, m, dep, mid), stats in aggregate(reports).items():
            cells = [f"{stats[k][0]:.6g}±{stats[k][1]:.6g}" for k in ("auc_pr", "shd", "accuracy", "runtime_seconds")]
            w.writerow([d, m, dep, "mean±std", *cells, mid])
