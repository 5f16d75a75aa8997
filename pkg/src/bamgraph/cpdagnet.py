"""Second stage: decide which candidate common children of an immorality are true colliders,
then assemble a CPDAG and close it under the Meek rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bamnet import BamNet, ModelConfig, ObservationTrunk, _glorot, _seeded, predict
from .errors import InvalidParameterError
from .graphs import (
    MORALIZED,
    NO_EDGE,
    SKELETON,
    Cpdag,
    DagSpec,
    ThreeClassLabels,
    _pair,
    apply_meek_rules,
    derive_three_class_labels,
    immorality_context,
)
from .semgen import generate_training_world
from .trainer import LossBreakdown, TrainConfig, TrainState, new_state, run_epochs


def _standardize(cols):
    cols = np.asarray(cols, dtype=np.float64)
    if cols.shape[1] == 0:
        return cols
    std = cols.std(axis=0)
    return (cols - cols.mean(axis=0)) / np.where(std > 0, std, 1.0)


@dataclass
class ImmoralityCase:
    x_pa: np.ndarray
    x_cc: np.ndarray
    x_ne: np.ndarray
    pa: tuple
    cc: tuple
    ne: tuple
    child_flags: np.ndarray | None = None

    def __post_init__(self):
        if len(self.cc) == 0:
            raise InvalidParameterError(f"immorality {self.pa} has no candidate common child")
        roles = [set(self.pa), set(self.cc), set(self.ne)]
        if any(a & b for k, a in enumerate(roles) for b in roles[k + 1:]):
            raise InvalidParameterError("pa, cc and ne index sets must be disjoint")

    @classmethod
    def from_data(cls, x, labels: ThreeClassLabels, pair, dag: DagSpec | None = None):
        pa, cc, ne = immorality_context(labels, pair)
        flags = None
        if dag is not None:
            flags = np.array([(pa[0], k) in dag.edges and (pa[1], k) in dag.edges for k in cc], dtype=np.float64)
        return cls(
            _standardize(x[:, list(pa)]),
            _standardize(x[:, cc]),
            _standardize(x[:, ne]),
            tuple(pa),
            tuple(cc),
            tuple(ne),
            flags,
        )


def immorality_cases(x, labels: ThreeClassLabels, dag: DagSpec | None = None) -> list[ImmoralityCase]:
    """One case per moralized pair that has at least one candidate child."""
    out = []
    for pair in labels.pairs_of(MORALIZED):
        _, cc, _ = immorality_context(labels, pair)
        if cc:
            out.append(ImmoralityCase.from_data(x, labels, pair, dag))
    return out


class RoleEmbedding(nn.Module):
    """``tanh(x W1 + b1) W~1`` followed by two residual tanh layers."""

    def __init__(self, C, n_residual=2):
        super().__init__()
        self.w_in = _glorot(1, C)
        self.b_in = nn.Parameter(torch.zeros(C))
        self.w_in_out = _glorot(C, C)
        self.ws = nn.ParameterList(_glorot(C, C) for _ in range(n_residual))
        self.bs = nn.ParameterList(nn.Parameter(torch.zeros(C)) for _ in range(n_residual))
        self.ws_out = nn.ParameterList(_glorot(C, C) for _ in range(n_residual))

    def forward(self, x):
        h = torch.tanh(x.unsqueeze(-1) @ self.w_in + self.b_in) @ self.w_in_out
        for w, b, w_out in zip(self.ws, self.bs, self.ws_out):
            h = h + torch.tanh(h @ w + b) @ w_out
        return h


class VStructureNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        with _seeded(seed):
            self.embed_pa = RoleEmbedding(cfg.C)
            self.embed_cc = RoleEmbedding(cfg.C)
            self.embed_ne = RoleEmbedding(cfg.C)
            self.trunk = ObservationTrunk(cfg, embed=False)
            self.w_out = nn.Parameter(torch.empty(cfg.C, 1).normal_(0.0, 0.01))
            self.b_out = nn.Parameter(torch.zeros(1))
        self.to(cfg.dtype)

    def forward(self, case: ImmoralityCase) -> torch.Tensor:
        """Probability that each candidate in ``case.cc`` is a common child."""
        if len(case.cc) == 0:
            raise InvalidParameterError("empty candidate set")
        dt = self.cfg.dtype
        parts = [self.embed_pa(torch.as_tensor(case.x_pa, dtype=dt)), self.embed_cc(torch.as_tensor(case.x_cc, dtype=dt))]
        if len(case.ne):
            parts.append(self.embed_ne(torch.as_tensor(case.x_ne, dtype=dt)))
        e = self.trunk(torch.cat(parts, dim=1))  # (C, d, d)
        pooled = e.mean(dim=-1).transpose(0, 1)  # (d, C)
        logits = (pooled @ self.w_out + self.b_out)[:, 0]
        return torch.sigmoid(logits[2:2 + len(case.cc)])


def vstructure_forward(case: ImmoralityCase, model: VStructureNet) -> torch.Tensor:
    return model(case)


def vstructure_loss(model: VStructureNet, cases) -> LossBreakdown:
    """Mean binary cross-entropy over all candidate children of all cases."""
    probs = torch.cat([model(c) for c in cases]).clamp(1e-7, 1 - 1e-7)
    flags = torch.as_tensor(np.concatenate([c.child_flags for c in cases]), dtype=probs.dtype)
    bce = -(flags * probs.log() + (1 - flags) * (1 - probs).log()).mean()
    zero = torch.zeros((), dtype=probs.dtype)
    return LossBreakdown(bce, bce, zero, zero)


def sample_vstructure_cases(rng, d_range=(10, 100), m_range=(50, 1000), max_tries=100):
    """Simulate worlds until one has at least one immorality; return its cases."""
    for _ in range(max_tries):
        x, g, labels = generate_training_world(rng, d_range, m_range)
        cases = immorality_cases(x, labels, g)
        if cases:
            return cases
    raise RuntimeError(f"no immorality found in {max_tries} simulated worlds")


def vstructure_config(**kw) -> TrainConfig:
    """Training schedule of the second-stage model (one data matrix per epoch)."""
    base = dict(epochs=1000, samples_per_epoch=1, initial_lr=0.0005, lr_decay=0.1 ** (1 / 1000))
    base.update(kw)
    return TrainConfig(**base)


def new_vstructure_state(cfg: TrainConfig) -> TrainState:
    from .seeding import subseed

    return new_state(cfg, VStructureNet(cfg.model, seed=subseed(cfg.seed, "init")))


def run_vstructure_epochs(state: TrainState, cfg: TrainConfig, until=None, debug=False):
    return run_epochs(
        state,
        cfg,
        until,
        sample_fn=lambda rng: sample_vstructure_cases(rng, cfg.d_range, cfg.m_range),
        loss_fn=vstructure_loss,
        debug=debug,
    )


def train_vstructure(cfg: TrainConfig):
    state = run_vstructure_epochs(new_vstructure_state(cfg), cfg)
    return state.model, state.trace


# --------------------------------------------------------------------------
# CPDAG assembly


def _find_cycle(dmat):
    """Return the node sequence of one directed cycle, or ``None``."""
    d = dmat.shape[0]
    color = [0] * d
    stack_path = []

    def visit(v):
        color[v] = 1
        stack_path.append(v)
        for w in np.flatnonzero(dmat[v]):
            if color[w] == 1:
                return stack_path[stack_path.index(w):]
            if color[w] == 0:
                found = visit(int(w))
                if found:
                    return found
        color[v] = 2
        stack_path.pop()
        return None

    for v in range(d):
        if color[v] == 0:
            found = visit(v)
            if found:
                return found
    return None


def assemble_cpdag(labels: ThreeClassLabels, child_probs, threshold=0.5):
    """Orient v-structures from per-immorality child probabilities, then apply Meek.

    ``child_probs(pa, cc, ne)`` returns one probability per candidate child.
    Returns ``(cpdag, report)`` where ``report`` rows are
    ``(pair, child, probability, decision)``.
    """
    d = labels.d
    skeleton = set(labels.pairs_of(SKELETON))
    claims = {}  # (a, b) meaning a -> b  ->  strongest supporting probability
    report = []
    for pair in labels.pairs_of(MORALIZED):
        pa, cc, ne = immorality_context(labels, pair)
        if not cc:
            continue
        probs = np.asarray(child_probs(pa, cc, ne), dtype=np.float64)
        for k, p in zip(cc, probs):
            chosen = bool(p > threshold)
            report.append((pa, k, float(p), chosen))
            if chosen:
                for parent in pa:
                    claims[(parent, k)] = max(claims.get((parent, k), 0.0), float(p))

    directed = {}
    for (a, b), p in claims.items():
        rev = claims.get((b, a))
        if rev is None or p > rev:
            directed[(a, b)] = p
    dmat = np.zeros((d, d), dtype=bool)
    for a, b in directed:
        dmat[a, b] = True
    # break any directed cycle at its weakest orientation
    while (cycle := _find_cycle(dmat)) is not None:
        edges = list(zip(cycle, cycle[1:] + cycle[:1]))
        weakest = min(edges, key=lambda e: directed[e])
        dmat[weakest] = False
        del directed[weakest]
    undirected = skeleton - {_pair(a, b) for a, b in directed}
    cpdag = apply_meek_rules(Cpdag(d, frozenset(directed), frozenset(undirected)))
    return cpdag, report


def predicted_labels(probs: np.ndarray) -> ThreeClassLabels:
    ids = np.asarray(probs).argmax(axis=-1)
    ids = np.maximum(ids, ids.T)
    np.fill_diagonal(ids, NO_EDGE)
    return ThreeClassLabels.from_class_ids(ids)


def estimate_cpdag(x, stage1: BamNet, stage2: VStructureNet, threshold=0.5):
    """Two-step CPDAG estimate from an ``(M, d)`` data matrix; returns ``(cpdag, report, probs)``."""
    x = np.asarray(x, dtype=np.float64)
    probs = predict(x, stage1)
    labels = predicted_labels(probs)

    def child_probs(pa, cc, ne):
        case = ImmoralityCase(
            _standardize(x[:, list(pa)]), _standardize(x[:, cc]), _standardize(x[:, ne]), tuple(pa), tuple(cc), tuple(ne)
        )
        with torch.no_grad():
            return stage2(case).cpu().numpy()

    cpdag, report = assemble_cpdag(labels, child_probs, threshold)
    return cpdag, report, probs


def oracle_child_probs(g: DagSpec):
    """Ground-truth second stage: 1 for true common children, 0 otherwise."""

    def fn(pa, cc, ne):
        return [float((pa[0], k) in g.edges and (pa[1], k) in g.edges) for k in cc]

    return fn


def oracle_cpdag(g: DagSpec) -> Cpdag:
    return assemble_cpdag(derive_three_class_labels(g), oracle_child_probs(g))[0]


def write_report_csv(report, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "candidate_child", "probability", "decision"])
        for pa, k, p, chosen in report:
            w.writerow([f"{pa[0]}-{pa[1]}", k, repr(p), "directed" if chosen else "rejected"])
