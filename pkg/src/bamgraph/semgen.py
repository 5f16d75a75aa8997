"""Structural equation model simulation with random Chebyshev dependencies.

Every node column is produced in topological order by

1. dividing each parent column by its within-batch max absolute value,
2. evaluating the node's structural function,
3. standardizing the result with the batch mean and std,
4. clamping to ``[-5, 5]``.

The univariate test families (linear, sine, cosine, square, cube) skip
step 1 and apply ``g`` to the standardized parent columns directly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateColumnError, InvalidParameterError
from .graphs import DagSpec, ThreeClassLabels, derive_three_class_labels, sample_er_dag, sample_graph_params

DEGREE = 5
CLAMP = 5.0
MIN_STD = 1e-12
MAX_RESAMPLE = 10

DEPENDENCIES = ("chebyshev", "linear", "sine", "cosine", "square", "cube", "multiplicative", "random_mlp")
# the seven families used for evaluation
TEST_DEPENDENCIES = ("chebyshev", "linear", "sine", "cosine", "square", "cube", "multiplicative")


def chebyshev_t(n: int, x):
    """First-kind Chebyshev polynomial ``T_n`` via the three-term recurrence."""
    x = np.asarray(x, dtype=np.float64)
    t_prev, t = np.ones_like(x), x
    if n == 0:
        return t_prev
    for _ in range(n - 1):
        t_prev, t = t, 2.0 * x * t - t_prev
    return t


def bivariate_term(x, y, mu_x: float, mu_y: float):
    """Shifted product term, bounded by 1 in absolute value on ``[-1, 1]^2``."""
    return (x - mu_x) * (y - mu_y) / ((1.0 + abs(mu_x)) * (1.0 + abs(mu_y)))


@dataclass
class GaussianMixtureSpec:
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "GaussianMixtureSpec":
        n = int(rng.integers(1, 6))
        means = rng.uniform(-1.0, 1.0, n)
        stds = rng.uniform(0.05, 1.0, n)
        w = rng.uniform(0.3, 1.0, n)
        return cls(means, stds, w / w.sum())

    def transform(self, u, z):
        """Map uniform ``u`` and standard normal ``z`` draws to mixture samples."""
        comp = np.searchsorted(np.cumsum(self.weights), u, side="right")
        comp = np.minimum(comp, self.n_components - 1)
        return self.means[comp] + self.stds[comp] * z


@dataclass
class NodeParams:
    alpha: np.ndarray  # univariate Chebyshev coefficients, degree 1..5
    alpha_m: float
    beta: dict  # parent -> weight
    pair_terms: dict  # (s, t) with s < t -> (delta, mu_s, mu_t)
    noise_terms: dict  # parent -> (mu_parent, mu_noise)
    mixture: GaussianMixtureSpec


@dataclass
class ChebyshevSemSpec:
    graph: DagSpec
    nodes: list

    def permute(self, perm) -> "ChebyshevSemSpec":
        """Relabel node ``v`` as ``perm[v]`` keeping every parameter attached to its node."""
        perm = list(perm)
        nodes = [None] * self.graph.d
        for v, p in enumerate(self.nodes):
            pair_terms = {}
            for (s, t), (delta, mu_s, mu_t) in p.pair_terms.items():
                s2, t2 = perm[s], perm[t]
                pair_terms[(s2, t2) if s2 < t2 else (t2, s2)] = (delta, mu_s, mu_t) if s2 < t2 else (delta, mu_t, mu_s)
            nodes[perm[v]] = NodeParams(
                alpha=p.alpha.copy(),
                alpha_m=p.alpha_m,
                beta={perm[w]: b for w, b in p.beta.items()},
                pair_terms=pair_terms,
                noise_terms={perm[w]: m for w, m in p.noise_terms.items()},
                mixture=p.mixture,
            )
        return ChebyshevSemSpec(self.graph.permute(perm), nodes)


@dataclass
class NoiseDraws:
    """Raw per-node random draws, one column per node.

    Supplying the same draws (permuted alongside the spec) makes simulation
    commute exactly with node relabelling.
    """

    u: np.ndarray  # mixture component selectors
    z: np.ndarray  # standard normals
    eps2: np.ndarray  # multiplicative noise, U[-1, 1]

    @classmethod
    def sample(cls, m: int, d: int, rng: np.random.Generator) -> "NoiseDraws":
        return cls(rng.random((m, d)), rng.standard_normal((m, d)), rng.uniform(-1.0, 1.0, (m, d)))

    def permute(self, perm) -> "NoiseDraws":
        inv = np.argsort(perm)
        return NoiseDraws(self.u[:, inv], self.z[:, inv], self.eps2[:, inv])


@dataclass
class TestDependency:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEPENDENCIES:
            raise InvalidParameterError(f"unknown dependency {self.kind!r}; expected one of {DEPENDENCIES}")


def _sample_pair_terms(parents, rng):
    pairs = [(s, t) for k, s in enumerate(parents) for t in parents[k + 1:]]
    if not pairs:
        return {}
    raw = rng.uniform(-1.0, 1.0, len(pairs))
    raw = raw / np.abs(raw).sum()
    return {pr: (float(dl), float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))) for pr, dl in zip(pairs, raw)}


def sample_sem_spec(g: DagSpec, rng: np.random.Generator) -> ChebyshevSemSpec:
    nodes = []
    fact = np.array([math.factorial(i) for i in range(1, DEGREE + 1)], dtype=np.float64)
    for v in range(g.d):
        parents = g.parents(v)
        alpha_t = rng.uniform(-1.0, 1.0, DEGREE) / fact
        alpha_m_t = rng.uniform(-1.0, 1.0)
        # absolute-value denominator: the signed sum can vanish
        denom = np.abs(alpha_t).sum() + abs(alpha_m_t)
        beta = {w: float(rng.uniform(0.7, 1.3)) / len(parents) for w in parents}
        pair_terms = _sample_pair_terms(parents, rng)
        noise_terms = {w: (float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))) for w in parents}
        nodes.append(
            NodeParams(
                alpha=alpha_t / denom,
                alpha_m=float(alpha_m_t / denom),
                beta=beta,
                pair_terms=pair_terms,
                noise_terms=noise_terms,
                mixture=GaussianMixtureSpec.sample(rng),
            )
        )
    return ChebyshevSemSpec(g, nodes)


def _max_abs_scale(col):
    m = np.max(np.abs(col))
    return col / m if m > 0 else col


def _scaled(x_pa: dict) -> dict:
    return {w: _max_abs_scale(col) for w, col in x_pa.items()}


def _finish_column(raw, v):
    std = raw.std()
    if not np.isfinite(std) or std < MIN_STD:
        raise DegenerateColumnError(f"column {v} has std {std:.3g}")
    return np.clip((raw - raw.mean()) / std, -CLAMP, CLAMP)


def _chebyshev_node(p: NodeParams, scaled: dict, eps1, eps2):
    out = eps1.copy()
    if not scaled:
        return out
    for w, b in p.beta.items():
        x = scaled[w]
        out += b * sum(p.alpha[n - 1] * chebyshev_t(n, x) for n in range(1, DEGREE + 1))
    out += p.alpha_m * _multiplicative_part(p, scaled, eps2)
    return out


def _multiplicative_part(p: NodeParams, scaled: dict, eps2):
    acc = np.zeros_like(eps2)
    for (s, t), (delta, mu_s, mu_t) in p.pair_terms.items():
        acc += delta * bivariate_term(scaled[s], scaled[t], mu_s, mu_t)
    for w, (mu_w, mu_e) in p.noise_terms.items():
        acc += bivariate_term(scaled[w], eps2, mu_w, mu_e)
    return acc


def _run(g: DagSpec, m: int, noise: NoiseDraws, node_fn) -> np.ndarray:
    x = np.empty((m, g.d))
    for v in g.topological_order():
        x[:, v] = _finish_column(node_fn(v, {w: x[:, w] for w in g.parents(v)}, noise), v)
    return x


def _with_resampling(g, m, rng, noise, node_fn):
    if noise is not None:
        return _run(g, m, noise, node_fn)
    for attempt in range(MAX_RESAMPLE):
        try:
            return _run(g, m, NoiseDraws.sample(m, g.d, rng), node_fn)
        except DegenerateColumnError:
            if attempt == MAX_RESAMPLE - 1:
                raise


def simulate_sem(spec: ChebyshevSemSpec, m: int, rng: np.random.Generator, noise: NoiseDraws | None = None) -> np.ndarray:
    """Draw an ``(m, d)`` data matrix from a Chebyshev SEM.

    If ``noise`` is given it is used as-is and a degenerate column raises
    immediately; otherwise noise is resampled up to 10 times.
    """
    if m < 2:
        raise InvalidParameterError(f"need at least 2 samples, got {m}")

    def node_fn(v, x_pa, nz):
        p = spec.nodes[v]
        eps1 = p.mixture.transform(nz.u[:, v], nz.z[:, v])
        return _chebyshev_node(p, _scaled(x_pa), eps1, nz.eps2[:, v])

    return _with_resampling(spec.graph, m, rng, noise, node_fn)


def generate_training_pair(
    rng: np.random.Generator,
    d_range: tuple[int, int] = (10, 100),
    m_range: tuple[int, int] = (50, 1000),
) -> tuple[np.ndarray, ThreeClassLabels]:
    x, _, labels = generate_training_world(rng, d_range, m_range)
    return x, labels


def generate_training_world(rng, d_range=(10, 100), m_range=(50, 1000)):
    """Like :func:`generate_training_pair` but also returns the sampled DAG."""
    d, q, m = sample_graph_params(rng, d_range, m_range)
    g = sample_er_dag(d, q, rng)
    spec = sample_sem_spec(g, rng)
    return simulate_sem(spec, m, rng), g, derive_three_class_labels(g)


# --------------------------------------------------------------------------
# test dependencies

_UNIVARIATE = {
    "linear": lambda x: x,
    "sine": np.sin,
    "cosine": np.cos,
    "square": np.square,
    "cube": lambda x: x**3,
}


class RandomMlp:
    """Randomly initialized MLP on ``(parents..., noise)`` with scalar output.

    The activation is applied after every layer, including the last, so a
    tanh network is bounded in ``(-1, 1)``.
    """

    def __init__(self, n_in: int, rng: np.random.Generator, layers=None, width=None, activation=None):
        self.n_layers = int(layers if layers is not None else rng.integers(1, 6))
        self.width = int(width if width is not None else rng.integers(4, 65))
        self.activation = activation if activation is not None else ("relu" if rng.random() < 0.5 else "tanh")
        sizes = [n_in] + [self.width] * (self.n_layers - 1) + [1]
        self.weights = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (a + b))
            self.weights.append((rng.uniform(-limit, limit, (a, b)), rng.uniform(-0.1, 0.1, b)))

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        h = inputs
        for w, b in self.weights:
            h = h @ w + b
            h = np.maximum(h, 0.0) if self.activation == "relu" else np.tanh(h)
        return h[:, 0]


def generate_test_data(
    g: DagSpec,
    dep: TestDependency,
    m: int,
    rng: np.random.Generator,
    noise: NoiseDraws | None = None,
) -> np.ndarray:
    if m < 2:
        raise InvalidParameterError(f"need at least 2 samples, got {m}")
    if dep.kind == "chebyshev":
        return simulate_sem(sample_sem_spec(g, rng), m, rng, noise)

    mixtures = [GaussianMixtureSpec.sample(rng) for _ in range(g.d)]
    if dep.kind in _UNIVARIATE:
        fn = _UNIVARIATE[dep.kind]
        coef = {}
        for v in range(g.d):
            pa = g.parents(v)
            coef[v] = {w: float(rng.choice([-1.0, 1.0]) * rng.uniform(0.7, 1.3)) / len(pa) for w in pa}

        def node_fn(v, x_pa, nz):
            # g acts on the standardized parent; max-abs scaling would flatten cos and sin to near-linear
            out = mixtures[v].transform(nz.u[:, v], nz.z[:, v])
            for w, a in coef[v].items():
                out = out + a * fn(x_pa[w])
            return out

    elif dep.kind == "multiplicative":
        spec = sample_sem_spec(g, rng)

        def node_fn(v, x_pa, nz):
            if not x_pa:
                return mixtures[v].transform(nz.u[:, v], nz.z[:, v])
            p = spec.nodes[v]
            return p.alpha_m * _multiplicative_part(p, _scaled(x_pa), nz.eps2[:, v])

    else:  # random_mlp
        nets = {
            v: RandomMlp(len(g.parents(v)) + 1, rng, dep.params.get("layers"), dep.params.get("width"), dep.params.get("activation"))
            for v in range(g.d)
        }

        def node_fn(v, x_pa, nz):
            eps = mixtures[v].transform(nz.u[:, v], nz.z[:, v])
            if not x_pa:
                return eps
            scaled = _scaled(x_pa)
            inputs = np.column_stack([scaled[w] for w in g.parents(v)] + [eps])
            return nets[v](inputs)

    return _with_resampling(g, m, rng, noise, node_fn)


# --------------------------------------------------------------------------
# CSV


def write_data_csv(x: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"v{i + 1}" for i in range(x.shape[1])])
        for row in x:
            w.writerow([repr(float(v)) for v in row])


def read_data_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise InvalidParameterError(f"{path}: expected a header and at least one data row")
    return np.asarray([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
