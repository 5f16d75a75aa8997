"""Observation-to-dependency network with bilinear SPD attention.

Layout conventions: observational tensors are ``(M, d, C)`` (samples,
attributes, channels); SPD stacks are channel-first ``(C, d, d)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .diffkernel import EIG_FLOOR, NONNEGATIVE, contract, default_dtype, log_eig, symmetrize, tag
from .errors import ConstraintViolationError, InvalidParameterError, NonFiniteError

DIAG_FLOOR = 1e-12


@dataclass
class ModelConfig:
    C: int = 100
    c: int = 100
    heads: int = 5
    n_attr_layers: int = 10
    n_sample_layers: int = 10
    n_dense_layers: int = 10
    n_bilinear_layers: int = 10
    activation_max_degree: int = 3
    precision: str = "f64"

    def __post_init__(self):
        if self.C % self.heads or self.c % self.heads:
            raise InvalidParameterError(f"C={self.C} and c={self.c} must be divisible by heads={self.heads}")
        if self.activation_max_degree < 1:
            raise InvalidParameterError("activation_max_degree must be >= 1")
        counts = (self.n_attr_layers, self.n_sample_layers, self.n_dense_layers, self.n_bilinear_layers)
        if min(counts) < 0:
            raise InvalidParameterError("layer counts must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise InvalidParameterError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return torch.float32 if self.precision == "f32" else torch.float64

    def to_dict(self):
        return asdict(self)


def _glorot(n_in, n_out):
    limit = math.sqrt(6.0 / (n_in + n_out))
    return nn.Parameter(torch.empty(n_in, n_out).uniform_(-limit, limit))


def _positive(*shape):
    """Nonnegative weights drawn from ``U(0, 2 / n_in)``."""
    return tag(nn.Parameter(torch.empty(*shape).uniform_(0.0, 2.0 / shape[-2])), NONNEGATIVE)


def _rezero(value=0.0, nonnegative=False):
    p = nn.Parameter(torch.tensor(float(value)))
    return tag(p, NONNEGATIVE) if nonnegative else p


# --------------------------------------------------------------------------
# functional building blocks


def channel_covariance(x: torch.Tensor) -> torch.Tensor:
    """Per-channel sample covariance of ``(M, d, C)`` data, returned as ``(C, d, d)``."""
    m = x.shape[0]
    if m < 2:
        raise InvalidParameterError(f"covariance needs M >= 2, got {m}")
    xc = (x - x.mean(dim=0, keepdim=True)).permute(2, 0, 1)  # (C, M, d)
    return symmetrize(xc.transpose(1, 2) @ xc) / (m - 1)


def custom_spd_softmax(s: torch.Tensor) -> torch.Tensor:
    """``sqrt(L) exp[S] sqrt(L)`` with ``L = diag(1 / exp[S] 1)``, per matrix of a stack.

    Written as ``exp(S_ij - (lse_i + lse_j) / 2)`` with row log-sum-exps,
    which subtracts the row maxima before exponentiating.
    """
    lse = torch.logsumexp(s, dim=-1)
    return torch.exp(s - 0.5 * (lse.unsqueeze(-1) + lse.unsqueeze(-2)))


def correlation_normalize(s: torch.Tensor) -> torch.Tensor:
    diag = torch.diagonal(s, dim1=-2, dim2=-1).clamp_min(DIAG_FLOOR)
    inv = diag.rsqrt()
    out = s * inv.unsqueeze(-1) * inv.unsqueeze(-2)
    # exact unit diagonal
    eye = torch.eye(s.shape[-1], dtype=s.dtype, device=s.device)
    return symmetrize(out) * (1 - eye) + eye


def spd_activation(s: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Elementwise ``sum_k w_k x^k`` (k = 1..len(w)); ``w`` is shared or per channel ``(C, K)``."""
    if bool((w < 0).any()) or bool((w.sum(dim=-1) > 1 + 1e-12).any()):
        raise ConstraintViolationError("activation weights need w_k >= 0 and sum(w) <= 1")
    out = torch.zeros_like(s)
    power = s
    for k in range(w.shape[-1]):
        wk = w[..., k]
        out = out + (wk.view(-1, 1, 1) if wk.ndim else wk) * power
        power = power * s
    return out


# --------------------------------------------------------------------------
# layers


class ChannelEmbedding(nn.Module):
    """``X + relu(X W1) W2`` broadcasting the scalar input over ``C`` channels."""

    def __init__(self, C):
        super().__init__()
        self.w1 = _glorot(1, C)
        self.w2 = _glorot(C, C)

    def forward(self, x):
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteError("input data contains non-finite values")
        xt = x.unsqueeze(-1)
        return xt + contract(F.relu(contract(xt, self.w1)), self.w2)


class ObservationalAttention(nn.Module):
    """Multihead self-attention between attributes or between samples, pre-norm residual."""

    def __init__(self, C, c, heads, axis="attributes"):
        super().__init__()
        if axis not in ("attributes", "samples"):
            raise InvalidParameterError(f"axis must be attributes or samples, got {axis!r}")
        if C % heads or c % heads:
            raise InvalidParameterError(f"C={C} and c={c} must be divisible by heads={heads}")
        self.axis, self.heads, self.c = axis, heads, c
        self.norm = nn.LayerNorm(C)
        self.wk = _glorot(C, c)
        self.wq = _glorot(C, c)
        self.wv = _glorot(C, C)
        self.scale = _rezero()

    def attend(self, x):
        """Attention across axis 1 of ``(B, L, C)``, batched over axis 0."""
        b, n, _ = x.shape
        h = self.heads
        k = contract(x, self.wk).view(b, n, h, -1).transpose(1, 2)
        q = contract(x, self.wq).view(b, n, h, -1).transpose(1, 2)
        v = contract(x, self.wv).view(b, n, h, -1).transpose(1, 2)
        # softmax(K Q^T / sqrt(c/h)) V with keys indexing rows; the fused kernel
        # avoids materialising the (L, L) weights, which matters along samples
        out = F.scaled_dot_product_attention(k, q, v)
        return out.transpose(1, 2).reshape(b, n, -1)

    def forward(self, x):
        z = self.norm(x)
        if self.axis == "samples":
            out = self.attend(z.transpose(0, 1)).transpose(0, 1)
        else:
            out = self.attend(z)
        return x + self.scale * out


class DenseBlock(nn.Module):
    """Pre-norm ReLU feed-forward ``C x C`` block with learnable residual scale."""

    def __init__(self, C):
        super().__init__()
        self.norm = nn.LayerNorm(C)
        self.w_a = _glorot(C, C)
        self.b_a = nn.Parameter(torch.zeros(C))
        self.w_b = _glorot(C, C)
        self.scale = _rezero()

    def forward(self, x):
        h = contract(F.relu(contract(self.norm(x), self.w_a) + self.b_a), self.w_b)
        return x + self.scale * h


class BilinearAttention(nn.Module):
    """Bilinear attention on a ``(C, d, d)`` SPD stack.

    Keys and queries are nonnegative channel mixtures of the input (within
    each head's channel group); per channel the scores are
    ``softmax~(K Q K)`` and the output is ``A S A``.
    """

    def __init__(self, C, heads):
        super().__init__()
        if C % heads:
            raise InvalidParameterError(f"C={C} must be divisible by heads={heads}")
        self.heads = heads
        ch = C // heads
        self.wk = _positive(heads, ch, ch)
        self.wq = _positive(heads, ch, ch)

    def mix(self, s, w):
        h, ch, _ = w.shape
        d = s.shape[-1]
        grouped = s.reshape(h, ch, d, d)
        return torch.einsum("hidk,hij->hjdk", grouped, w).reshape(h * ch, d, d)

    def forward(self, s, return_scores=False):
        if bool((self.wk < 0).any()) or bool((self.wq < 0).any()):
            raise ConstraintViolationError("bilinear key/query weights must be nonnegative")
        k = self.mix(s, self.wk)
        q = self.mix(s, self.wq)
        scores = custom_spd_softmax(symmetrize(k @ q @ k))
        out = symmetrize(scores @ s @ scores)
        return (out, scores) if return_scores else out


class BilinearBlock(nn.Module):
    """``corr(S + g * BAM(corr(S)))`` followed by the polynomial SPD activation.

    The activation weights are ``softplus(u) / (1 + sum softplus(u))`` so they
    stay nonnegative with sum below one.
    """

    def __init__(self, C, heads, degree=3):
        super().__init__()
        self.attention = BilinearAttention(C, heads)
        self.scale = _rezero(nonnegative=True)
        raw = torch.full((degree,), -4.0)
        raw[0] = 4.0
        self.act_raw = nn.Parameter(raw)

    def activation_weights(self):
        sp = F.softplus(self.act_raw)
        return sp / (1.0 + sp.sum())

    def forward(self, s, trace=None):
        if float(self.scale.detach()) < 0:
            raise ConstraintViolationError("residual scale of a bilinear block must be nonnegative")
        att = self.attention(correlation_normalize(s), return_scores=trace is not None)
        if trace is not None:
            att, scores = att
            trace.append(("scores", scores))
            trace.append(("bilinear", att))
        s = correlation_normalize(s + self.scale * att)
        if trace is not None:
            trace.append(("normalized", s))
        s = spd_activation(s, self.activation_weights())
        if trace is not None:
            trace.append(("activation", s))
        return s


class OutputHead(nn.Module):
    def __init__(self, C, n_out=3):
        super().__init__()
        self.w = nn.Parameter(torch.empty(C, n_out).normal_(0.0, 0.01))
        self.b = nn.Parameter(torch.zeros(n_out))

    def forward(self, e):
        """``(C, d, d)`` Euclidean stack -> ``(d, d, 3)`` symmetric class probabilities."""
        probs = torch.softmax(contract(e.permute(1, 2, 0), self.w) + self.b, dim=-1)
        probs = 0.5 * (probs + probs.transpose(0, 1))
        return probs / probs.sum(dim=-1, keepdim=True)


class ObservationTrunk(nn.Module):
    """Embedded data -> observational layers -> covariance -> SPD layers -> Log-Eig."""

    def __init__(self, cfg: ModelConfig, embed=True):
        super().__init__()
        self.embed = ChannelEmbedding(cfg.C) if embed else None
        obs = []
        for i in range(max(cfg.n_attr_layers, cfg.n_sample_layers, cfg.n_dense_layers)):
            if i < cfg.n_attr_layers:
                obs.append(ObservationalAttention(cfg.C, cfg.c, cfg.heads, "attributes"))
            if i < cfg.n_sample_layers:
                obs.append(ObservationalAttention(cfg.C, cfg.c, cfg.heads, "samples"))
            if i < cfg.n_dense_layers:
                obs.append(DenseBlock(cfg.C))
        self.observational = nn.ModuleList(obs)
        self.bilinear = nn.ModuleList(
            BilinearBlock(cfg.C, cfg.heads, cfg.activation_max_degree) for _ in range(cfg.n_bilinear_layers)
        )

    def forward(self, x, trace=None):
        h = self.embed(x) if self.embed is not None else x
        for layer in self.observational:
            h = layer(h)
        s = channel_covariance(h)
        if trace is not None:
            trace.append(("covariance", s))
        for block in self.bilinear:
            s = block(s, trace)
        return log_eig(s, EIG_FLOOR)


class BamNet(nn.Module):
    """Three-class edge classifier: ``(M, d)`` data -> ``(d, d, 3)`` probabilities."""

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        with _seeded(seed):
            self.trunk = ObservationTrunk(cfg)
            self.head = OutputHead(cfg.C)
        self.to(cfg.dtype)

    def forward(self, x, trace=None):
        x = torch.as_tensor(x, dtype=self.cfg.dtype)
        if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
            raise InvalidParameterError(f"input must be (M, d) with M, d >= 2, got {tuple(x.shape)}")
        return self.head(self.trunk(x, trace))


class _seeded:
    """Fork the torch RNG so parameter init depends only on ``seed``."""

    def __init__(self, seed):
        self.seed = seed

    def __enter__(self):
        if self.seed is not None:
            self._fork = torch.random.fork_rng()
            self._fork.__enter__()
            torch.manual_seed(self.seed)

    def __exit__(self, *exc):
        if self.seed is not None:
            self._fork.__exit__(*exc)


def model_forward(x, model: BamNet) -> torch.Tensor:
    return model(x)


def predict(x, model: BamNet):
    """Inference without autograd; returns a numpy ``(d, d, 3)`` array."""
    with torch.no_grad():
        return model(x).cpu().numpy()


def make_model(cfg: ModelConfig | None = None, seed: int = 0) -> BamNet:
    cfg = cfg or ModelConfig(precision="f32" if default_dtype() == torch.float32 else "f64")
    return BamNet(cfg, seed)
