"""Three-term loss, Adam with constraint projection, on-the-fly training and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bamnet import BamNet, ModelConfig
from .diffkernel import ParamStore
from .errors import (
    CheckpointError,
    CheckpointLengthError,
    CheckpointMismatchError,
    CheckpointVersionError,
    InvalidParameterError,
    NonFiniteError,
    ShapeMismatchError,
)
from .graphs import ThreeClassLabels
from .semgen import generate_training_pair
from .seeding import substream, subseed

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 1000
    samples_per_epoch: int = 128
    initial_lr: float = 0.0005
    lr_decay: float = 0.1 ** (1 / 500)
    minibatch: int = 1
    seed: int = 0
    d_range: tuple = (10, 100)
    m_range: tuple = (50, 1000)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.d_range, self.m_range = tuple(self.d_range), tuple(self.m_range)
        if not self.initial_lr > 0:
            raise InvalidParameterError(f"initial_lr must be > 0, got {self.initial_lr}")
        if not 0 < self.lr_decay <= 1:
            raise InvalidParameterError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.minibatch < 1 or self.epochs < 0 or self.samples_per_epoch < 1:
            raise InvalidParameterError("minibatch and samples_per_epoch must be >= 1, epochs >= 0")
        if self.d_range[0] < 2 or self.m_range[0] < 2:
            raise InvalidParameterError("d_range and m_range must start at >= 2")

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay**epoch

    def to_dict(self):
        out = asdict(self)
        out["d_range"], out["m_range"] = list(self.d_range), list(self.m_range)
        return out


@dataclass
class LossBreakdown:
    total: torch.Tensor
    binary: torch.Tensor
    categorical: torch.Tensor
    penalty: torch.Tensor

    def item(self) -> dict:
        return {
            "L_b": float(self.binary.detach()),
            "L_c": float(self.categorical.detach()),
            "L_p": float(self.penalty.detach()),
            "total": float(self.total.detach()),
        }


def _safe_sqrt(x):
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def loss_total(pred: torch.Tensor, labels: ThreeClassLabels | torch.Tensor) -> LossBreakdown:
    """Binary + categorical cross-entropy + moral-support penalty over pairs ``i > j``."""
    target = labels.classes if isinstance(labels, ThreeClassLabels) else labels
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeMismatchError(f"prediction {tuple(pred.shape)} vs labels {tuple(target.shape)}")
    d = pred.shape[0]
    lower = torch.tril(torch.ones(d, d, dtype=torch.bool), diagonal=-1)

    logp = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP).log()
    l_c = -(target * logp).sum(-1)[lower].sum()

    edge_true = target[..., 1] + target[..., 2]
    edge_hat = (pred[..., 1] + pred[..., 2]).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    bce = edge_true * edge_hat.log() + (1 - edge_true) * (1 - edge_hat).log()
    l_b = -bce[lower].sum()

    # supporting skeleton paths i - k - j must go through a third node
    skel = pred[..., 1] * (1 - torch.eye(d, dtype=pred.dtype))
    support = _safe_sqrt(skel @ skel)
    l_p = torch.relu(pred[..., 2] - support)[lower].sum()
    return LossBreakdown(l_b + l_c + l_p, l_b, l_c, l_p)


class Optimizer:
    """Adam over a :class:`ParamStore` with per-epoch exponential lr decay and projection."""

    def __init__(self, params: ParamStore, cfg: TrainConfig):
        self.params, self.cfg = params, cfg
        self.adam = torch.optim.Adam([p for _, p in params], lr=cfg.initial_lr, betas=(0.9, 0.999), eps=1e-8)

    def step(self, epoch: int) -> None:
        for name, p in self.params:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise NonFiniteError(f"non-finite gradient in parameter {name}", name=name)
        for group in self.adam.param_groups:
            group["lr"] = self.cfg.lr_at(epoch)
        self.adam.step()
        self.params.project()

    def moments(self) -> dict:
        out = {}
        for name, p in self.params:
            st = self.adam.state.get(p)
            if st:
                out[f"optim/exp_avg/{name}"] = st["exp_avg"]
                out[f"optim/exp_avg_sq/{name}"] = st["exp_avg_sq"]
                out["optim/step"] = torch.as_tensor(float(st["step"]), dtype=torch.float64)
        return out

    def load_moments(self, tensors: dict) -> None:
        if "optim/step" not in tensors:
            return
        step = tensors["optim/step"].reshape(())
        for name, p in self.params:
            key = f"optim/exp_avg/{name}"
            if key in tensors:
                self.adam.state[p] = {
                    "step": step.clone().to(torch.float32),
                    "exp_avg": tensors[key].to(p.dtype).clone(),
                    "exp_avg_sq": tensors[f"optim/exp_avg_sq/{name}"].to(p.dtype).clone(),
                }


def optimizer_step(opt: Optimizer, epoch: int) -> None:
    opt.step(epoch)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: Optimizer
    trace: list
    epoch: int = 0  # next epoch to run


def new_state(cfg: TrainConfig, model=None) -> TrainState:
    model = model if model is not None else BamNet(cfg.model, seed=subseed(cfg.seed, "init"))
    return TrainState(model, Optimizer(ParamStore.from_module(model), cfg), [])


def _epoch_stream(cfg: TrainConfig, epoch: int):
    return substream(cfg.seed, f"data/{epoch}")


def run_epochs(state: TrainState, cfg: TrainConfig, until: int | None = None, sample_fn=None, loss_fn=None, debug=False):
    """Advance ``state`` to epoch ``until`` (default ``cfg.epochs``).

    ``sample_fn(rng)`` yields one training example and ``loss_fn(model,
    example)`` returns a :class:`LossBreakdown`; both default to the
    three-class task.
    """
    until = cfg.epochs if until is None else until
    sample_fn = sample_fn or (lambda rng: generate_training_pair(rng, cfg.d_range, cfg.m_range))
    loss_fn = loss_fn or (lambda model, ex: loss_total(model(ex[0]), ex[1]))
    model, opt = state.model, state.optimizer
    model.train()
    while state.epoch < until:
        rng = _epoch_stream(cfg, state.epoch)
        sums = np.zeros(4)
        n_steps = cfg.samples_per_epoch // cfg.minibatch
        for _ in range(n_steps):
            opt.params.zero_grad()
            for _ in range(cfg.minibatch):
                lb = loss_fn(model, sample_fn(rng))
                if not math.isfinite(float(lb.total.detach())):
                    raise NonFiniteError(f"non-finite loss at epoch {state.epoch}")
                (lb.total / cfg.minibatch).backward()
                sums += list(lb.item().values())
            opt.step(state.epoch)
        n = n_steps * cfg.minibatch
        row = {"epoch": state.epoch, "L_b": sums[0] / n, "L_c": sums[1] / n, "L_p": sums[2] / n, "total": sums[3] / n}
        state.trace.append(row)
        if debug:
            opt.params.check()
        log.info("epoch %d  L_b %.4f  L_c %.4f  L_p %.4f  total %.4f", *row.values())
        state.epoch += 1
    return state


def train_on_the_fly(cfg: TrainConfig, model=None, **kw):
    """Train on freshly simulated pairs, one step per minibatch; returns ``(model, trace)``."""
    state = run_epochs(new_state(cfg, model), cfg, **kw)
    return state.model, state.trace


def evaluation_set(seed: int, n: int, d_range=(10, 100), m_range=(50, 1000)):
    rng = substream(seed, "eval")
    return [generate_training_pair(rng, d_range, m_range) for _ in range(n)]


def evaluate_loss(model, pairs) -> float:
    """Mean per-pair total loss on a fixed evaluation set."""
    model.eval()
    vals = []
    with torch.no_grad():
        for x, labels in pairs:
            d = labels.d
            vals.append(float(loss_total(model(x), labels).total) / (d * (d - 1) / 2))
    return float(np.mean(vals))


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "L_b", "L_c", "L_p", "total"])
        w.writeheader()
        for row in trace:
            w.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in w.fieldnames})


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"BAMCKPT1"
VERSION = 1
_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def save_checkpoint(tensors, path, meta: dict | None = None) -> None:
    """Write named tensors (a module, :class:`ParamStore` or mapping).

    Layout: 8-byte magic, little-endian uint64 header length, JSON header
    ``{name: {shape, dtype, offset}}`` plus ``__meta__``, then float64 data
    in sorted-name order, so saving a loaded checkpoint reproduces its bytes.
    """
    if isinstance(tensors, torch.nn.Module):
        tensors = dict(tensors.named_parameters())
    elif isinstance(tensors, ParamStore):
        tensors = dict(tensors)
    header = {"__meta__": {"version": VERSION, **(meta or {})}}
    chunks, offset = [], 0
    for name, t in sorted(tensors.items()):
        arr = t.detach().cpu().to(torch.float64).numpy().astype("<f8")
        header[name] = {"shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", ""), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(meta, tensors)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        if raw[:7] == MAGIC[:7]:
            raise CheckpointVersionError(f"{path}: unsupported checkpoint version {raw[7:8]!r}, expected {VERSION}")
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if len(raw) < 16:
        raise CheckpointLengthError(f"{path}: truncated, expected at least 16 bytes, got {len(raw)}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointLengthError(f"{path}: truncated header, expected at least {16 + hlen} bytes, got {len(raw)}")
    header = json.loads(raw[16:16 + hlen])
    meta = header.pop("__meta__", {})
    if meta.get("version") != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {meta.get('version')}, expected {VERSION}")
    base = 16 + hlen
    expected = base + sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in header.values())
    if len(raw) != expected:
        raise CheckpointLengthError(f"{path}: corrupt length, expected {expected} bytes, got {len(raw)}")
    tensors = {}
    for name, e in header.items():
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + 8 * n], dtype="<f8").reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.copy()).to(_DTYPES.get(e["dtype"], torch.float64))
    return meta, tensors


def load_into(model: torch.nn.Module, tensors: dict) -> None:
    params = dict(model.named_parameters())
    stored = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointMismatchError(f"parameter mismatch: missing {missing}, extra {extra}", missing, extra)
    with torch.no_grad():
        for name, p in params.items():
            if tuple(p.shape) != tuple(stored[name].shape):
                raise CheckpointMismatchError(
                    f"parameter {name}: shape {tuple(stored[name].shape)} in checkpoint, model expects {tuple(p.shape)}",
                    [name],
                )
            p.copy_(stored[name].to(p.dtype))


def save_training_state(state: TrainState, cfg: TrainConfig, path, kind="bamnet") -> None:
    tensors = dict(state.model.named_parameters())
    tensors.update(state.optimizer.moments())
    meta = {"kind": kind, "epoch": state.epoch, "train_config": cfg.to_dict(), "model_config": cfg.model.to_dict(), "trace": state.trace}
    save_checkpoint(tensors, path, meta)


def load_model(path, kind="bamnet"):
    """Rebuild a model from a checkpoint written by :func:`save_training_state`."""
    meta, tensors = read_checkpoint(path)
    if meta.get("kind", kind) != kind:
        raise CheckpointMismatchError(f"{path}: checkpoint holds a {meta.get('kind')} model, expected {kind}")
    cfg = ModelConfig(**meta["model_config"])
    if kind == "bamnet":
        model = BamNet(cfg)
    else:
        from .cpdagnet import VStructureNet

        model = VStructureNet(cfg)
    load_into(model, tensors)
    return model, meta, tensors


def resume_state(path, cfg: TrainConfig, kind="bamnet") -> TrainState:
    model, meta, tensors = load_model(path, kind)
    state = TrainState(model, Optimizer(ParamStore.from_module(model), cfg), list(meta.get("trace", [])), int(meta.get("epoch", 0)))
    state.optimizer.load_moments(tensors)
    return state
