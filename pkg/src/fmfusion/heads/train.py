"""Adam optimizer, early-stopped training loops, prediction and checkpoints.

Checkpoint layout (little-endian)::

    b"EMBH" | u16 version | u32 header length | header JSON (UTF-8)
    | float64 parameter blob, parameters concatenated in header order
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import BadMagic, ConfigError, DimensionMismatch, EmptySplit, NumericError, TruncatedFile, VersionMismatch
from ..report import MetricReport
from .models import MODEL_TYPES, GatedAttentionMIL, Model, SlideMLP, loss_and_grads
from .nn import cross_entropy, softmax

CKPT_MAGIC = b"EMBH"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 20
    max_epochs: int = 200
    min_delta: float = 1e-6
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyper-parameters")
        if self.patience < 1 or self.max_epochs < 0:
            raise ConfigError("patience must be >= 1 and max_epochs >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, decay: float = 0.0) -> None:
    """In-place bias-corrected Adam update.

    ``decay`` adds coupled L2 (decay * param) to the gradient; leave it at 0
    when ``grads`` already include the penalty.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionMismatch(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if decay:
            g = g + decay * p
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


@dataclass
class TrainedModel:
    model: Model
    history: list = field(default_factory=list)   # (epoch, train_loss, val_loss)
    best_epoch: int = 0
    rng_record: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.model.params

    def history_report(self) -> MetricReport:
        rep = MetricReport(["epoch", "train_loss", "val_loss"])
        for e, tr, va in self.history:
            rep.add(epoch=e, train_loss=tr, val_loss=va)
        return rep


def _streams(seed):
    init_ss, order_ss, drop_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init_ss), np.random.default_rng(order_ss), np.random.default_rng(drop_ss)


def mean_loss(model: Model, items) -> float:
    """Mean data cross-entropy in eval mode."""
    total = 0.0
    for x, y in items:
        logits, _, _ = model.forward(x)
        total += cross_entropy(logits, int(y))[0]
    return total / len(items)


def fit(model: Model, train_items, val_items, cfg: TrainConfig, order_rng, drop_rng) -> TrainedModel:
    """One sample per step, seeded shuffling, early stopping on validation loss.

    Returns the parameters from the epoch with the lowest validation loss.
    """
    if not train_items or not val_items:
        raise EmptySplit("training and validation splits must both be non-empty")
    state = AdamState.zeros_like(model.params)
    best = model.copy()
    best_loss, best_epoch, wait = np.inf, 0, 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        running = 0.0
        for i in order_rng.permutation(len(train_items)):
            x, y = train_items[i]
            loss, grads = loss_and_grads(model, x, y, cfg.weight_decay, train_mode=True, rng=drop_rng)
            adam_step(model.params, grads, state, cfg)
            running += loss
        if not all(np.isfinite(p).all() for p in model.params.values()):
            raise NumericError(f"non-finite parameters after epoch {epoch}")
        val = mean_loss(model, val_items)
        history.append((epoch, running / len(train_items), val))
        if val < best_loss - cfg.min_delta:
            best_loss, best_epoch, wait = val, epoch, 0
            best = model.copy()
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    record = {"seed": cfg.seed, "order_state": order_rng.bit_generator.state["state"],
              "dropout_state": drop_rng.bit_generator.state["state"]}
    return TrainedModel(best, history, best_epoch, _jsonable(record))


def _jsonable(d):
    return json.loads(json.dumps(d, default=int))


def train_mil(train_bags, train_labels, val_bags, val_labels, cfg: TrainConfig = TrainConfig(), **arch) -> TrainedModel:
    """Train a gated-attention MIL model on lists of T x D bags."""
    if not len(train_bags) or not len(val_bags):
        raise EmptySplit("training and validation splits must both be non-empty")
    init_rng, order_rng, drop_rng = _streams(cfg.seed)
    model = GatedAttentionMIL.init(np.asarray(train_bags[0]).shape[1], init_rng, dropout=cfg.dropout, **arch)
    return fit(model, list(zip(train_bags, train_labels)), list(zip(val_bags, val_labels)), cfg, order_rng, drop_rng)


def train_mlp(train_x, train_labels, val_x, val_labels, cfg: TrainConfig = TrainConfig(), **arch) -> TrainedModel:
    """Train the six-layer slide MLP on row vectors."""
    train_x, val_x = np.asarray(train_x, dtype=np.float64), np.asarray(val_x, dtype=np.float64)
    if not len(train_x) or not len(val_x):
        raise EmptySplit("training and validation splits must both be non-empty")
    init_rng, order_rng, drop_rng = _streams(cfg.seed)
    model = SlideMLP.init(train_x.shape[1], init_rng, dropout=cfg.dropout, **arch)
    return fit(model, list(zip(train_x, train_labels)), list(zip(val_x, val_labels)), cfg, order_rng, drop_rng)


@dataclass
class Predictions:
    prob_high: np.ndarray
    labels: np.ndarray
    attention: list = None


def predict(model, data) -> Predictions:
    """Class-1 probability per sample; label is 1 when the probability is >= 0.5."""
    if isinstance(model, TrainedModel):
        model = model.model
    probs, attn = [], []
    for x in data:
        logits, a, _ = model.forward(x)
        probs.append(softmax(logits)[1])
        if a is not None:
            attn.append(a)
    probs = np.array(probs)
    return Predictions(probs, (probs >= 0.5).astype(np.int64), attn if attn else None)


def save_checkpoint(tm: TrainedModel, path) -> None:
    m = tm.model
    header = {
        "kind": m.kind,
        "arch": m.arch,
        "params": [[k, list(v.shape)] for k, v in m.params.items()],
        "best_epoch": tm.best_epoch,
        "history": [list(h) for h in tm.history],
        "rng": tm.rng_record,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in m.params.values())
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(hb)) + hb + blob)


def load_checkpoint(path) -> TrainedModel:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not an EMBH checkpoint")
    if len(buf) < 10:
        raise TruncatedFile(f"{path}: truncated header")
    version, hlen = struct.unpack("<HI", buf[4:10])
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}")
    if len(buf) < 10 + hlen:
        raise TruncatedFile(f"{path}: truncated header")
    header = json.loads(buf[10:10 + hlen].decode("utf-8"))
    pos = 10 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * 8
        if pos + n > len(buf):
            raise TruncatedFile(f"{path}: parameter blob ends early")
        params[name] = np.frombuffer(buf[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
    model = MODEL_TYPES[header["kind"]](params, header["arch"])
    return TrainedModel(model, [tuple(h) for h in header["history"]], header["best_epoch"], header["rng"])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
