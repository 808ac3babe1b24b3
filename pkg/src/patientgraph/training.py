"""Prediction heads, the multi-task loss, gradients, Adam and the training loop."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import gnn
from .gnn import GraphOps, LayerSpec, ModelParams, as_ops
from .metrics import MetricError, auc_roc

PROB_CLAMP = 1e-7
CHECKPOINT_FORMAT = "patientgraph-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.5
    learning_rate: float = 1e-3
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    # a finite loss above this also counts as divergence
    divergence_threshold: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if len(self.split_fractions) != 3 or any(f <= 0 for f in self.split_fractions):
            raise ValueError("split_fractions must be three positive numbers")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must sum to 1")
        if self.max_epochs < 1 or not (0 <= self.patience < self.max_epochs):
            raise ValueError("need max_epochs >= 1 and 0 <= patience < max_epochs")


# ---------------------------------------------------------------------------
# heads and loss


def heads_forward(emb: np.ndarray, weights: dict):
    """Mortality probability (sigmoid) and severity score (linear) per node."""
    logits = emb @ weights["mortality.w"] + weights["mortality.b"][0]
    severity = emb @ weights["severity.w"] + weights["severity.b"][0]
    return expit(logits), severity, logits


def _mask(mask, n) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        idx = m.astype(np.int64)
        m = np.zeros(n, dtype=bool)
        m[idx] = True
    if m.shape != (n,):
        raise ValueError(f"mask of shape {m.shape} for {n} nodes")
    if not m.any():
        raise ValueError("loss mask selects no nodes")
    return m


def loss_terms(y_hat, c_hat, y, c, mask) -> tuple[float, float]:
    """Masked-mean BCE (on probabilities clamped to [1e-7, 1-1e-7]) and MSE."""
    y_hat = np.asarray(y_hat, dtype=float)
    m = _mask(mask, y_hat.size)
    p = np.clip(y_hat[m], PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(y, dtype=float)[m]
    bce = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    mse = np.mean((np.asarray(c_hat, dtype=float)[m] - np.asarray(c, dtype=float)[m]) ** 2)
    return float(bce), float(mse)


def total_loss(y_hat, c_hat, y, c, cfg: TrainConfig, mask) -> float:
    bce, mse = loss_terms(y_hat, c_hat, y, c, mask)
    return cfg.lambda1 * bce + cfg.lambda2 * mse


def loss_and_grads(x, ops: GraphOps, params: ModelParams, y, c, mask, cfg: TrainConfig):
    """Train-mode forward, loss on ``mask`` and reverse-mode gradients of every weight.

    Returns ``(loss, grads, forward_result)``.
    """
    res = gnn.forward(x, ops, params, "train")
    w = params.weights
    emb = res.embedding
    y_hat, c_hat, _ = heads_forward(emb, w)
    m = _mask(mask, ops.n)
    loss = total_loss(y_hat, c_hat, y, c, cfg, m)
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss")

    k = m.sum()
    y = np.asarray(y, dtype=float)
    c = np.asarray(c, dtype=float)
    unclamped = (y_hat >= PROB_CLAMP) & (y_hat <= 1.0 - PROB_CLAMP)
    d_logit = np.where(m & unclamped, y_hat - y, 0.0) * (cfg.lambda1 / k)
    d_sev = np.where(m, 2.0 * (c_hat - c), 0.0) * (cfg.lambda2 / k)

    grads = {
        "mortality.w": emb.T @ d_logit,
        "mortality.b": np.array([d_logit.sum()]),
        "severity.w": emb.T @ d_sev,
        "severity.b": np.array([d_sev.sum()]),
    }
    d_emb = np.outer(d_logit, w["mortality.w"]) + np.outer(d_sev, w["severity.w"])
    grads.update(gnn.backward(d_emb, res, ops, params))
    return loss, grads, res


def backward(x, graph, params: ModelParams, y, c, cfg: TrainConfig, mask) -> dict:
    """Gradient of the multi-task loss for every trainable tensor (shape-matched)."""
    _, grads, _ = loss_and_grads(x, as_ops(graph), params, y, c, mask, cfg)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    return grads


def predict(x, graph, params: ModelParams, mode: str = "eval"):
    """``(mortality_prob, severity, attention)`` for every node."""
    res = gnn.forward(x, as_ops(graph), params, mode)
    y_hat, c_hat, _ = heads_forward(res.embedding, params.weights)
    return y_hat, c_hat, res.attention


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """In-place bias-corrected update of ``params``."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            p = params[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# ---------------------------------------------------------------------------
# splits


def split_dataset(n: int, labels, cfg: TrainConfig = TrainConfig()):
    """Stratified, seeded (train, val, test) boolean masks."""
    if n < 10:
        raise ValueError(f"need at least 10 nodes to split, got {n}")
    y = np.asarray(labels, dtype=bool)
    if y.shape != (n,):
        raise ValueError(f"labels have shape {y.shape}, expected ({n},)")
    rng = np.random.default_rng(cfg.seed)
    f_train, f_val, _ = cfg.split_fractions
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    for cls in (True, False):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(f_train * idx.size))
        n_val = int(round(f_val * idx.size))
        masks[0][idx[:n_train]] = True
        masks[1][idx[n_train:n_train + n_val]] = True
        masks[2][idx[n_train + n_val:]] = True
    for name, m in zip(("train", "val", "test"), masks):
        if not (y[m].any() and (~y[m]).any()):
            raise ValueError(f"{name} split lacks one of the classes; use a larger cohort")
    return tuple(masks)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def val_loss(self) -> list[float]:
        return [r["val_loss"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "test_loss", "val_auc"])
        for r in self.rows:
            auc = "" if r["val_auc"] is None else repr(r["val_auc"])
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["test_loss"]), auc])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _safe_auc(scores, labels):
    try:
        return auc_roc(scores, labels)
    except MetricError:
        return None


def train(x, graph, params: ModelParams, y, c, masks, cfg: TrainConfig = TrainConfig(), log=None):
    """Full-batch transductive training with early stopping on validation loss.

    All nodes take part in message passing; only ``masks[0]`` contributes to the
    gradient. Returns ``(best_params, history)`` where ``best_params`` are the
    weights with the lowest recorded validation loss.
    """
    ops = as_ops(graph)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=bool)
    c = np.asarray(c, dtype=float)
    train_m, val_m, test_m = (_mask(m, ops.n) for m in masks)
    params = params.copy()
    opt = Adam(cfg.learning_rate)
    history = TrainHistory()
    best, best_val, wait = params.copy(), math.inf, 0

    for epoch in range(1, cfg.max_epochs + 1):
        try:
            loss, grads, res = loss_and_grads(x, ops, params, y, c, train_m, cfg)
        except (TrainingError, gnn.NumericalError, FloatingPointError) as err:
            raise TrainingDiverged(epoch, math.nan) from err
        if not math.isfinite(loss) or loss > cfg.divergence_threshold:
            raise TrainingDiverged(epoch, loss)
        opt.step(params.weights, grads)
        params.buffers.update(res.buffer_updates)

        try:
            y_hat, c_hat, _ = predict(x, ops, params, "eval")
        except (gnn.NumericalError, FloatingPointError) as err:
            raise TrainingDiverged(epoch, math.nan) from err
        losses = [total_loss(y_hat, c_hat, y, c, cfg, m) for m in (train_m, val_m, test_m)]
        if not all(math.isfinite(v) and v <= cfg.divergence_threshold for v in losses):
            raise TrainingDiverged(epoch, max(losses))
        row = {"epoch": epoch, "train_loss": losses[0], "val_loss": losses[1], "test_loss": losses[2],
               "val_auc": _safe_auc(y_hat[val_m], y[val_m])}
        history.rows.append(row)
        if log is not None:
            log(row)

        if losses[1] < best_val:
            best, best_val, wait = params.copy(), losses[1], 0
            history.best_epoch = epoch
        else:
            wait += 1
            if wait > cfg.patience:
                history.stopped_early = True
                break
    return best, history


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_doc(t: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": [float(x) for x in np.ravel(v)]} for k, v in sorted(t.items())}


def _tensors(doc: dict) -> dict:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc.items()}


def checkpoint_json(params: ModelParams, schema_hash: str, config: dict) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "schema_hash": schema_hash,
        "config": config,
        "layers": [asdict(s) for s in params.specs],
        "weights": _tensor_doc(params.weights),
        "buffers": _tensor_doc(params.buffers),
    }
    return json.dumps(doc, sort_keys=True)


def save_checkpoint(path, params: ModelParams, schema_hash: str, config: dict) -> str:
    text = checkpoint_json(params, schema_hash, config)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Returns ``(params, metadata)``; metadata carries schema_hash and config."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    specs = tuple(LayerSpec(**s) for s in doc["layers"])
    params = ModelParams(specs, _tensors(doc["weights"]), _tensors(doc["buffers"]))
    return params, {"schema_hash": doc["schema_hash"], "config": doc["config"]}
