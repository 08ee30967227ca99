"""Training loop: Adam on the weights, running mixture statistics, early stopping, metrics."""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Value
from .datagen import GraphBundle
from .graphcore import ParameterError
from .model import GCNBaseline, LGDGCN, LayerStats, ModelConfig
from .objectives import LossBreakdown, cls_loss, diversity_loss, space_loss, total_loss


class DivergenceError(NumericalError):
    def __init__(self, message: str, result: "TrainResult | None" = None):
        super().__init__(message)
        self.result = result


@dataclass
class TrainConfig:
    epochs: int = 1000
    patience: int = 100
    lr: float = 0.01
    weight_decay: float = 5e-4
    update_rate: float = 0.5
    lambda_space: float = 0.3
    lambda_div: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.update_rate <= 1.0):
            raise ParameterError(f"update rate must be in [0, 1], got {self.update_rate}")
        if self.patience > self.epochs:
            raise ParameterError("patience cannot exceed epochs")
        if self.epochs < 1 or self.patience < 0:
            raise ParameterError("epochs must be >= 1 and patience >= 0")


# ---------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 0.01
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Value], grads: list[np.ndarray] | None = None) -> None:
    """Bias-corrected Adam with L2 weight decay folded into the gradient."""
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} does not match parameter {p.name} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {p.name or id(p)}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.setdefault(i, np.zeros_like(p.data))
        v = state.v.setdefault(i, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --------------------------------------------------------------- statistics

def batch_stats(z: np.ndarray, mu_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch mean, and scatter around the *previous* mean (literal update order)."""
    mu_star = z.mean(axis=0)
    diff = z - mu_prev
    return mu_star, diff.T @ diff / z.shape[0]


def ema_update_stats(stats: LayerStats, z_breve: list, update_rate: float) -> None:
    if not (0.0 <= update_rate <= 1.0):
        raise ParameterError(f"update rate must be in [0, 1], got {update_rate}")
    for m, zm in enumerate(z_breve):
        data = zm.data if isinstance(zm, Value) else np.asarray(zm, dtype=np.float64)
        mu_star, sigma_star = batch_stats(data, stats.mu[m])
        stats.mu[m] = (1.0 - update_rate) * stats.mu[m] + update_rate * mu_star
        stats.sigma[m] = (1.0 - update_rate) * stats.sigma[m] + update_rate * sigma_star
    stats.refresh()


def init_stats(model: LGDGCN, bundle: GraphBundle) -> None:
    """Populate every layer's statistics from one eval-mode pass of the fresh model."""
    out = model.forward(bundle.features, bundle.graph, train_mode=False)
    for stats, lo in zip(model.stats, out.layers):
        for m, zm in enumerate(lo.z_breve):
            stats.mu[m] = zm.data.mean(axis=0)
        ema_update_stats(stats, lo.z_breve, 1.0)


# ------------------------------------------------------------------ metrics

def f1_scores(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(micro, macro) F1 for 0/1 matrices; classes without support score 0."""
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    tp = (pred & truth).sum(axis=0).astype(float)
    fp = (pred & ~truth).sum(axis=0).astype(float)
    fn = (~pred & truth).sum(axis=0).astype(float)
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = 2 * tp.sum() / denom if denom else 0.0
    per_denom = 2 * tp + fp + fn
    per = np.divide(2 * tp, per_denom, out=np.zeros_like(tp), where=(per_denom > 0) & (truth.sum(axis=0) > 0))
    return float(micro), float(per.mean())


def metrics_from_logits(logits: np.ndarray, bundle: GraphBundle, mask: np.ndarray) -> dict:
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ParameterError("cannot evaluate on an empty mask")
    lg = logits[idx]
    if bundle.label_mode == "single":
        pred = lg.argmax(axis=1)
        truth = bundle.labels[idx]
        c = bundle.num_classes
        micro, macro = f1_scores(np.eye(c)[pred], np.eye(c)[truth])
        return {"accuracy": float((pred == truth).mean()), "micro_f1": micro, "macro_f1": macro}
    micro, macro = f1_scores(lg > 0.0, bundle.labels[idx])
    return {"micro_f1": micro, "macro_f1": macro}


def primary_metric(bundle: GraphBundle) -> str:
    return "accuracy" if bundle.label_mode == "single" else "micro_f1"


def evaluate(model, bundle: GraphBundle, mask: np.ndarray) -> dict:
    logits = model.forward(bundle.features, bundle.graph, train_mode=False).logits.data
    return metrics_from_logits(logits, bundle, mask)


# ------------------------------------------------------------------ training

@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_space: list[float]
    loss_div: list[float]
    val_metric: float


@dataclass
class TrainResult:
    model: object
    history: list[EpochRecord]
    best_epoch: int
    best_val: float
    metric: str

    def history_csv(self) -> str:
        L = max((len(r.loss_space) for r in self.history), default=0)
        head = ["epoch", "loss_total", "loss_cls"] + [f"loss_space_l{i}" for i in range(1, L + 1)] \
            + [f"loss_div_l{i}" for i in range(1, L + 1)] + ["val_metric"]
        buf = io.StringIO()
        buf.write(",".join(head) + "\n")
        for r in self.history:
            row = [str(r.epoch), repr(r.loss_total), repr(r.loss_cls)] + [repr(x) for x in r.loss_space] \
                + [repr(x) for x in r.loss_div] + [repr(r.val_metric)]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


def compute_losses(model, out, bundle: GraphBundle, cfg: TrainConfig) -> LossBreakdown:
    cls = cls_loss(out.logits, bundle.labels, bundle.train_mask, bundle.label_mode)
    space, div = [], []
    if isinstance(model, LGDGCN):
        for stats, lo in zip(model.stats, out.layers):
            space.append(space_loss(lo.z_hat, stats))
            div.append(diversity_loss(lo.z_hat, stats))
    return total_loss(cls, space, div, cfg.lambda_space, cfg.lambda_div)


def _snapshot(model):
    return [p.data.copy() for p in model.parameters()], copy.deepcopy(model.stats)


def _restore(model, snap) -> None:
    arrays, stats = snap
    for p, a in zip(model.parameters(), arrays):
        p.data = a.copy()
    model.stats[:] = copy.deepcopy(stats)


def train_run(bundle: GraphBundle, model, cfg: TrainConfig, log=None) -> TrainResult:
    """Full-graph training with early stopping on the validation metric.

    ``model`` is an :class:`LGDGCN` or :class:`GCNBaseline`. Each epoch runs a
    train-mode forward, the total loss, backward and one Adam step. An eval-mode
    pass with the new weights then supplies both the validation metric and the
    post-aggregation units used to refresh the mixture statistics.
    """
    if not bundle.val_mask.any():
        raise ParameterError("training needs a non-empty validation mask")
    metric = primary_metric(bundle)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    is_lgd = isinstance(model, LGDGCN)
    if is_lgd:
        init_stats(model, bundle)
    history: list[EpochRecord] = []
    best_val, best_epoch, best = -np.inf, 0, _snapshot(model)
    since_best = 0
    seeds = np.random.SeedSequence(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(seeds.spawn(1)[0])
        for p in params:
            p.zero_grad()
        out = model.forward(bundle.features, bundle.graph, train_mode=True, rng=rng)
        losses = compute_losses(model, out, bundle, cfg)
        if not np.isfinite(losses.total.item()):
            _restore(model, best)
            raise DivergenceError(f"loss became non-finite at epoch {epoch}",
                                  TrainResult(model, history, best_epoch, best_val, metric))
        ad.backward(losses.total)
        try:
            adam_step(opt, params)
        except NumericalError as exc:
            _restore(model, best)
            raise DivergenceError(f"epoch {epoch}: {exc}",
                                  TrainResult(model, history, best_epoch, best_val, metric)) from None
        ev = model.forward(bundle.features, bundle.graph, train_mode=False)
        if not np.all(np.isfinite(ev.logits.data)):
            _restore(model, best)
            raise DivergenceError(f"outputs became non-finite after the update at epoch {epoch}",
                                  TrainResult(model, history, best_epoch, best_val, metric))
        val = metrics_from_logits(ev.logits.data, bundle, bundle.val_mask)[metric]
        if is_lgd and cfg.update_rate > 0:
            for stats, lo in zip(model.stats, ev.layers):
                ema_update_stats(stats, lo.z_breve, cfg.update_rate)
        f = losses.floats()
        history.append(EpochRecord(epoch, f["loss_total"], f["loss_cls"], f["loss_space"],
                                   f["loss_div"], val))
        if log is not None:
            log(history[-1])
        if val > best_val:
            best_val, best_epoch, best = val, epoch, _snapshot(model)
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    _restore(model, best)
    return TrainResult(model, history, best_epoch, float(best_val), metric)


# --------------------------------------------------------------- checkpoint

MAGIC = b"LGDCKPT\x00"
VERSION = 1


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Flat binary: magic, u32 version, u32 header length, JSON header, f64 payload.

    The header lists every array's name and shape in payload order.
    """
    arrays: list[tuple[str, np.ndarray]] = [(p.name, p.data) for p in model.parameters()]
    if isinstance(model, LGDGCN):
        kind = "lgd"
        spec = {"d_in": model.d_in, "num_classes": model.num_classes, "config": model.cfg.to_dict()}
        for l, st in enumerate(model.stats):
            arrays += [(f"stats{l}.mu", st.mu), (f"stats{l}.sigma", st.sigma)]
        spec["ridge"] = [st.ridge for st in model.stats]
    else:
        kind = "gcn"
        spec = {"widths": model.widths, "dropout": model.dropout}
    header = {"kind": kind, "model": spec, "extra": extra or {},
              "arrays": [[name, list(a.shape)] for name, a in arrays]}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hb)))
        fh.write(hb)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, header)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    spec = header["model"]
    if header["kind"] == "lgd":
        model = LGDGCN(spec["d_in"], spec["num_classes"], ModelConfig(**spec["config"]))
        for l, st in enumerate(model.stats):
            model.stats[l] = LayerStats(arrays[f"stats{l}.mu"], arrays[f"stats{l}.sigma"], spec["ridge"][l])
    else:
        model = GCNBaseline(spec["widths"], spec["dropout"])
    for p in model.parameters():
        p.data = arrays[p.name]
    return model, header


def config_dict(cfg) -> dict:
    return asdict(cfg)
