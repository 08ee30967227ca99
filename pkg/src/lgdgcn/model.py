"""LGD-GCN layers, the full network, and a plain GCN baseline."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import SpdFactor, ShapeError, Value
from .graphcore import CsrGraph, ParameterError, build_graph, spmm, sym_normalize


@dataclass
class ModelConfig:
    M: int = 4
    T: int = 7
    L: int = 2
    d_out: int = 64
    dropout: float = 0.5
    rule: str = "knn"
    k: int = 5
    lgagg: bool = True

    def __post_init__(self):
        if self.T < 1 or self.L < 1 or self.M < 1:
            raise ParameterError("M, T and L must be at least 1")
        if self.d_out % self.M:
            raise ParameterError(f"M={self.M} must divide d_out={self.d_out}")
        if self.d_out // self.M < 2:
            raise ParameterError("each channel needs width >= 2")
        if not (0.0 <= self.dropout < 1.0):
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.rule.lower() not in ("knn", "cknn"):
            raise ParameterError(f"rule must be knn or cknn, got {self.rule!r}")
        self.rule = self.rule.lower()

    @property
    def width(self) -> int:
        return self.d_out // self.M

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ statistics

@dataclass
class LayerStats:
    """Mixture component means and covariances for one layer (one per channel)."""

    mu: np.ndarray            # M x width
    sigma: np.ndarray         # M x width x width
    ridge: float = 1e-4
    factors: list[SpdFactor] = field(init=False, repr=False)

    def __post_init__(self):
        self.refresh()

    @classmethod
    def identity(cls, M: int, width: int, ridge: float = 1e-4) -> "LayerStats":
        return cls(np.zeros((M, width)), np.tile(np.eye(width), (M, 1, 1)), ridge)

    def refresh(self) -> None:
        self.sigma = 0.5 * (self.sigma + np.swapaxes(self.sigma, 1, 2))
        self.factors = [SpdFactor.from_covariance(s, self.ridge) for s in self.sigma]

    @property
    def M(self) -> int:
        return self.mu.shape[0]


class ChannelStats(list):
    """One :class:`LayerStats` per LGD layer."""


# ---------------------------------------------------------------- parameters

@dataclass
class LayerParams:
    W: list[Value]
    b: list[Value]

    @classmethod
    def init(cls, d_in: int, cfg: ModelConfig, rng: np.random.Generator, layer: int = 0):
        bound = 1.0 / np.sqrt(d_in)
        W = [ad.parameter(rng.uniform(-bound, bound, size=(d_in, cfg.width)), f"l{layer}.W{m}")
             for m in range(cfg.M)]
        b = [ad.parameter(np.zeros((1, cfg.width)), f"l{layer}.b{m}") for m in range(cfg.M)]
        return cls(W, b)

    @property
    def M(self) -> int:
        return len(self.W)

    def values(self) -> list[Value]:
        return [*self.W, *self.b]


def _blocks(x: Value, M: int) -> list[Value]:
    w = x.shape[1] // M
    return [ad.slice_cols(x, m * w, (m + 1) * w) for m in range(M)]


def _block_normalize(x: Value, M: int) -> Value:
    n, d = x.shape
    flat = ad.reshape(x, (n * M, d // M))
    return ad.reshape(ad.l2_normalize_rows(flat), (n, d))


def channel_project(params: LayerParams, h: Value) -> list[Value]:
    """z_m = normalize(relu(h W_m + b_m)) for each channel."""
    if h.shape[1] != params.W[0].shape[0]:
        raise ShapeError(f"input width {h.shape[1]} does not match W rows {params.W[0].shape[0]}")
    W = ad.concat_cols(params.W)
    b = ad.concat_cols(params.b)
    pre = ad.relu(ad.matmul(h, W) + b)
    return _blocks(_block_normalize(pre, params.M), params.M)


def neighborhood_routing(z: list[Value], g: CsrGraph, T: int,
                         trace: list | None = None) -> list[Value]:
    """Iterative soft assignment of neighbours to channels.

    Every node's centre starts at its own projection; each iteration scores every
    neighbour against the centre in each channel, softmaxes the scores across
    channels and rebuilds the centre from the weighted neighbours. ``trace``, when
    given, collects the per-iteration E x M assignment matrices (edges in CSR order).
    """
    if T < 1:
        raise ParameterError("routing needs T >= 1")
    M = len(z)
    zc = ad.concat_cols(z)
    edges = g.edge_index
    c = zc
    for _ in range(T):
        if len(edges):
            p = ad.softmax_rows(ad.edge_block_dot(zc, c, edges, M))
            if trace is not None:
                trace.append(p.data.copy())
            c = _block_normalize(zc + ad.edge_block_scatter(p, zc, edges), M)
        else:
            c = _block_normalize(zc, M)
    return _blocks(c, M)


def latent_graphs(z_hat: list[Value], cfg: ModelConfig) -> list[CsrGraph]:
    return [sym_normalize(build_graph(zm.data, cfg.k, cfg.rule)) for zm in z_hat]


def latent_aggregate(z_hat: list[Value], cfg: ModelConfig) -> list[Value]:
    """GCN-style smoothing of each channel over a graph built from that channel's points."""
    return [spmm(a, zm) for a, zm in zip(latent_graphs(z_hat, cfg), z_hat)]


@dataclass
class LayerOutput:
    h: Value
    z_hat: list[Value]
    z_breve: list[Value]


def _dropout(x: Value, p: float, train_mode: bool, rng: np.random.Generator | None) -> Value:
    if not train_mode or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs a random generator")
    return ad.dropout_apply(x, rng.random(x.shape) >= p, p)


def layer_forward(params: LayerParams, cfg: ModelConfig, g: CsrGraph, h: Value,
                  train_mode: bool = False, rng: np.random.Generator | None = None,
                  trace: list | None = None) -> LayerOutput:
    z = channel_project(params, h)
    z_hat = neighborhood_routing(z, g, cfg.T, trace)
    z_breve = latent_aggregate(z_hat, cfg) if cfg.lgagg else list(z_hat)
    out = _dropout(ad.concat_cols(z_breve), cfg.dropout, train_mode, rng)
    return LayerOutput(out, z_hat, z_breve)


@dataclass
class ForwardResult:
    logits: Value
    layers: list[LayerOutput]


class LGDGCN:
    """Stacked LGD layers followed by a linear classifier."""

    def __init__(self, d_in: int, num_classes: int, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.d_in = d_in
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        self.layers: list[LayerParams] = []
        width_in = d_in
        for layer in range(cfg.L):
            self.layers.append(LayerParams.init(width_in, cfg, rng, layer))
            width_in = cfg.d_out
        bound = 1.0 / np.sqrt(cfg.d_out)
        self.W_out = ad.parameter(rng.uniform(-bound, bound, size=(cfg.d_out, num_classes)), "out.W")
        self.b_out = ad.parameter(np.zeros((1, num_classes)), "out.b")
        self.stats = ChannelStats(LayerStats.identity(cfg.M, cfg.width) for _ in range(cfg.L))

    def parameters(self) -> list[Value]:
        out = []
        for lp in self.layers:
            out += lp.values()
        return out + [self.W_out, self.b_out]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {v.name: v.data for v in self.parameters()}

    def forward(self, features: np.ndarray, graph: CsrGraph, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        h = ad.constant(features)
        outs = []
        for lp in self.layers:
            lo = layer_forward(lp, self.cfg, graph, h, train_mode, rng)
            outs.append(lo)
            h = lo.h
        logits = ad.matmul(h, self.W_out) + self.b_out
        return ForwardResult(logits, outs)


def model_forward(model: LGDGCN, bundle, train_mode: bool = False, seed: int | None = None):
    rng = np.random.default_rng(seed) if seed is not None else None
    return model.forward(bundle.features, bundle.graph, train_mode, rng)


class GCNBaseline:
    """Plain two-operation GCN: H <- act(A_norm H W), dropout before every layer."""

    def __init__(self, widths: list[int], dropout: float = 0.5, seed: int = 0):
        if len(widths) < 2:
            raise ParameterError("widths needs at least input and output sizes")
        self.widths = list(widths)
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        self.W = []
        self.b = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (a + b))
            self.W.append(ad.parameter(rng.uniform(-bound, bound, size=(a, b)), f"gcn.W{i}"))
            self.b.append(ad.parameter(np.zeros((1, b)), f"gcn.b{i}"))
        self._norm_cache: tuple[CsrGraph, CsrGraph] | None = None
        self.stats = ChannelStats()

    def parameters(self) -> list[Value]:
        return [*self.W, *self.b]

    def _normalized(self, graph: CsrGraph) -> CsrGraph:
        if self._norm_cache is None or self._norm_cache[0] is not graph:
            self._norm_cache = (graph, sym_normalize(graph))
        return self._norm_cache[1]

    def forward(self, features: np.ndarray, graph: CsrGraph, train_mode: bool = False,
                rng: np.random.Generator | None = None, activation=ad.relu) -> ForwardResult:
        a = self._normalized(graph)
        h = ad.constant(features)
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = _dropout(h, self.dropout, train_mode, rng)
            h = spmm(a, ad.matmul(h, W)) + b
            if i < last and activation is not None:
                h = activation(h)
        return ForwardResult(h, [])


def gcn_baseline_forward(model: GCNBaseline, bundle, train_mode: bool = False,
                         seed: int | None = None) -> Value:
    rng = np.random.default_rng(seed) if seed is not None else None
    return model.forward(bundle.features, bundle.graph, train_mode, rng).logits
