"""Loss terms: latent-space consistency, factor diversity, classification, and their sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .graphcore import ParameterError
from .model import LayerStats

LIKELIHOOD_FLOOR = 1e-30


def space_loss(z_hat: list[Value], stats: LayerStats) -> Value:
    """Mean squared Mahalanobis distance of every unit to its own channel's component."""
    terms = [ad.mahalanobis_rows(zm, stats.mu[m], stats.factors[m]) for m, zm in enumerate(z_hat)]
    return ad.mean(ad.concat_cols(terms))


def _loglik_tensor(z_hat: list[Value], stats: LayerStats) -> Value:
    """N x M x M stack: entry [i, m, e] = log N(z_hat[i, m]; mu_e, Sigma_e)."""
    M = len(z_hat)
    n = z_hat[0].shape[0]
    cols = [ad.gaussian_logpdf_rows(zm, stats.mu[e], stats.factors[e])
            for zm in z_hat for e in range(M)]
    return ad.reshape(ad.concat_cols(cols), (n, M, M))


def diversity_gram(z_hat: list[Value], stats: LayerStats,
                   eps_like: float = LIKELIHOOD_FLOOR) -> Value:
    """Per-node Gram matrices of the unit-normalised likelihood vectors, N x M x M.

    Column ``m`` of node ``i``'s factor matrix is the vector of densities of unit
    ``z_hat[i, m]`` under all M components, scaled to unit length.
    """
    unit = ad.exp_normalize_last(_loglik_tensor(z_hat, stats), eps_like)   # [i, m, e]
    return ad.batched_gram(ad.swap_last(unit))


def diversity_loss(z_hat: list[Value], stats: LayerStats, eps: float = 1e-8) -> Value:
    return ad.scale(ad.mean(ad.logdet_gram(diversity_gram(z_hat, stats), eps)), -1.0)


def cls_loss(logits: Value, labels: np.ndarray, mask: np.ndarray, label_mode: str) -> Value:
    """Masked mean cross-entropy (softmax) or summed binary cross-entropy (sigmoid)."""
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ParameterError("classification loss needs a non-empty mask")
    picked = ad.take_rows(logits, idx)
    if label_mode == "single":
        onehot = np.zeros(picked.shape)
        onehot[np.arange(len(idx)), labels[idx]] = 1.0
        ll = ad.sum(ad.mul(ad.log_softmax_rows(picked), ad.constant(onehot)))
        return ad.scale(ll, -1.0 / len(idx))
    y = ad.constant(labels[idx].astype(np.float64))
    # -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - y x
    bce = ad.softplus(picked) - ad.mul(y, picked)
    return ad.scale(ad.sum(bce), 1.0 / len(idx))


def layer_weight(l: int, L: int) -> float:
    if not (1 <= l <= L):
        raise ParameterError(f"layer index {l} outside 1..{L}")
    return 10.0 ** (l - L)


@dataclass
class LossBreakdown:
    total: Value
    cls: Value
    space: list[Value]
    div: list[Value]

    def floats(self) -> dict:
        return {
            "loss_total": self.total.item(),
            "loss_cls": self.cls.item(),
            "loss_space": [v.item() for v in self.space],
            "loss_div": [v.item() for v in self.div],
        }


def total_loss(cls: Value, space: list[Value], div: list[Value],
               lambda_space: float, lambda_div: float) -> LossBreakdown:
    L = len(space)
    if len(div) != L:
        raise ParameterError("need one space and one diversity term per layer")
    total = cls
    for l, (s, d) in enumerate(zip(space, div), start=1):
        w = layer_weight(l, L)
        if lambda_space:
            total = total + ad.scale(s, w * lambda_space)
        if lambda_div:
            total = total + ad.scale(d, w * lambda_div)
    return LossBreakdown(total, cls, list(space), list(div))
