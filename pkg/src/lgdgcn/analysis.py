"""Post-hoc artifacts: feature correlation matrices and embedding exports."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .datagen import GraphBundle
from .graphcore import ParameterError
from .model import LGDGCN

STAGES = ("post_routing", "post_aggregation")


def feature_correlation(embeddings: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Pearson correlation between every pair of feature columns over the masked rows.

    A constant column correlates 0 with everything, itself included.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError(f"embeddings must be a matrix, got shape {x.shape}")
    if mask is not None:
        x = x[np.asarray(mask, dtype=bool)]
    if x.shape[0] < 2:
        raise ParameterError(f"correlation needs at least 2 nodes, got {x.shape[0]}")
    centered = x - x.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", centered, centered))
    # exact test: subtracting the mean of a constant column can leave rounding residue
    live = (x.max(axis=0) > x.min(axis=0)) & (norms > 0)
    unit = np.zeros_like(centered)
    unit[:, live] = centered[:, live] / norms[live]
    corr = unit.T @ unit
    corr = 0.5 * (corr + corr.T)
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, live.astype(np.float64))
    return corr


def correlation_csv(corr: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in corr)


def write_correlation(corr: np.ndarray, path) -> None:
    _write(path, correlation_csv(corr))


def _write(path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def layer_units(model: LGDGCN, bundle: GraphBundle, layer: int, stage: str) -> list[np.ndarray]:
    """Per-channel units (list of M arrays, N x width) from one eval-mode pass."""
    if stage not in STAGES:
        raise ParameterError(f"stage must be one of {STAGES}, got {stage!r}")
    if not 0 <= layer < model.cfg.L:
        raise ParameterError(f"layer {layer} out of range for a {model.cfg.L}-layer model")
    lo = model.forward(bundle.features, bundle.graph, train_mode=False).layers[layer]
    units = lo.z_hat if stage == "post_routing" else lo.z_breve
    return [u.data for u in units]


def _label_text(bundle: GraphBundle, i: int) -> str:
    if bundle.label_mode == "multi":
        return ",".join(str(c) for c in np.flatnonzero(bundle.labels[i]))
    return str(int(bundle.labels[i]))


def export_embeddings(model: LGDGCN, bundle: GraphBundle, layer: int, stage: str, path) -> tuple[Path, Path]:
    """Write per-channel units and the per-node concatenation as TSV files.

    ``path`` receives one row per (node, channel); a sibling ``*.nodes.tsv``
    holds one row per node with all channels side by side and the label.
    Returns both paths.
    """
    units = layer_units(model, bundle, layer, stage)
    width = units[0].shape[1]
    n = bundle.n
    cols = "\t".join(f"f{t + 1}" for t in range(width))
    lines = [f"node\tchannel\t{cols}\n"]
    for i in range(n):
        for m, u in enumerate(units):
            lines.append(f"{i}\t{m}\t" + "\t".join(repr(float(v)) for v in u[i]) + "\n")
    path = Path(path)
    _write(path, "".join(lines))

    flat = np.concatenate(units, axis=1)
    cols = "\t".join(f"f{t + 1}" for t in range(flat.shape[1]))
    lines = [f"node\tlabel\t{cols}\n"]
    for i in range(n):
        lines.append(f"{i}\t{_label_text(bundle, i)}\t" + "\t".join(repr(float(v)) for v in flat[i]) + "\n")
    node_path = path.with_name(path.stem + ".nodes.tsv")
    _write(node_path, "".join(lines))
    return path, node_path
