"""Synthetic multi-factor graphs, the text bundle format, and train/val/test splits.

Randomness comes from numpy's PCG64 generator. A synthetic graph with seed ``s``
spawns one child ``SeedSequence`` per factor graph from ``SeedSequence(s)``,
so factor ``j`` always sees the same stream regardless of how many factors
follow it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graphcore import CsrGraph, ParameterError


class BundleFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(ValueError):
    pass


# p values that put the average degree near 40 for N = 1000, 16 classes, q = 3e-5
TABLE5_P = {4: 0.164, 6: 0.110, 8: 0.082, 10: 0.065, 12: 0.055}
TABLE5_Q = 3e-5


@dataclass(frozen=True, eq=False)
class GraphBundle:
    graph: CsrGraph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    name: str = "unnamed"
    label_mode: str = "single"
    num_classes: int = field(default=0)

    def __post_init__(self):
        if self.num_classes == 0:
            c = self.labels.shape[1] if self.label_mode == "multi" else int(self.labels.max()) + 1
            object.__setattr__(self, "num_classes", c)
        self.validate()

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def d0(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        n = self.graph.n
        if self.features.shape[0] != n:
            raise ValidationError(f"features have {self.features.shape[0]} rows, graph has {n} nodes")
        if self.label_mode not in ("single", "multi"):
            raise ValidationError(f"unknown label mode {self.label_mode!r}")
        if self.label_mode == "single":
            if self.labels.shape != (n,):
                raise ValidationError(f"single-label array must have shape ({n},)")
            if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.num_classes:
                raise ValidationError("single labels must lie in [0, C)")
        else:
            if self.labels.shape != (n, self.num_classes):
                raise ValidationError(f"multi-label matrix must have shape ({n}, {self.num_classes})")
            if not np.isin(self.labels, (0, 1)).all():
                raise ValidationError("multi-label entries must be 0 or 1")
        masks = (self.train_mask, self.val_mask, self.test_mask)
        for m in masks:
            if m.shape != (n,) or m.dtype != bool:
                raise ValidationError("masks must be boolean arrays of length N")
        if (self.train_mask & self.val_mask).any() or (self.train_mask & self.test_mask).any() \
                or (self.val_mask & self.test_mask).any():
            raise ValidationError("train/val/test masks overlap")
        if not self.train_mask.any():
            raise ValidationError("train mask is empty")

    def with_masks(self, train, val, test) -> "GraphBundle":
        return replace(self, train_mask=np.asarray(train, bool), val_mask=np.asarray(val, bool),
                       test_mask=np.asarray(test, bool))

    def label_matrix(self) -> np.ndarray:
        """Labels as an N x C 0/1 matrix in either mode."""
        if self.label_mode == "multi":
            return self.labels.astype(np.float64)
        return np.eye(self.num_classes)[self.labels]


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthSpec:
    factors: int
    p: float
    q: float = TABLE5_Q
    nodes: int = 1000
    classes: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.factors < 1 or self.nodes < 2 or self.classes < 1:
            raise ParameterError("factors, nodes and classes must be positive (nodes >= 2)")
        if not (0 <= self.q <= self.p <= 1):
            raise ParameterError(f"need 0 <= q <= p <= 1, got p={self.p}, q={self.q}")

    @classmethod
    def table5(cls, factors: int, seed: int = 0) -> "SynthSpec":
        if factors not in TABLE5_P:
            raise ParameterError(f"no tabulated p for {factors} factors; choose from {sorted(TABLE5_P)}")
        return cls(factors=factors, p=TABLE5_P[factors], q=TABLE5_Q, seed=seed)


def factor_graph(n: int, classes: int, p: float, q: float, rng: np.random.Generator):
    """One planted-partition random graph: returns (class per node, upper-triangle edges).

    Class sizes are balanced (the first ``n % classes`` classes get one extra node)
    and the assignment of nodes to those slots is a uniform random permutation.
    """
    cls = rng.permutation(np.arange(n) % classes)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(cls[iu] == cls[ju], p, q)
    hit = rng.random(len(iu)) < prob
    return cls, iu[hit], ju[hit]


def synth_generate(spec: SynthSpec) -> GraphBundle:
    n = spec.nodes
    children = np.random.SeedSequence(spec.seed).spawn(spec.factors)
    adj = np.zeros((n, n), dtype=bool)
    labels = np.zeros((n, spec.classes), dtype=np.int64)
    for child in children:
        rng = np.random.Generator(np.random.PCG64(child))
        cls, i, j = factor_graph(n, spec.classes, spec.p, spec.q, rng)
        adj[i, j] = True
        adj[j, i] = True
        labels[np.arange(n), cls] = 1
    graph = CsrGraph.from_dense(adj)
    features = adj.astype(np.float64)
    everything = np.ones(n, dtype=bool)
    nothing = np.zeros(n, dtype=bool)
    return GraphBundle(
        graph=graph, features=features, labels=labels,
        train_mask=everything, val_mask=nothing, test_mask=nothing.copy(),
        name=f"synth-m{spec.factors}-p{spec.p:g}-q{spec.q:g}-s{spec.seed}",
        label_mode="multi", num_classes=spec.classes,
    )


def _realized_degree(spec: SynthSpec) -> float:
    return synth_generate(spec).graph.average_degree()


def densify_series(base: SynthSpec, targets, rel_tol: float = 0.05,
                   max_probes: int = 40) -> list[SynthSpec]:
    """For each target average degree, bisect p (seed fixed) until within ``rel_tol``."""
    out = []
    for target in targets:
        if not (0 < target <= base.nodes - 1):
            raise ParameterError(f"average degree target {target} unreachable for N={base.nodes}")
        lo, hi = base.q, 1.0
        # expected degree is monotone in p, so start from the mean-field guess
        guess = min(1.0, max(base.q, target / (base.factors * base.nodes / base.classes)))
        p = guess
        found = None
        for _ in range(max_probes):
            spec = replace(base, p=p)
            deg = _realized_degree(spec)
            if abs(deg - target) <= rel_tol * target:
                found = spec
                break
            if deg < target:
                lo = p
            else:
                hi = p
            p = 0.5 * (lo + hi)
        if found is None:
            raise ParameterError(f"could not reach average degree {target} within {max_probes} probes")
        out.append(found)
    return out


# ------------------------------------------------------------------- splits

def split_standard(bundle: GraphBundle) -> GraphBundle:
    bundle.validate()
    return bundle


def split_random(bundle: GraphBundle, seed: int, per_class: int = 20,
                 n_val: int = 500, n_test: int = 1000) -> GraphBundle:
    """Per-class train sample, then val and test drawn uniformly from what is left."""
    if bundle.label_mode != "single":
        raise ParameterError("split_random needs single-label data")
    rng = np.random.default_rng(seed)
    n = bundle.n
    train = np.zeros(n, dtype=bool)
    for c in range(bundle.num_classes):
        members = np.flatnonzero(bundle.labels == c)
        if len(members) < per_class:
            raise ParameterError(f"class {c} has {len(members)} nodes, need {per_class}")
        train[rng.choice(members, size=per_class, replace=False)] = True
    rest = np.flatnonzero(~train)
    if len(rest) < n_val + n_test:
        raise ParameterError(f"only {len(rest)} nodes left for {n_val} val + {n_test} test")
    picked = rng.permutation(rest)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[picked[:n_val]] = True
    test[picked[n_val:n_val + n_test]] = True
    return bundle.with_masks(train, val, test)


def split_fraction(bundle: GraphBundle, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> GraphBundle:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ParameterError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = bundle.n
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[order[:n_val]] = True
    test[order[n_val:n_val + n_test]] = True
    return bundle.with_masks(~(val | test), val, test)


# ----------------------------------------------------------------- bundle IO

def _fmt(x: float) -> str:
    # repr round-trips float64 exactly; keep integers short
    return str(int(x)) if float(x).is_integer() and abs(x) < 2**53 else repr(float(x))


def bundle_write(bundle: GraphBundle, path) -> None:
    bundle.validate()
    lines = [f"#META name={bundle.name} n={bundle.n} d0={bundle.d0} "
             f"C={bundle.num_classes} mode={bundle.label_mode}", "#EDGES"]
    lines += [f"{i} {j}" for i, j in sorted(bundle.graph.edge_set())]
    lines.append("#FEATURES")
    lines += [" ".join(_fmt(v) for v in row) for row in bundle.features]
    lines.append("#LABELS")
    if bundle.label_mode == "single":
        lines += [str(int(v)) for v in bundle.labels]
    else:
        lines += [" ".join(str(int(v)) for v in row) for row in bundle.labels]
    lines.append("#MASKS")
    masks = np.stack([bundle.train_mask, bundle.val_mask, bundle.test_mask], axis=1).astype(int)
    lines += [f"{t} {v} {s}" for t, v, s in masks]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_SECTIONS = ("#EDGES", "#FEATURES", "#LABELS", "#MASKS")


def bundle_read(path) -> GraphBundle:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#META"):
        raise BundleFormatError("first line must start with #META", 1)
    meta = {}
    for tok in text[0].split()[1:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise BundleFormatError(f"bad META token {tok!r}", 1)
        meta[key] = val
    try:
        n, d0, c = int(meta["n"]), int(meta["d0"]), int(meta["C"])
        mode, name = meta["mode"], meta.get("name", "unnamed")
    except (KeyError, ValueError) as exc:
        raise BundleFormatError(f"incomplete META: {exc}", 1) from None
    if mode not in ("single", "multi"):
        raise BundleFormatError(f"mode must be single or multi, got {mode!r}", 1)

    sections: dict[str, list[tuple[int, str]]] = {}
    current = None
    expected = iter(_SECTIONS)
    for lineno, line in enumerate(text[1:], start=2):
        if line.startswith("#"):
            head = line.strip()
            if head != next(expected, None):
                raise BundleFormatError(f"unexpected section header {head!r}", lineno)
            current = head
            sections[current] = []
        elif current is None:
            raise BundleFormatError("data before first section", lineno)
        elif line.strip():
            sections[current].append((lineno, line))
    for s in _SECTIONS:
        if s not in sections:
            raise BundleFormatError(f"missing section {s}")

    def parse_rows(key, width, conv):
        rows = sections[key]
        out = []
        for lineno, line in rows:
            parts = line.split()
            if len(parts) != width:
                raise BundleFormatError(f"{key} row needs {width} fields, got {len(parts)}", lineno)
            try:
                out.append([conv(p) for p in parts])
            except ValueError:
                raise BundleFormatError(f"cannot parse {key} row", lineno) from None
        return out, rows

    edges, erows = parse_rows("#EDGES", 2, int)
    for (i, j), (lineno, _) in zip(edges, erows):
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise BundleFormatError(f"edge ({i}, {j}) invalid for n={n}", lineno)
    feats, frows = parse_rows("#FEATURES", d0, float)
    if len(feats) != n:
        raise BundleFormatError(f"expected {n} feature rows, got {len(feats)}")
    labels, lrows = parse_rows("#LABELS", 1 if mode == "single" else c, int)
    if len(labels) != n:
        raise BundleFormatError(f"expected {n} label rows, got {len(labels)}")
    masks, mrows = parse_rows("#MASKS", 3, int)
    if len(masks) != n:
        raise BundleFormatError(f"expected {n} mask rows, got {len(masks)}")

    e = np.array(edges, dtype=np.int64).reshape(-1, 2)
    graph = CsrGraph.from_edges(n, e[:, 0], e[:, 1])
    lab = np.array(labels, dtype=np.int64)
    if mode == "single":
        lab = lab[:, 0]
    m = np.array(masks, dtype=np.int64)
    if not np.isin(m, (0, 1)).all():
        raise BundleFormatError("mask flags must be 0 or 1")
    return GraphBundle(
        graph=graph, features=np.array(feats, dtype=np.float64).reshape(n, d0), labels=lab,
        train_mask=m[:, 0] == 1, val_mask=m[:, 1] == 1, test_mask=m[:, 2] == 1,
        name=name, label_mode=mode, num_classes=c,
    )
