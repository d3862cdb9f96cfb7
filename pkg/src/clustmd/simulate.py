"""Mixed-data generator and clustering agreement scores."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ORDINAL, ColumnSpec, MixedDataset, canonical_order
from .kernels import build_layout, classify_nominal
from .params import ModelParams, validate


@dataclass(frozen=True)
class GeneratorSpec:
    """Generating parameters plus the observed-column schema.

    ``thresholds[k]`` holds the interior cut points of ordinal column ``k``.
    ``latent_correlation`` adds a common within-cluster correlation between
    all latent dimensions (0 gives the diagonal model).
    """

    params: ModelParams
    schema: tuple[ColumnSpec, ...]
    thresholds: tuple[tuple[float, ...], ...]
    N: int
    seed: int = 0
    latent_correlation: float = 0.0

    def __post_init__(self):
        schema = tuple(self.schema)
        object.__setattr__(self, "schema", schema)
        if canonical_order(schema) != list(range(len(schema))):
            raise ValueError("generator schema must be in continuous/ordinal/nominal order")
        layout = build_layout(schema)
        validate(self.params, layout)
        ords = [c for c in schema if c.kind == ORDINAL]
        if len(self.thresholds) != len(ords):
            raise ValueError("need one threshold vector per ordinal column")
        for c, t in zip(ords, self.thresholds):
            t = np.asarray(t, dtype=float)
            if t.size != c.levels - 1 or np.any(np.diff(t) < 0) or not np.all(np.isfinite(t)):
                raise ValueError(f"column {c.name!r}: need {c.levels - 1} finite non-decreasing thresholds")
        if self.N < 1:
            raise ValueError("N must be positive")
        if not -1.0 / max(layout.P - 1, 1) < self.latent_correlation < 1.0:
            raise ValueError("latent_correlation must keep the correlation matrix positive definite")

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "seed": self.seed,
            "latent_correlation": self.latent_correlation,
            "schema": {"columns": [c.to_dict() for c in self.schema]},
            "thresholds": [list(t) for t in self.thresholds],
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        cols = d["schema"]["columns"] if isinstance(d["schema"], dict) else d["schema"]
        schema = tuple(ColumnSpec(c["name"], c["kind"], c.get("levels")) for c in cols)
        return cls(ModelParams.from_dict(d["params"]), schema,
                   tuple(tuple(float(x) for x in t) for t in d["thresholds"]),
                   int(d["N"]), int(d.get("seed", 0)), float(d.get("latent_correlation", 0.0)))


def load_generator_spec(path: str | Path) -> GeneratorSpec:
    with open(path, encoding="utf-8") as fh:
        return GeneratorSpec.from_dict(json.load(fh))


def shipped_spec(name: str = "vii_g2_mixed") -> GeneratorSpec:
    """A generator shipped with the package (``vii_g2_mixed``: 2-cluster VII, N=800, 10 variables)."""
    text = resources.files("clustmd").joinpath("data").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return GeneratorSpec.from_dict(json.loads(text))


def simulate(spec: GeneratorSpec, seed: int | None = None) -> tuple[MixedDataset, np.ndarray]:
    """Draw ``spec.N`` rows; returns the dataset and 1-based true cluster labels."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    layout = build_layout(spec.schema)
    p = spec.params
    G, P, N = p.G, layout.P, spec.N
    labels = rng.choice(G, size=N, p=p.pi)
    eps = rng.standard_normal((N, P))
    if spec.latent_correlation:
        rho = spec.latent_correlation
        R = np.full((P, P), rho)
        np.fill_diagonal(R, 1.0)
        eps = eps @ np.linalg.cholesky(R).T
    sd = np.sqrt(p.variances(layout))
    z = p.mu[labels] + sd[labels] * eps

    cont = z[:, : layout.C]
    cat = np.empty((N, layout.O + len(layout.nominal_levels)), dtype=np.int64)
    for k, t in enumerate(spec.thresholds):
        cat[:, k] = np.searchsorted(np.asarray(t), z[:, layout.C + k]) + 1
    for j, (b0, b1) in enumerate(layout.nominal_blocks):
        cat[:, layout.O + j] = classify_nominal(z[:, b0:b1]) + 1
    return MixedDataset(spec.schema, cont, cat), labels + 1


def _as_labels(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    return x


def cross_tab(labels_a: Sequence, labels_b: Sequence):
    """Contingency counts with rows indexed by the distinct values of ``labels_a``.

    Returns ``(table, row_values, col_values)``.
    """
    a, b = _as_labels(labels_a), _as_labels(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    ra, ia = np.unique(a, return_inverse=True)
    rb, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ra.size, rb.size), dtype=np.int64)
    np.add.at(table, (ia.ravel(), ib.ravel()), 1)
    return table, ra, rb


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2


def ari_from_table(table) -> float:
    """Hubert-Arabie adjusted Rand index of a contingency table."""
    table = np.asarray(table, dtype=float)
    n = table.sum()
    index = _comb2(table).sum()
    rows = _comb2(table.sum(1)).sum()
    cols = _comb2(table.sum(0)).sum()
    total = _comb2(n)
    expected = rows * cols / total
    top = 0.5 * (rows + cols)
    if top == expected:
        # both partitions trivial in the same way, or one of them trivial
        return 1.0 if rows == cols else 0.0
    return float((index - expected) / (top - expected))


def adjusted_rand(labels_a: Sequence, labels_b: Sequence) -> float:
    a, b = _as_labels(labels_a), _as_labels(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two labels")
    return ari_from_table(cross_tab(a, b)[0])


def labels_from_table(table) -> tuple[np.ndarray, np.ndarray]:
    """Expand a contingency table into two 1-based label vectors."""
    table = np.asarray(table, dtype=np.int64)
    rows, cols = np.nonzero(table >= 0)
    counts = table[rows, cols]
    return np.repeat(rows + 1, counts), np.repeat(cols + 1, counts)


@dataclass(frozen=True)
class ClusteringScore:
    ari: float
    table: np.ndarray
    row_labels: np.ndarray
    col_labels: np.ndarray

    def to_dict(self) -> dict:
        return {"ari": self.ari, "table": self.table.tolist(),
                "row_labels": self.row_labels.tolist(), "col_labels": self.col_labels.tolist()}


def score(labels_a: Sequence, labels_b: Sequence) -> ClusteringScore:
    table, ra, rb = cross_tab(labels_a, labels_b)
    if table.sum() < 2:
        raise ValueError("need at least two labels")
    return ClusteringScore(ari_from_table(table), table, ra, rb)


__all__ = [
    "GeneratorSpec", "simulate", "load_generator_spec", "shipped_spec", "adjusted_rand",
    "cross_tab", "ari_from_table", "labels_from_table", "score", "ClusteringScore",
]
