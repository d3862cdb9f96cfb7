"""Approximate observed likelihood, BIC-hat and the (model x G) grid search."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .dataset import MixedDataset, ThresholdSet, compute_thresholds
from .em import FitConfig, FitResult, continuous_log_density, fit
from .kernels import LatentLayout, NominalMCTable, log_interval_prob
from .params import ALL_MODELS, CovModel, ModelParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatternTable:
    """Distinct observed categorical response patterns.

    ``log_qg[m, g]`` is the log-probability of pattern ``m`` within cluster
    ``g``; ``log_q[m]`` mixes over clusters with the weights.
    """

    patterns: np.ndarray
    counts: np.ndarray
    row_pattern: np.ndarray
    log_qg: np.ndarray
    log_q: np.ndarray

    @property
    def q(self) -> np.ndarray:
        return np.exp(self.log_q)


def pattern_table(data: MixedDataset, params: ModelParams, thresholds: ThresholdSet,
                  layout: LatentLayout, mc_table: NominalMCTable | None = None) -> PatternTable:
    G = params.G
    if data.categorical.shape[1] == 0:
        pats = np.zeros((1, 0), dtype=np.int64)
        return PatternTable(pats, np.array([data.N]), np.zeros(data.N, dtype=int),
                            np.zeros((1, G)), np.zeros(1))
    pats, inv, counts = np.unique(data.categorical, axis=0, return_inverse=True, return_counts=True)
    inv = np.asarray(inv).ravel()
    M = pats.shape[0]
    log_qg = np.zeros((M, G))
    v = params.variances(layout)
    C = layout.C
    for k in range(layout.O):
        gam = thresholds[k]
        lvl = pats[:, k]
        p = C + k
        log_qg += log_interval_prob(params.mu[None, :, p], np.sqrt(v[None, :, p]),
                                    gam[lvl - 1][:, None], gam[lvl][:, None])
    if layout.has_nominal:
        if mc_table is None:
            raise ValueError("nominal variables need a Monte Carlo table")
        for j in range(len(layout.nominal_blocks)):
            y = pats[:, layout.O + j] - 1
            for g in range(G):
                log_qg[:, g] += np.log(mc_table[g, j].probs[y])
    log_q = logsumexp(log_qg + np.log(params.pi)[None, :], axis=1)
    if not np.all(np.isfinite(log_q)) or np.any(log_q > 1e-9):
        raise FloatingPointError("observed pattern probability outside (0, 1]")
    return PatternTable(pats, counts, inv, log_qg, log_q)


def approx_loglik(data: MixedDataset, params: ModelParams, thresholds: ThresholdSet,
                  layout: LatentLayout, mc_table: NominalMCTable | None = None) -> float:
    """Continuous mixture log-density plus log pattern probabilities, treated as independent."""
    cont = logsumexp(continuous_log_density(data, params, layout) + np.log(params.pi)[None, :], axis=1)
    cont_part = float(cont.sum()) if layout.C else 0.0
    table = pattern_table(data, params, thresholds, layout, mc_table)
    return cont_part + float(table.counts @ table.log_q)


def bic_hat(loglik: float, nu: int, N: int) -> float:
    if N < 1:
        raise ValueError("N must be positive")
    return 2.0 * loglik - nu * math.log(N)


@dataclass
class SelectionCell:
    model: CovModel
    G: int
    bic: float = float("nan")
    nu: int = 0
    loglik: float = float("nan")
    converged: bool = False
    n_iter: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return {"model": self.model.value, "G": self.G, "bic": _num(self.bic), "nu": self.nu,
                "loglik": _num(self.loglik), "converged": self.converged, "n_iter": self.n_iter,
                "error": self.error}


def _num(x):
    return x if math.isfinite(x) else None


def select_best(cells: Sequence[SelectionCell]) -> SelectionCell | None:
    """Maximal BIC-hat among converged cells; ties go to fewer parameters then smaller G."""
    ok = [c for c in cells if c.error is None and c.converged and math.isfinite(c.bic)]
    if not ok:
        return None
    return max(ok, key=lambda c: (c.bic, -c.nu, -c.G))


@dataclass
class SelectionReport:
    cells: list[SelectionCell]
    best: SelectionCell | None
    fits: dict = field(default_factory=dict, repr=False)

    @property
    def winner(self) -> tuple[CovModel, int] | None:
        return None if self.best is None else (self.best.model, self.best.G)

    def cell(self, model, G) -> SelectionCell:
        model = CovModel(model)
        return next(c for c in self.cells if c.model is model and c.G == G)

    def to_dict(self) -> dict:
        return {"cells": [c.to_dict() for c in self.cells],
                "best": None if self.best is None else {"model": self.best.model.value, "G": self.best.G,
                                                        "bic": self.best.bic}}

    def bic_table(self) -> str:
        """Models as rows, G as columns; '*' marks non-converged, 'x' failed cells."""
        Gs = sorted({c.G for c in self.cells})
        models = [m for m in ALL_MODELS if any(c.model is m for c in self.cells)]
        lines = ["model " + "".join(f"{'G=' + str(g):>14}" for g in Gs)]
        for m in models:
            row = f"{m.value:<6}"
            for g in Gs:
                c = next((c for c in self.cells if c.model is m and c.G == g), None)
                if c is None or c.error is not None:
                    row += f"{'x':>14}"
                else:
                    mark = "" if c.converged else "*"
                    row += f"{c.bic:>13.2f}{mark or ' '}"
            lines.append(row)
        if self.best is not None:
            lines.append(f"best: {self.best.model.value} G={self.best.G}")
        return "\n".join(lines)

    def csv_rows(self) -> list[list]:
        rows = [["model", "G", "bic", "nu", "loglik", "converged", "n_iter", "error"]]
        for c in self.cells:
            rows.append([c.model.value, c.G, c.bic, c.nu, c.loglik, int(c.converged), c.n_iter, c.error or ""])
        return rows


def _run_cell(args) -> tuple[SelectionCell, FitResult | None]:
    data, cfg, thresholds = args
    cell = SelectionCell(cfg.model, cfg.G)
    try:
        res = fit(data, cfg, thresholds)
    except Exception as err:  # reported per cell
        cell.error = f"{type(err).__name__}: {err}"
        return cell, None
    cell.bic, cell.nu, cell.loglik = res.bic, res.nu, res.loglik
    cell.converged, cell.n_iter = res.converged, res.n_iter
    res.mc_table = None
    return cell, res


def grid_search(data: MixedDataset, models: Iterable[CovModel | str] = ALL_MODELS,
                G_range: Iterable[int] = (1, 2, 3, 4), config: FitConfig | None = None,
                jobs: int | None = 1, thresholds: ThresholdSet | None = None,
                keep_fits: bool = True) -> SelectionReport:
    """Fit every (model, G) cell and pick the BIC-hat maximiser."""
    config = config or FitConfig()
    models = [CovModel(m) for m in models]
    Gs = list(G_range)
    if not models or not Gs:
        raise ValueError("empty model grid")
    if thresholds is None:
        thresholds = compute_thresholds(data)
    if jobs is None:
        jobs = os.cpu_count() or 1
    tasks = [(data, replace(config, model=m, G=g), thresholds) for m in models for g in Gs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    cells = [c for c, _ in results]
    if all(c.error is not None for c in cells):
        detail = "; ".join(f"{c.model.value}/G={c.G}: {c.error}" for c in cells)
        raise RuntimeError(f"every grid cell failed: {detail}")
    best = select_best(cells)
    if best is None:
        log.warning("no grid cell converged; no model selected")
    fits = {(c.model, c.G): r for c, r in results if r is not None} if keep_fits else {}
    return SelectionReport(cells, best, fits)
