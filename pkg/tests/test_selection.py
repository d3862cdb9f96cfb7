import math

import numpy as np
import pytest
from scipy import integrate, stats

from clustmd.dataset import ColumnSpec, MixedDataset, compute_thresholds
from clustmd.em import FitConfig, fit, initialize
from clustmd.kernels import build_layout, build_mc_table
from clustmd.params import ALL_MODELS, CovModel, ModelParams, count_free_parameters
from clustmd.selection import (SelectionCell, approx_loglik, bic_hat, grid_search, pattern_table,
                               select_best)


def test_continuous_only_is_mixture_loglik(blobs):
    data, _ = blobs
    lay = build_layout(data.schema)
    p = ModelParams("VII", [0.3, 0.7], [[0, 0, 0], [9, 10, 11]], [1.2, 0.8], None, np.ones((2, 3)))
    dens = sum(p.pi[g] * stats.multivariate_normal(p.mu[g], p.lam[g] * np.eye(3)).pdf(data.continuous)
               for g in range(2))
    ll = approx_loglik(data, p, compute_thresholds(data), lay)
    assert ll == pytest.approx(np.log(dens).sum(), abs=1e-9)


def test_symmetric_binary_pattern():
    codes = np.array([1] * 37 + [2] * 63).reshape(-1, 1)
    data = MixedDataset((ColumnSpec("b", "ordinal", 2),), np.zeros((100, 0)), codes)
    lay = build_layout(data.schema)
    # thresholds at 0 regardless of proportions, to isolate the formula
    from clustmd.dataset import ThresholdSet, thresholds_from_proportions
    th = ThresholdSet((thresholds_from_proportions([0.5]),), ("b",))
    p = ModelParams("EII", [1.0], [[0.0]], [1.0], None, [[1.0]])
    assert approx_loglik(data, p, th, lay) == pytest.approx(37 * math.log(0.5) + 63 * math.log(0.5), abs=1e-12)


def test_ordinal_mixture_matches_quadrature():
    rng = np.random.default_rng(0)
    codes = rng.choice([1, 2, 3], size=(90, 1), p=[0.2, 0.5, 0.3])
    data = MixedDataset((ColumnSpec("o", "ordinal", 3),), np.zeros((90, 0)), codes)
    lay = build_layout(data.schema)
    th = compute_thresholds(data)
    p = ModelParams("VII", [0.35, 0.65], [[-0.8], [0.6]], [0.5, 1.7], None, [[1.0], [1.0]])
    gam = th[0]
    ll = 0.0
    for k in range(3):
        lo, hi = max(gam[k], -40.0), min(gam[k + 1], 40.0)
        q = sum(p.pi[g] * integrate.quad(stats.norm(p.mu[g, 0], math.sqrt(p.lam[g])).pdf, lo, hi,
                                         epsabs=1e-14, epsrel=1e-13)[0] for g in range(2))
        ll += np.sum(codes == k + 1) * math.log(q)
    assert approx_loglik(data, p, th, lay) == pytest.approx(ll, abs=1e-8)


def test_bic_examples():
    assert bic_hat(0.0, 0, 10) == 0.0
    lay = build_layout([ColumnSpec(f"x{k}", "continuous") for k in range(5)])
    assert count_free_parameters("VVI", 2, lay) - (1 + 10) == 12
    with pytest.raises(ValueError):
        bic_hat(1.0, 1, 0)


def test_bic_single_spherical_gaussian():
    rng = np.random.default_rng(9)
    x = rng.normal(2, 1.5, size=(200, 3))
    schema = tuple(ColumnSpec(f"x{k}", "continuous") for k in range(3))
    data = MixedDataset(schema, x, np.zeros((200, 0), dtype=int))
    res = fit(data, FitConfig(model="EII", G=1, max_iters=5, window=5, average_window=5))
    s2 = ((x - x.mean(0)) ** 2).mean()
    ll = -0.5 * 200 * 3 * (math.log(2 * math.pi * s2) + 1)
    assert res.loglik == pytest.approx(ll, abs=1e-8)
    assert res.bic == pytest.approx(2 * ll - 4 * math.log(200), abs=1e-8)


def test_pattern_table_and_row_permutation(mixed50):
    lay = build_layout(mixed50.schema)
    th = compute_thresholds(mixed50)
    p = initialize(mixed50, lay, "kmeans", 0, 2, "VVI", th, 500)
    mc = build_mc_table(p.mu, p.variances(lay), lay, 500, 0, 1)
    tab = pattern_table(mixed50, p, th, lay, mc)
    assert tab.counts.sum() == mixed50.N
    assert np.all(tab.q > 0) and np.all(tab.q <= 1)
    perm = np.random.default_rng(1).permutation(mixed50.N)
    shuffled = MixedDataset(mixed50.schema, mixed50.continuous[perm], mixed50.categorical[perm])
    a = approx_loglik(mixed50, p, th, lay, mc)
    assert approx_loglik(shuffled, p, th, lay, mc) == pytest.approx(a, abs=1e-9)


def test_no_nominal_loglik_reproducible():
    rng = np.random.default_rng(2)
    data = MixedDataset((ColumnSpec("x", "continuous"), ColumnSpec("o", "ordinal", 3)),
                        rng.normal(size=(60, 1)), rng.integers(1, 4, (60, 1)))
    cfg = FitConfig(model="VII", G=2, max_iters=40, window=20, average_window=20)
    assert fit(data, cfg).loglik == fit(data, cfg).loglik


def test_select_best_ties_and_convergence():
    cells = [SelectionCell(CovModel.VVI, 2, bic=-10.0, nu=20, converged=True),
             SelectionCell(CovModel.VII, 2, bic=-10.0, nu=8, converged=True),
             SelectionCell(CovModel.VII, 1, bic=-10.0, nu=8, converged=True),
             SelectionCell(CovModel.EII, 3, bic=-1.0, nu=5, converged=False),
             SelectionCell(CovModel.EEI, 2, bic=float("nan"), error="boom")]
    best = select_best(cells)
    assert (best.model, best.G) == (CovModel.VII, 1)
    assert select_best(cells[3:]) is None


def test_grid_on_separated_blobs(blobs):
    data, _ = blobs
    rep = grid_search(data, ALL_MODELS, (1, 2, 3, 4), FitConfig(max_iters=300))
    assert rep.best.G == 2 and rep.best.model in (CovModel.EII, CovModel.VII)
    assert len(rep.cells) == 24 and "best:" in rep.bic_table()
    assert rep.csv_rows()[0][:3] == ["model", "G", "bic"]
    assert rep.to_dict()["best"]["G"] == 2


def test_grid_single_g_has_six_cells(blobs):
    data, _ = blobs
    rep = grid_search(data, G_range=[1], config=FitConfig(max_iters=20, window=10, average_window=10))
    assert len(rep.cells) == 6 and rep.winner is not None


def test_grid_parallel_matches_serial(blobs):
    data, _ = blobs
    cfg = FitConfig(max_iters=50, window=20, average_window=20)
    a = grid_search(data, ["EII", "VII"], (1, 2), cfg, jobs=1)
    b = grid_search(data, ["EII", "VII"], (1, 2), cfg, jobs=2)
    assert [c.bic for c in a.cells] == [c.bic for c in b.cells]


def test_grid_all_cells_fail():
    data = MixedDataset((ColumnSpec("x", "continuous"),), np.array([[0.0], [1.0], [2.0]]), np.zeros((3, 0)))
    with pytest.raises(RuntimeError, match="every grid cell failed"):
        grid_search(data, ["EII"], (5,), FitConfig(max_iters=10, window=5, average_window=5))
    with pytest.raises(ValueError):
        grid_search(data, [], (1,))
