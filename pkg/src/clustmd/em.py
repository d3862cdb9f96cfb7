"""(Monte Carlo) EM fitting for the latent Gaussian mixture.

Continuous and ordinal data give an exact EM. Nominal variables make the
E-step expectations intractable, so each iteration rebuilds a Monte Carlo
table of category probabilities and conditional moments per cluster.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .dataset import MixedDataset, ThresholdSet, compute_thresholds
from .kernels import LatentLayout, NominalMCTable, build_layout, build_mc_table, truncated_moments
from .params import CovModel, ModelParams, count_free_parameters, enforce_identifiability

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2 * np.pi)
INIT_METHODS = ("kmeans", "hierarchical", "random")
_N_BATCHES = 5
_NOISE_Z = 4.0


class FitError(RuntimeError):
    pass


class EmptyClusterError(FitError):
    def __init__(self, g: int, mass: float):
        super().__init__(f"cluster {g + 1} is empty or degenerate (mass {mass:.3g})")
        self.cluster = g
        self.mass = mass


@dataclass(frozen=True)
class EStepQuantities:
    """Responsibilities and conditional latent moments.

    ``m`` and ``s`` are N x G x (P - C): E[z_p] and E[z_p^2] given the observed
    categorical response and cluster membership.
    """

    tau: np.ndarray
    m: np.ndarray
    s: np.ndarray
    log_dens: np.ndarray  # log(pi_g f_g(y_i)), N x G
    loglik: float


@dataclass(frozen=True)
class MStepWorkspace:
    mass: np.ndarray      # (G,) sum_i tau_ig
    first: np.ndarray     # (G, P) sum_i tau_ig z*_igp
    second: np.ndarray    # (G, P) sum_i tau_ig E[z_p^2] (zeta_gp)
    mean: np.ndarray      # (G, P) first / mass
    scatter: np.ndarray   # (G, P) sum_i tau_ig E[(z_p - mean_gp)^2]


@dataclass(frozen=True)
class FitConfig:
    model: CovModel = CovModel.VVI
    G: int = 2
    max_iters: int = 1000
    mc_samples: int = 2000
    seed: int = 0
    window: int = 100
    tol: float = 1e-3
    average_window: int = 100
    average_final: bool = True
    init: str = "kmeans"
    final_mc_factor: int = 1
    max_restarts: int = 3

    def __post_init__(self):
        object.__setattr__(self, "model", CovModel(self.model))
        if self.G < 1:
            raise ValueError("G must be at least 1")
        if not self.max_iters >= self.window >= 1:
            raise ValueError("need max_iters >= window >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if self.init not in INIT_METHODS:
            raise ValueError(f"init must be one of {INIT_METHODS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.value
        return d


@dataclass
class FitResult:
    params: ModelParams
    assignments: np.ndarray       # 1-based cluster labels
    tau: np.ndarray
    trace: np.ndarray             # iterations x scalars, after each M-step
    trace_names: list[str]
    loglik_trace: np.ndarray      # E-step log-likelihood at the parameters entering each iteration
    loglik: float                 # approximated observed log-likelihood at the final parameters
    bic: float
    nu: int
    n_iter: int
    converged: bool
    config: FitConfig
    layout: LatentLayout
    restarts: int = 0
    mc_table: NominalMCTable | None = field(default=None, repr=False)

    def to_dict(self, include_tau: bool = False, include_trace: bool = False) -> dict:
        d = {
            "config": self.config.to_dict(),
            "layout": {"C": self.layout.C, "O": self.layout.O, "P": self.layout.P,
                       "nominal_levels": list(self.layout.nominal_levels)},
            "params": self.params.to_dict(self.layout),
            "loglik": self.loglik,
            "bic": self.bic,
            "nu": self.nu,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "restarts": self.restarts,
            "assignments": self.assignments.tolist(),
            "loglik_trace": self.loglik_trace.tolist(),
        }
        if include_tau:
            d["tau"] = self.tau.tolist()
        if include_trace:
            d["trace_names"] = self.trace_names
            d["trace"] = self.trace.tolist()
        return d


# --------------------------------------------------------------------------
# E-step
# --------------------------------------------------------------------------

def _ordinal_bounds(data: MixedDataset, thresholds: ThresholdSet):
    lo = np.empty(data.ordinal.shape)
    hi = np.empty(data.ordinal.shape)
    for k in range(data.O):
        gam = thresholds[k]
        lvl = data.ordinal[:, k]
        lo[:, k] = gam[lvl - 1]
        hi[:, k] = gam[lvl]
    return lo, hi


def continuous_log_density(data: MixedDataset, params: ModelParams, layout: LatentLayout) -> np.ndarray:
    """N x G log-density of the continuous block under each cluster."""
    C = layout.C
    if C == 0:
        return np.zeros((data.N, params.G))
    v = params.variances(layout)[:, :C]
    y = data.continuous
    with np.errstate(over="ignore"):
        d = (y[:, None, :] - params.mu[None, :, :C]) ** 2 / v[None]
    return -0.5 * (d.sum(2) + np.log(v).sum(1)[None] + C * _LOG_2PI)


def e_step(data: MixedDataset, thresholds: ThresholdSet, layout: LatentLayout,
           params: ModelParams, mc_table: NominalMCTable | None = None) -> EStepQuantities:
    N, G, C, CO = data.N, params.G, layout.C, layout.CO
    v = params.variances(layout)
    log_dens = np.log(params.pi)[None, :] + continuous_log_density(data, params, layout)
    m = np.empty((N, G, layout.P - C))
    s = np.empty_like(m)

    if layout.O:
        lo, hi = _ordinal_bounds(data, thresholds)
        mu_o = params.mu[:, C:CO]
        sd_o = np.sqrt(v[:, C:CO])
        log_z, mo, so = truncated_moments(mu_o[None], sd_o[None], lo[:, None, :], hi[:, None, :])
        log_dens += log_z.sum(2)
        m[:, :, : layout.O] = mo
        s[:, :, : layout.O] = so

    if layout.has_nominal:
        if mc_table is None:
            raise ValueError("nominal variables need a Monte Carlo table")
        for j, (b0, b1) in enumerate(layout.nominal_blocks):
            y = data.nominal[:, j] - 1
            for g in range(G):
                e = mc_table[g, j]
                log_dens[:, g] += np.log(e.probs[y])
                m[:, g, b0 - C:b1 - C] = e.mean[y]
                s[:, g, b0 - C:b1 - C] = e.sq[y]

    norm = logsumexp(log_dens, axis=1)
    bad = ~np.isfinite(norm)
    with np.errstate(invalid="ignore"):
        tau = np.exp(log_dens - norm[:, None])
    if bad.any():
        log.warning("%d observations have zero density under every cluster; using uniform responsibilities",
                    int(bad.sum()))
        tau[bad] = 1.0 / G
    return EStepQuantities(tau, m, s, log_dens, float(norm[~bad].sum()))


# --------------------------------------------------------------------------
# M-step
# --------------------------------------------------------------------------

def workspace(data: MixedDataset, q: EStepQuantities, layout: LatentLayout,
              mean: np.ndarray | None = None) -> MStepWorkspace:
    """Weighted sufficient statistics; scatter is taken about ``mean`` (default: weighted mean)."""
    tau, C = q.tau, layout.C
    mass = tau.sum(0)
    G, P = tau.shape[1], layout.P
    first = np.empty((G, P))
    second = np.empty((G, P))
    y = data.continuous
    first[:, :C] = tau.T @ y
    second[:, :C] = tau.T @ (y * y)
    first[:, C:] = np.einsum("ig,igp->gp", tau, q.m)
    second[:, C:] = np.einsum("ig,igp->gp", tau, q.s)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = first / mass[:, None] if mean is None else np.asarray(mean, dtype=float)
    scatter = np.empty((G, P))
    # computed as conditional variance + squared deviation to avoid cancellation
    scatter[:, :C] = np.einsum("ig,igp->gp", tau, (y[:, None, :] - mu[None, :, :C]) ** 2)
    cond_var = np.maximum(q.s - q.m ** 2, 0.0)
    scatter[:, C:] = np.einsum("ig,igp->gp", tau, cond_var + (q.m - mu[None, :, C:]) ** 2)
    return MStepWorkspace(mass, first, second, mu, scatter)


def _geomean(x, axis=-1):
    return np.exp(np.log(x).mean(axis=axis))


def maximize_q(data: MixedDataset, q: EStepQuantities, layout: LatentLayout, model: CovModel | str,
               previous: ModelParams | None = None) -> ModelParams:
    """Maximise the expected complete-data log-likelihood within one covariance family.

    Nominal-block identifiability is not applied here (see ``m_step``).
    ``previous`` seeds the VEI fixed-point iteration and fixes how the
    non-identified VVI nominal volume/shape product is split.
    """
    model = CovModel(model)
    N = data.N
    ws = workspace(data, q, layout)
    n = ws.mass
    G = n.shape[0]
    for g in np.flatnonzero(n < 1e-8 * N):
        raise EmptyClusterError(int(g), float(n[g]))
    pi = n / n.sum()
    mu = ws.mean
    W = ws.scatter
    CO, d1, d2 = layout.CO, layout.CO, layout.n_nominal_dims
    P = layout.P
    lam = np.ones(G)
    a = np.ones((G, P))

    if d1:
        Wb = W[:, :CO]
        bad = np.argwhere(~(Wb > 0))
        if bad.size:
            g = int(bad[0, 0])
            raise EmptyClusterError(g, float(n[g]))
        if model is CovModel.EII:
            lam[:] = Wb.sum() / (d1 * N)
        elif model is CovModel.VII:
            lam = Wb.sum(1) / (d1 * n)
        elif model is CovModel.EEI:
            s2 = Wb.sum(0) / N
            lam[:] = _geomean(s2)
            a[:, :CO] = s2 / lam[0]
        elif model is CovModel.VEI:
            shape = np.ones(d1) if previous is None else np.array(previous.a[0, :CO])
            shape = shape / _geomean(shape)
            for _ in range(500):
                lam = (Wb / shape).sum(1) / (d1 * n)
                b = (Wb / lam[:, None]).sum(0)
                new = b / _geomean(b)
                done = np.max(np.abs(new - shape) / new) < 1e-13
                shape = new
                if done:
                    break
            lam = (Wb / shape).sum(1) / (d1 * n)
            a[:, :CO] = shape
        elif model is CovModel.EVI:
            gm = _geomean(Wb, axis=1)
            a[:, :CO] = Wb / gm[:, None]
            lam[:] = gm.sum() / N
        else:  # VVI
            s2 = Wb / n[:, None]
            lam = _geomean(s2, axis=1)
            a[:, :CO] = s2 / lam[:, None]

    lam_tilde = None
    if d2:
        Wn = W[:, CO:]
        if np.any(~(Wn > 0)):
            g = int(np.argwhere(~(Wn > 0))[0, 0])
            raise EmptyClusterError(g, float(n[g]))
        lam_tilde = np.ones(G)
        if model.nominal_volume_varies and not model.nominal_shape_varies:
            lam_tilde = Wn.sum(1) / (d2 * n)
        elif model is CovModel.EVI:
            a[:, CO:] = Wn / n[:, None]
        elif model is CovModel.VVI:
            prev_a = np.ones((G, d2)) if previous is None else np.array(previous.a[:, CO:])
            lam_tilde = (Wn / prev_a).sum(1) / (d2 * n)
            a[:, CO:] = Wn / (lam_tilde[:, None] * n[:, None])

    return ModelParams(model, pi, mu, lam, lam_tilde, a)


def m_step(data: MixedDataset, q: EStepQuantities, layout: LatentLayout, model: CovModel | str,
           previous: ModelParams | None = None) -> ModelParams:
    """Maximise Q for ``model`` then apply the nominal identifiability constraints."""
    return enforce_identifiability(maximize_q(data, q, layout, model, previous), layout)


def q_function(data: MixedDataset, q: EStepQuantities, layout: LatentLayout, params: ModelParams) -> float:
    """Expected complete-data log-likelihood up to additive constants."""
    ws = workspace(data, q, layout, mean=params.mu)
    v = params.variances(layout)
    n = ws.mass
    with np.errstate(divide="ignore"):
        val = float(n @ np.log(params.pi))
    val -= 0.5 * float((n[:, None] * np.log(v)).sum())
    val -= 0.5 * float((ws.scatter / v).sum())
    return val


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def _coded_matrix(data: MixedDataset) -> np.ndarray:
    X = np.hstack([data.continuous, data.categorical.astype(float)])
    X = X - X.mean(0)
    sd = X.std(0)
    sd[sd == 0] = 1.0
    return X / sd


def initial_partition(data: MixedDataset, method: str, seed: int, G: int) -> np.ndarray:
    """0-based labels with every one of ``G`` groups non-empty."""
    if G > data.N:
        raise ValueError(f"G={G} exceeds N={data.N}")
    if G == 1:
        return np.zeros(data.N, dtype=int)
    if method == "kmeans":
        from sklearn.cluster import KMeans
        X = _coded_matrix(data)
        labels = KMeans(n_clusters=G, n_init=10, random_state=seed).fit_predict(X)
        if np.bincount(labels, minlength=G).min() > 0:
            return labels.astype(int)
    elif method == "hierarchical":
        from scipy.cluster.hierarchy import fcluster, linkage
        X = _coded_matrix(data)
        labels = fcluster(linkage(X, method="complete"), G, criterion="maxclust") - 1
        if labels.max() + 1 == G and np.bincount(labels, minlength=G).min() > 0:
            return labels.astype(int)
    elif method != "random":
        raise ValueError(f"unknown initialisation {method!r}")
    for attempt in range(10):
        rng = np.random.default_rng([int(seed), 7919, attempt])
        labels = rng.integers(G, size=data.N)
        if np.bincount(labels, minlength=G).min() > 0:
            return labels
    raise FitError(f"could not draw a partition with {G} non-empty groups")


def initialize(data: MixedDataset, layout: LatentLayout, method: str, seed: int, G: int,
               model: CovModel | str = CovModel.VVI, thresholds: ThresholdSet | None = None,
               mc_samples: int = 2000) -> ModelParams:
    """Parameters from one M-step on a hard initial partition.

    Latent moments for categorical dimensions are the conditional moments
    under the pooled latent model N(0, 1) given each observed response.
    """
    if thresholds is None:
        thresholds = compute_thresholds(data)
    labels = initial_partition(data, method, seed, G)
    N, C = data.N, layout.C
    tau = np.zeros((N, G))
    tau[np.arange(N), labels] = 1.0
    m = np.empty((N, G, layout.P - C))
    s = np.empty_like(m)
    if layout.O:
        lo, hi = _ordinal_bounds(data, thresholds)
        _, mo, so = truncated_moments(0.0, 1.0, lo, hi)
        m[:, :, : layout.O] = mo[:, None, :]
        s[:, :, : layout.O] = so[:, None, :]
    if layout.has_nominal:
        pooled = build_mc_table(np.zeros((1, layout.P)), np.ones((1, layout.P)), layout,
                                mc_samples, seed, 0)
        for j, (b0, b1) in enumerate(layout.nominal_blocks):
            y = data.nominal[:, j] - 1
            e = pooled[0, j]
            m[:, :, b0 - C:b1 - C] = e.mean[y][:, None, :]
            s[:, :, b0 - C:b1 - C] = e.sq[y][:, None, :]
    q = EStepQuantities(tau, m, s, np.log(np.maximum(tau, 1e-300)), float("nan"))
    return m_step(data, q, layout, model)


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

def _scale_floor(data: MixedDataset, layout: LatentLayout, params: ModelParams) -> np.ndarray:
    """Per-scalar magnitude floor for relative-change tests (only means can sit near zero)."""
    G, P = params.G, layout.P
    sd = np.ones(P)
    if layout.C:
        sd[: layout.C] = np.where(data.continuous.std(0) > 0, data.continuous.std(0), 1.0)
    floor = np.zeros_like(params.flatten())
    floor[G:G + G * P] = np.tile(sd, G)
    return floor


def _batch_mean_var(x: np.ndarray, n_batches: int) -> np.ndarray:
    means = np.stack([b.mean(0) for b in np.array_split(x, n_batches)])
    return means.var(0, ddof=1)


def _window_converged(trace: np.ndarray, t: int, W: int, tol: float, floor: np.ndarray, noisy: bool) -> bool:
    """Compare the means of the last two windows of ``W`` iterations, scalar by scalar."""
    if t < 2 * W:
        return False
    prev = trace[t - 2 * W:t - W]
    cur = trace[t - W:t]
    pm, cm = prev.mean(0), cur.mean(0)
    diff = np.abs(cm - pm)
    ok = diff <= tol * np.maximum(np.abs(pm), floor)
    if noisy and W >= 2 * _N_BATCHES:
        # Monte Carlo jitter is autocorrelated along the chain, so the noise
        # level comes from batch means rather than per-iteration variance
        s2 = 0.5 * (_batch_mean_var(prev, _N_BATCHES) + _batch_mean_var(cur, _N_BATCHES))
        ok |= diff <= _NOISE_Z * np.sqrt(2.0 * s2 / _N_BATCHES)
    return bool(ok.all())


def _average_params(trace: np.ndarray, model: CovModel, G: int, layout: LatentLayout) -> ModelParams:
    p = ModelParams.unflatten(model, trace.mean(0), G, layout.P, layout.has_nominal)
    a = np.array(p.a)
    if layout.CO:
        a[:, : layout.CO] /= _geomean(a[:, : layout.CO], axis=1)[:, None]
    p = replace(p, pi=p.pi / p.pi.sum(), a=a)
    return enforce_identifiability(p, layout)


def fit(data: MixedDataset, config: FitConfig, thresholds: ThresholdSet | None = None) -> FitResult:
    """Run (MC)EM for one covariance model and cluster count."""
    from .selection import approx_loglik, bic_hat

    if thresholds is None:
        thresholds = compute_thresholds(data)
    layout = build_layout(data.schema)
    model, G, S, seed = config.model, config.G, config.mc_samples, config.seed
    nominal = layout.has_nominal

    restarts = 0
    method = config.init
    init_seed = seed
    while True:
        try:
            params = initialize(data, layout, method, init_seed, G, model, thresholds, S)
            floor = _scale_floor(data, layout, params)
            trace = np.empty((config.max_iters, floor.size))
            lls = np.empty(config.max_iters)
            converged = False
            t = 0
            while t < config.max_iters:
                mc = (build_mc_table(params.mu, params.variances(layout), layout, S, seed, t + 1)
                      if nominal else None)
                q = e_step(data, thresholds, layout, params, mc)
                lls[t] = q.loglik
                params = m_step(data, q, layout, model, previous=params)
                trace[t] = params.flatten()
                t += 1
                if _window_converged(trace, t, config.window, config.tol, floor, nominal):
                    converged = True
                    break
            break
        except EmptyClusterError as err:
            restarts += 1
            if restarts > config.max_restarts:
                raise FitError(f"{model}/G={G}: {err}; gave up after {config.max_restarts} restarts") from err
            log.info("%s/G=%d: %s; restarting from a random partition", model, G, err)
            method = "random"
            init_seed = int(np.random.SeedSequence([seed, 104729, restarts]).generate_state(1)[0])

    trace, lls = trace[:t], lls[:t]
    if nominal and config.average_final:
        params = _average_params(trace[-min(config.average_window, t):], model, G, layout)

    final_mc = (build_mc_table(params.mu, params.variances(layout), layout,
                               S * config.final_mc_factor, seed, t + 1) if nominal else None)
    q = e_step(data, thresholds, layout, params, final_mc)
    ll = approx_loglik(data, params, thresholds, layout, final_mc)
    nu = count_free_parameters(model, G, layout)
    return FitResult(
        params=params,
        assignments=q.tau.argmax(1) + 1,
        tau=q.tau,
        trace=trace,
        trace_names=params.flat_names(),
        loglik_trace=lls,
        loglik=ll,
        bic=bic_hat(ll, nu, data.N),
        nu=nu,
        n_iter=t,
        converged=converged,
        config=config,
        layout=layout,
        restarts=restarts,
        mc_table=final_mc,
    )
