"""Parameter containers for the six diagonal covariance structures.

Each cluster covariance is diagonal with entries ``lam[g] * a[g, p]`` on
continuous/ordinal dimensions and ``lam_tilde[g] * a[g, p]`` on nominal
dimensions. Shape diagonals have unit product over the continuous/ordinal
block.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .kernels import LatentLayout


class CovModel(str, Enum):
    """Volume (E/V) and shape (I/E/V) sharing; orientation is always identity."""

    EII = "EII"
    VII = "VII"
    EEI = "EEI"
    VEI = "VEI"
    EVI = "EVI"
    VVI = "VVI"

    @property
    def volume_varies(self) -> bool:
        return self.value[0] == "V"

    @property
    def shape(self) -> str:
        """'I' identity, 'E' shared across clusters, 'V' cluster specific."""
        return self.value[1]

    @property
    def nominal_volume_varies(self) -> bool:
        return self in (CovModel.VII, CovModel.VEI, CovModel.VVI)

    @property
    def nominal_shape_varies(self) -> bool:
        return self in (CovModel.EVI, CovModel.VVI)

    def __str__(self):
        return self.value


ALL_MODELS = tuple(CovModel)


def covariance_parameter_count(model: CovModel | str, G: int, layout: LatentLayout) -> int:
    """Covariance parameter counts for the six structures (two columns: with/without nominal)."""
    model = CovModel(model)
    C, O, P = layout.C, layout.O, layout.P
    if not layout.has_nominal:
        return {
            CovModel.EII: 1,
            CovModel.VII: G,
            CovModel.EEI: 1 + P,
            CovModel.VEI: G + P,
            CovModel.EVI: 1 + G * P,
            CovModel.VVI: G * (1 + P),
        }[model]
    return {
        CovModel.EII: 1,
        CovModel.VII: 2 * G - 1,
        CovModel.EEI: C + O,
        CovModel.VEI: 2 * G + C + O - 2,
        CovModel.EVI: G * (P - 2) + C + O - P + 2,
        CovModel.VVI: P * (G - 1) + O,
    }[model]


def count_free_parameters(model: CovModel | str, G: int, layout: LatentLayout) -> int:
    """Mixing weights + means (one centring constraint per nominal dim) + covariance."""
    if G < 1:
        raise ValueError("G must be at least 1")
    mixing = G - 1
    means = G * layout.CO + (G - 1) * layout.n_nominal_dims
    return mixing + means + covariance_parameter_count(model, G, layout)


@dataclass(frozen=True)
class ModelParams:
    model: CovModel
    pi: np.ndarray          # (G,)
    mu: np.ndarray          # (G, P)
    lam: np.ndarray         # (G,) equal entries when volume is shared
    lam_tilde: np.ndarray | None  # (G,) or None without nominal dims
    a: np.ndarray           # (G, P)

    def __post_init__(self):
        object.__setattr__(self, "model", CovModel(self.model))
        for name in ("pi", "mu", "lam", "lam_tilde", "a"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.array(v, dtype=float)
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def G(self) -> int:
        return self.pi.shape[0]

    @property
    def P(self) -> int:
        return self.mu.shape[1]

    def variances(self, layout: LatentLayout) -> np.ndarray:
        """G x P diagonal covariance entries."""
        v = self.lam[:, None] * self.a
        if layout.has_nominal:
            v[:, layout.CO:] = self.lam_tilde[:, None] * self.a[:, layout.CO:]
        return v

    def flatten(self) -> np.ndarray:
        parts = [self.pi, self.mu.ravel(), self.lam]
        if self.lam_tilde is not None:
            parts.append(self.lam_tilde)
        parts.append(self.a.ravel())
        return np.concatenate(parts)

    def flat_names(self) -> list[str]:
        G, P = self.mu.shape
        names = [f"pi[{g}]" for g in range(G)]
        names += [f"mu[{g},{p}]" for g in range(G) for p in range(P)]
        names += [f"lambda[{g}]" for g in range(G)]
        if self.lam_tilde is not None:
            names += [f"lambda_tilde[{g}]" for g in range(G)]
        names += [f"a[{g},{p}]" for g in range(G) for p in range(P)]
        return names

    @classmethod
    def unflatten(cls, model, vec, G: int, P: int, has_nominal: bool) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        i = 0

        def take(n):
            nonlocal i
            out = vec[i:i + n]
            i += n
            return out
        pi = take(G)
        mu = take(G * P).reshape(G, P)
        lam = take(G)
        lt = take(G) if has_nominal else None
        a = take(G * P).reshape(G, P)
        return cls(model, pi, mu, lam, lt, a)

    def to_dict(self, layout: LatentLayout | None = None) -> dict:
        d = {
            "model": self.model.value,
            "G": self.G,
            "P": self.P,
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "lambda": self.lam.tolist(),
            "lambda_tilde": None if self.lam_tilde is None else self.lam_tilde.tolist(),
            "a": self.a.tolist(),
        }
        if layout is not None:
            d["sigma_diag"] = self.variances(layout).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        lt = d.get("lambda_tilde")
        return cls(d["model"], d["pi"], d["mu"], d["lambda"], lt, d["a"])


def sigma_diagonal(params: ModelParams, g: int, layout: LatentLayout) -> np.ndarray:
    return params.variances(layout)[g]


def validate(params: ModelParams, layout: LatentLayout, atol: float = 1e-8) -> None:
    """Raise ``ValueError`` if any container invariant fails."""
    G, P = params.G, layout.P
    if params.mu.shape != (G, P) or params.a.shape != (G, P) or params.lam.shape != (G,):
        raise ValueError(f"parameter shapes inconsistent with G={G}, P={P}")
    if not np.all(params.pi > 0) or abs(params.pi.sum() - 1) > atol:
        raise ValueError("mixing weights must be positive and sum to 1")
    if not np.all(params.lam > 0):
        raise ValueError("lambda must be positive")
    if not np.all(params.a > 0):
        raise ValueError("shape entries a must be positive")
    if not np.all(np.isfinite(params.mu)):
        raise ValueError("means must be finite")
    if layout.CO:
        logprod = np.log(params.a[:, : layout.CO]).sum(1)
        if np.any(np.abs(logprod) > atol * layout.CO):
            raise ValueError("shape entries must have unit product on the continuous/ordinal block")
    if layout.has_nominal:
        if params.lam_tilde is None or params.lam_tilde.shape != (G,) or not np.all(params.lam_tilde > 0):
            raise ValueError("lambda_tilde must be a positive G-vector when nominal variables exist")
        if np.any(np.abs(params.pi @ params.mu[:, layout.CO:]) > atol):
            raise ValueError("nominal means must satisfy sum_g pi_g mu_gp = 0")


_ROUND = 16 * np.finfo(float).eps


def enforce_identifiability(params: ModelParams, layout: LatentLayout) -> ModelParams:
    """Centre nominal means and normalise nominal volume/shape per model.

    Only nominal-dimension entries change, so continuous/ordinal variances
    are untouched. Idempotent.
    """
    if not layout.has_nominal:
        return params
    model, CO, G = params.model, layout.CO, params.G
    mu = np.array(params.mu)
    nom = mu[:, CO:]
    shift = params.pi @ nom
    # leave dimensions that already satisfy a constraint to rounding alone, so
    # a second application is an exact no-op
    shift[np.abs(shift) <= _ROUND * max(np.abs(nom).max(initial=0.0), 1.0)] = 0.0
    mu[:, CO:] = nom - shift
    lt = np.ones(G) if params.lam_tilde is None else np.array(params.lam_tilde)
    if model.nominal_volume_varies:
        total = lt.sum()
        if abs(total - 1.0) > _ROUND:
            lt = lt / total
    else:
        lt = np.ones(G)
    a = np.array(params.a)
    if model.nominal_shape_varies:
        total = a[:, CO:].sum(0)
        fix = np.abs(total - 1.0) > _ROUND
        a[:, CO:][:, fix] = a[:, CO:][:, fix] / total[fix]
    else:
        a[:, CO:] = 1.0
    return replace(params, mu=mu, lam_tilde=lt, a=a)
