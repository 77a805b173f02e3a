"""Subject similarity kernels: genetic (IBS), clinical and baseline-image.

The clinical kernel works on standardized indicators; the standardization
(mean, scale) is estimated on the training cohort and frozen inside
:class:`KernelParams` so new subjects are kernelled exactly like training ones.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, deltas
from .errors import BadGenotype, DegenerateCohort, LengthMismatch, NonPositiveVariance

log = logging.getLogger(__name__)

KERNEL_NAMES = ("G", "C", "I")


@dataclass(frozen=True, eq=False)
class KernelParams:
    """Kernel hyperparameters.

    ``weights`` is the diagonal of the clinical weight matrix W. ``c_mean`` and
    ``c_scale`` standardize raw clinical vectors before the clinical kernel.
    """

    weights: np.ndarray
    sigma2_C: float
    sigma2_I: float
    c_mean: np.ndarray
    c_scale: np.ndarray
    jitter: float = 1e-10

    def __post_init__(self):
        for name in ("weights", "c_mean", "c_scale"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise NonPositiveVariance("clinical weights must be finite and >= 0")
        if not (self.sigma2_C > 0 and self.sigma2_I > 0):
            raise NonPositiveVariance(f"kernel variances must be > 0 (got {self.sigma2_C}, {self.sigma2_I})")
        if np.any(self.c_scale <= 0):
            raise NonPositiveVariance("clinical scales must be > 0")
        if not (self.weights.size == self.c_mean.size == self.c_scale.size):
            raise LengthMismatch("weights / c_mean / c_scale lengths differ")

    def standardize(self, C: np.ndarray) -> np.ndarray:
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if C.shape[1] != self.c_mean.size:
            raise LengthMismatch(f"expected {self.c_mean.size} clinical indicators, got {C.shape[1]}")
        return (C - self.c_mean) / self.c_scale

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "sigma2_C": float(self.sigma2_C),
            "sigma2_I": float(self.sigma2_I),
            "c_mean": self.c_mean.tolist(),
            "c_scale": self.c_scale.tolist(),
            "jitter": float(self.jitter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelParams":
        return cls(np.array(d["weights"]), float(d["sigma2_C"]), float(d["sigma2_I"]),
                   np.array(d["c_mean"]), np.array(d["c_scale"]), float(d.get("jitter", 1e-10)))


# --- pairwise kernels ------------------------------------------------------

def _check_genotype(g: np.ndarray) -> None:
    if not np.all(np.isin(g, (0, 1, 2))):
        raise BadGenotype("genotype entries must be in {0,1,2}")


def ibs_kernel(g_i, g_j) -> float:
    """Identity-by-state similarity: mean allele sharing over loci, in [0, 1]."""
    g_i = np.asarray(g_i)
    g_j = np.asarray(g_j)
    if g_i.shape != g_j.shape or g_i.size == 0:
        raise LengthMismatch(f"genotype lengths differ or are empty: {g_i.shape} vs {g_j.shape}")
    _check_genotype(g_i)
    _check_genotype(g_j)
    S = g_i.size
    return float(np.sum(2 - np.abs(g_i.astype(np.int64) - g_j.astype(np.int64))) / (2 * S))


def _as_weights(W, Q: int) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim == 2:
        if W.shape != (Q, Q) or np.any(W != np.diag(np.diag(W))):
            raise LengthMismatch("W must be a diagonal QxQ matrix")
        W = np.diag(W)
    W = W.reshape(-1)
    if W.size != Q:
        raise LengthMismatch(f"W has {W.size} entries, clinical vectors have {Q}")
    if np.any(W < 0):
        raise NonPositiveVariance("W entries must be >= 0")
    return W


def clinical_kernel(c_i, c_j, W, sigma2_C: float) -> float:
    """exp(-(c_i - c_j)' W (c_i - c_j) / sigma2_C) with W diagonal (vector or matrix)."""
    c_i = np.asarray(c_i, dtype=float).reshape(-1)
    c_j = np.asarray(c_j, dtype=float).reshape(-1)
    if c_i.size != c_j.size:
        raise LengthMismatch(f"clinical lengths differ: {c_i.size} vs {c_j.size}")
    if not sigma2_C > 0:
        raise NonPositiveVariance(f"sigma2_C must be > 0, got {sigma2_C}")
    w = _as_weights(W, c_i.size)
    d = c_i - c_j
    return float(np.exp(-np.sum(w * d * d) / sigma2_C))


def image_kernel(f_i, f_j, sigma2_I: float) -> float:
    """exp(-||f_i - f_j||^2 / sigma2_I)."""
    f_i = np.asarray(f_i, dtype=float).reshape(-1)
    return clinical_kernel(f_i, f_j, np.ones(f_i.size), sigma2_I)


# --- matrix forms ----------------------------------------------------------

def ibs_cross(G1: np.ndarray, G2: np.ndarray) -> np.ndarray:
    """IBS kernel between every row of ``G1`` (n1, S) and ``G2`` (n2, S)."""
    G1 = np.atleast_2d(np.asarray(G1, dtype=np.int64))
    G2 = np.atleast_2d(np.asarray(G2, dtype=np.int64))
    if G1.shape[1] != G2.shape[1] or G1.shape[1] == 0:
        raise LengthMismatch(f"genotype lengths differ or are empty: {G1.shape[1]} vs {G2.shape[1]}")
    _check_genotype(G1)
    _check_genotype(G2)
    acc = np.zeros((G1.shape[0], G2.shape[0]), dtype=np.int64)
    for s in range(G1.shape[1]):  # one locus at a time keeps memory O(n1*n2)
        acc += 2 - np.abs(G1[:, s, None] - G2[None, :, s])
    return acc / (2.0 * G1.shape[1])


def weighted_sqdist(X1: np.ndarray, X2: np.ndarray, w: np.ndarray) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != X2.shape[1] or X1.shape[1] != w.size:
        raise LengthMismatch(f"feature lengths differ: {X1.shape[1]}, {X2.shape[1]}, weights {w.size}")
    out = np.zeros((X1.shape[0], X2.shape[0]))
    for k in range(X1.shape[1]):
        d = X1[:, k, None] - X2[None, :, k]
        out += w[k] * (d * d)
    return out


def rbf_cross(X1, X2, w, sigma2: float) -> np.ndarray:
    if not sigma2 > 0:
        raise NonPositiveVariance(f"kernel variance must be > 0, got {sigma2}")
    return np.exp(-weighted_sqdist(X1, X2, np.asarray(w, dtype=float)) / sigma2)


def cross_grams(params: KernelParams, G_new, C_new, F_new, G_bank, C_bank, F_bank) -> dict[str, np.ndarray]:
    """Kernels between new subjects (rows) and bank subjects (columns).

    Clinical inputs are raw; both sides are standardized with ``params``.
    """
    F_new = np.atleast_2d(np.asarray(F_new, dtype=float))
    return {
        "G": ibs_cross(G_new, G_bank),
        "C": rbf_cross(params.standardize(C_new), params.standardize(C_bank), params.weights, params.sigma2_C),
        "I": rbf_cross(F_new, F_bank, np.ones(F_new.shape[1]), params.sigma2_I),
    }


# --- parameter estimation --------------------------------------------------

def _standardization(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = C.mean(axis=0)
    scale = C.std(axis=0)
    constant = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if C.shape[1] == 0 or np.all(constant):
        raise DegenerateCohort("all clinical indicators are constant across subjects")
    if np.any(constant):
        log.warning("clinical columns %s are constant; they contribute nothing to K_C",
                    (np.flatnonzero(constant) + 1).tolist())
    scale = np.where(constant, 1.0, scale)
    return mean, scale


def _pair_statistic(D: np.ndarray, how: str) -> float:
    iu = np.triu_indices(D.shape[0], k=1)
    vals = D[iu]
    if how == "mean":
        return float(vals.mean())
    if how == "median":
        return float(np.median(vals))
    raise ValueError(f"unknown bandwidth rule {how!r}")


def kernel_params_with_weights(cohort: Cohort, weights, bandwidth: str = "mean") -> KernelParams:
    """Standardization and bandwidths from ``cohort`` for a given clinical weight vector."""
    if cohort.n_subjects < 2:
        raise DegenerateCohort("need at least 2 subjects to estimate kernel bandwidths")
    if cohort.n_loci == 0 or cohort.n_features == 0:
        raise DegenerateCohort("cohort needs at least one genetic locus and one image feature")
    c_mean, c_scale = _standardization(cohort.clinical)
    w = np.asarray(weights, dtype=float).reshape(-1)
    Z = (cohort.clinical - c_mean) / c_scale
    s2c = _pair_statistic(weighted_sqdist(Z, Z, w), bandwidth)
    if not s2c > 0:
        raise DegenerateCohort("weighted clinical distances are all zero")
    F = cohort.features
    s2i = _pair_statistic(weighted_sqdist(F, F, np.ones(F.shape[1])), bandwidth)
    if not s2i > 0:
        raise DegenerateCohort("baseline image features have zero variance")
    return KernelParams(w, s2c, s2i, c_mean, c_scale)


def clinical_effect_sizes(cohort: Cohort) -> np.ndarray:
    """|slope| of per-subject rate of change regressed on each standardized clinical indicator.

    The rate for a subject is dy/dx averaged over its observations with dx != 0
    and over phenotype dimensions.
    """
    dx, dY = deltas(cohort)
    moving = dx != 0
    if not moving.any():
        raise DegenerateCohort("no observation with a nonzero age difference")
    rates = dY[moving] / dx[moving, None]
    per_obs = rates.mean(axis=1)
    subj = cohort.incidence[moving]
    sums = np.bincount(subj, weights=per_obs, minlength=cohort.n_subjects)
    counts = np.bincount(subj, minlength=cohort.n_subjects)
    has = counts > 0
    r = sums[has] / counts[has]

    c_mean, c_scale = _standardization(cohort.clinical)
    Z = ((cohort.clinical - c_mean) / c_scale)[has]
    Zc = Z - Z.mean(axis=0)
    rc = r - r.mean()
    denom = np.sum(Zc * Zc, axis=0)
    slopes = np.divide(Zc.T @ rc, denom, out=np.zeros_like(denom), where=denom > 0)
    return np.abs(slopes)


def estimate_kernel_params(cohort: Cohort, bandwidth: str = "mean") -> KernelParams:
    """Estimate W, sigma2_C and sigma2_I from a training cohort.

    W is proportional to the absolute univariate effect sizes of the clinical
    indicators on the rate of change, normalized to trace Q. Bandwidths are the
    mean (or ``bandwidth="median"``) over subject pairs of the corresponding
    squared distances.
    """
    b = clinical_effect_sizes(cohort)
    Q = b.size
    if b.sum() > 0:
        w = b * (Q / b.sum())
    else:
        log.warning("no clinical indicator has a nonzero effect size; using W = I")
        w = np.ones(Q)
    return kernel_params_with_weights(cohort, w, bandwidth)


# --- Gram matrices ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GramSet:
    K_G: np.ndarray
    K_C: np.ndarray
    K_I: np.ndarray
    params: KernelParams
    jitter_added: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return {"G": self.K_G, "C": self.K_C, "I": self.K_I}[name]

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.K_G, self.K_C, self.K_I


def _mirror(K: np.ndarray) -> np.ndarray:
    upper = np.triu(K)
    return upper + np.triu(K, 1).T


def _repair_psd(K: np.ndarray, base_jitter: float, name: str) -> tuple[np.ndarray, float]:
    N = K.shape[0]
    lam = np.linalg.eigvalsh(K)[0]
    if lam >= 0:
        return K, 0.0
    added = base_jitter * N
    if lam + added < 0:
        added += -lam
    log.info("K_%s min eigenvalue %.3g; adding %.3g to the diagonal", name, lam, added)
    return K + added * np.eye(N), added


def gram_set(cohort: Cohort, params: KernelParams) -> GramSet:
    """The three N x N subject Gram matrices, PSD-repaired if needed."""
    Cz = params.standardize(cohort.clinical)
    F = cohort.features
    raw = {
        "G": ibs_cross(cohort.genotypes, cohort.genotypes),
        "C": rbf_cross(Cz, Cz, params.weights, params.sigma2_C),
        "I": rbf_cross(F, F, np.ones(F.shape[1]), params.sigma2_I),
    }
    out = {}
    added = {}
    for name in KERNEL_NAMES:
        K, j = _repair_psd(_mirror(raw[name]), params.jitter, name)
        out[name] = K
        added[name] = j
    return GramSet(out["G"], out["C"], out["I"], params, added)
