"""Maximum-likelihood fit of the population trend and the variance components.

For one phenotype dimension the stacked model is

    dy = dx * beta_bar + dx * (Z h_G + Z h_C + Z h_I) + eps,
    h_D ~ N(0, tau2_D K_D),  eps ~ N(0, sigma2 I),

so dy ~ N(dx * beta_bar, V) with

    V = sum_D tau2_D B K_D B' + sigma2 I,    B = diag(dx) Z.

``Z`` is the (n, N) observation-to-subject incidence matrix. beta_bar is
profiled out by generalized least squares and theta = (tau2_G, tau2_C,
tau2_I, sigma2) is found by projected Fisher scoring with step halving. The
fitted random effects are kept in dual form, h_D = K_D alpha_D with
alpha_D = tau2_D B' V^-1 (dy - dx beta_bar).
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .cohort import Cohort, deltas
from .errors import DegenerateDesign, SchemaError, SingularV
from .kernels import GramSet, KernelParams

log = logging.getLogger(__name__)

SCHEMA = "longipred-model/1"
_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VarianceComponents:
    tau2_G: float
    tau2_C: float
    tau2_I: float
    sigma2: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"variance components must be finite: {vals}")
        if np.any(vals[:3] < 0) or not self.sigma2 > 0:
            raise ValueError(f"need tau2 >= 0 and sigma2 > 0: {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tau2_G, self.tau2_C, self.tau2_I, self.sigma2], dtype=float)

    @property
    def taus(self) -> np.ndarray:
        return self.as_array()[:3]

    @classmethod
    def from_array(cls, a) -> "VarianceComponents":
        a = [float(v) for v in a]
        return cls(*a)


@dataclass
class FitOptions:
    """Fisher-scoring controls.

    Convergence is declared when the projected score satisfies
    ``max|score| < tol_score * n`` or when the relative log-likelihood change
    of an accepted step drops below ``tol_rel_ll``.
    """

    tol_score: float = 1e-6
    tol_rel_ll: float = 1e-10
    max_iter: int = 200
    max_halvings: int = 40
    reml: bool = False
    threads: int | None = None


# --- per-dimension likelihood machinery -------------------------------------

class _Design:
    """Everything about one fit that does not depend on theta."""

    def __init__(self, dx: np.ndarray, incidence: np.ndarray, grams: tuple[np.ndarray, ...]):
        self.dx = np.asarray(dx, dtype=float)
        self.inc = np.asarray(incidence)
        self.n = self.dx.size
        self.N = grams[0].shape[0]
        self.K = grams
        B = np.zeros((self.n, self.N))
        B[np.arange(self.n), self.inc] = self.dx
        self.B = B
        outer = np.outer(self.dx, self.dx)
        # kernel blocks expanded to observation space: B K B'
        self.A = tuple(outer * K[np.ix_(self.inc, self.inc)] for K in grams)

    def covariance(self, theta: np.ndarray) -> np.ndarray:
        V = theta[0] * self.A[0] + theta[1] * self.A[1] + theta[2] * self.A[2]
        V[np.diag_indices_from(V)] += theta[3]
        return V

    def factor(self, theta: np.ndarray):
        try:
            return cho_factor(self.covariance(theta), lower=True, check_finite=True)
        except (LinAlgError, ValueError) as exc:
            raise SingularV(f"marginal covariance not positive definite at theta={theta}") from exc


@dataclass
class _State:
    theta: np.ndarray
    loglik: float
    beta: float
    resid: np.ndarray
    Vinv_r: np.ndarray
    score: np.ndarray | None = None
    info: np.ndarray | None = None


def _gls(design: _Design, cho, y: np.ndarray) -> tuple[float, np.ndarray, float]:
    Vi_x = cho_solve(cho, design.dx)
    xVx = float(design.dx @ Vi_x)
    if not xVx > 1e-300:
        raise DegenerateDesign("dx' V^-1 dx is zero: no age change to identify a trend")
    return float(Vi_x @ y) / xVx, Vi_x, xVx


def _evaluate(design: _Design, y: np.ndarray, theta: np.ndarray, beta: float | None = None,
              reml: bool = False, derivatives: bool = True) -> _State:
    cho = design.factor(theta)
    L = cho[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    beta_gls, Vi_x, xVx = _gls(design, cho, y)
    b = beta_gls if beta is None else float(beta)
    r = y - design.dx * b
    Vi_r = cho_solve(cho, r)
    quad = float(r @ Vi_r)
    if reml:
        ll = -0.5 * ((design.n - 1) * _LOG2PI + logdet + math.log(xVx) + quad)
    else:
        ll = -0.5 * (design.n * _LOG2PI + logdet + quad)
    state = _State(theta.copy(), ll, b, r, Vi_r)
    if not derivatives:
        return state

    Pi = cho_solve(cho, np.eye(design.n))
    Pi = 0.5 * (Pi + Pi.T)
    if reml:
        Pi -= np.outer(Vi_x, Vi_x) / xVx
    B = design.B
    PiB = Pi @ B
    M = B.T @ PiB
    M2 = PiB.T @ PiB
    u = B.T @ Vi_r

    score = np.empty(4)
    info = np.empty((4, 4))
    KM = []
    for d, K in enumerate(design.K):
        score[d] = 0.5 * (u @ K @ u - np.sum(K * M))
        KM.append(K @ M)
    score[3] = 0.5 * (Vi_r @ Vi_r - np.trace(Pi))
    for d in range(3):
        for e in range(d, 3):
            info[d, e] = info[e, d] = 0.5 * np.sum(KM[d] * KM[e].T)
        info[d, 3] = info[3, d] = 0.5 * np.sum(design.K[d] * M2)
    info[3, 3] = 0.5 * np.sum(Pi * Pi)
    state.score = score
    state.info = info
    return state


def _design_for(cohort: Cohort, grams: GramSet) -> _Design:
    dx, _ = deltas(cohort)
    return _Design(dx, cohort.incidence, grams.as_tuple())


def _theta_array(theta) -> np.ndarray:
    if isinstance(theta, VarianceComponents):
        return theta.as_array()
    return np.asarray(theta, dtype=float)


def marginal_covariance(cohort: Cohort, grams: GramSet, theta) -> np.ndarray:
    """V = sum_D tau2_D diag(dx) Z K_D Z' diag(dx) + sigma2 I."""
    return _design_for(cohort, grams).covariance(_theta_array(theta))


def log_likelihood(cohort: Cohort, grams: GramSet, beta_bar: float, theta, dim: int = 0) -> float:
    """Gaussian log-density of dy[:, dim] under N(dx * beta_bar, V(theta))."""
    design = _design_for(cohort, grams)
    _, dY = deltas(cohort)
    return _evaluate(design, dY[:, dim], _theta_array(theta), beta_bar, derivatives=False).loglik


def score_and_fisher(cohort: Cohort, grams: GramSet, beta_bar: float, theta, dim: int = 0,
                     reml: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Score of the log-likelihood w.r.t. theta and the expected information.

    Order of components is (tau2_G, tau2_C, tau2_I, sigma2).
    """
    design = _design_for(cohort, grams)
    _, dY = deltas(cohort)
    st = _evaluate(design, dY[:, dim], _theta_array(theta), None if reml else beta_bar, reml=reml)
    return st.score, st.info


# --- fitting -------------------------------------------------------------

@dataclass
class DimensionFit:
    beta_bar: float
    theta: VarianceComponents
    alpha: np.ndarray  # (3, N): rows G, C, I
    beta_pop: float
    loglik: float
    loglik_trace: list[float]
    iterations: int
    converged: bool
    score: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "beta_bar": self.beta_bar,
            "theta": self.theta.as_array().tolist(),
            "alpha": self.alpha.tolist(),
            "beta_pop": self.beta_pop,
            "loglik": self.loglik,
            "loglik_trace": list(self.loglik_trace),
            "iterations": self.iterations,
            "converged": self.converged,
            "score": list(self.score),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DimensionFit":
        return cls(float(d["beta_bar"]), VarianceComponents.from_array(d["theta"]),
                   np.array(d["alpha"], dtype=float), float(d["beta_pop"]), float(d["loglik"]),
                   [float(v) for v in d["loglik_trace"]], int(d["iterations"]), bool(d["converged"]),
                   [float(v) for v in d.get("score", [])])


def _ols(dx: np.ndarray, y: np.ndarray) -> float:
    return float(dx @ y) / float(dx @ dx)


def _projected(score: np.ndarray, theta: np.ndarray, lower: np.ndarray) -> np.ndarray:
    free = (theta > lower) | (score > 0)
    return np.where(free, score, 0.0)


def _ascent_direction(state: _State, lower: np.ndarray) -> np.ndarray:
    free = (state.theta > lower) | (state.score > 0)
    delta = np.zeros(4)
    if not free.any():
        return delta
    Iff = state.info[np.ix_(free, free)]
    try:
        delta[free] = np.linalg.solve(Iff, state.score[free])
    except np.linalg.LinAlgError:
        delta[free] = np.linalg.lstsq(Iff, state.score[free], rcond=None)[0]
    return delta


def fit_dimension(design: _Design, y: np.ndarray, opts: FitOptions) -> DimensionFit:
    """Fit (beta_bar, theta) for one phenotype dimension."""
    dx = design.dx
    if not np.any(dx != 0):
        raise DegenerateDesign("DegenerateDesign: every observation has dx = 0")
    beta_pop = _ols(dx, y)
    s2 = float(np.var(y - dx * beta_pop))
    vy = float(np.var(y))
    floor = 1e-8 * (vy if vy > 0 else 1.0)
    if not s2 > 0:
        s2 = max(vy, 1.0)
    lower = np.array([0.0, 0.0, 0.0, floor])
    theta = np.array([s2 / 6.0, s2 / 6.0, s2 / 6.0, max(0.5 * s2, floor)])

    state = _evaluate(design, y, theta, reml=opts.reml)
    trace = [state.loglik]
    converged = False
    it = 0
    tol_score = opts.tol_score * design.n
    while it < opts.max_iter:
        if np.max(np.abs(_projected(state.score, state.theta, lower))) < tol_score:
            converged = True
            break
        it += 1
        accepted = None
        directions = (_ascent_direction(state, lower),
                      _projected(state.score, state.theta, lower) / np.maximum(np.diag(state.info), 1e-300))
        for delta in directions:
            step = 1.0
            for _ in range(opts.max_halvings):
                cand = np.maximum(state.theta + step * delta, lower)
                try:
                    trial = _evaluate(design, y, cand, reml=opts.reml, derivatives=False)
                except SingularV:
                    trial = None
                if trial is not None and trial.loglik >= state.loglik:
                    accepted = cand
                    break
                step *= 0.5
            if accepted is not None:
                break
        if accepted is None:
            # no ascent along either direction: a stationary point of the projected problem
            converged = True
            break
        new = _evaluate(design, y, accepted, reml=opts.reml)
        rel = abs(new.loglik - state.loglik) / max(1.0, abs(state.loglik))
        state = new
        trace.append(state.loglik)
        if rel < opts.tol_rel_ll:
            converged = True
            break
    if not converged and np.max(np.abs(_projected(state.score, state.theta, lower))) < tol_score:
        converged = True

    if any(b < a for a, b in zip(trace, trace[1:])):
        raise RuntimeError("log-likelihood decreased during Fisher scoring")
    if not converged:
        log.warning("Fisher scoring hit max_iter=%d without converging", opts.max_iter)

    # ML estimate of beta_bar is the GLS solution at the final theta
    if opts.reml:
        state = _evaluate(design, y, state.theta, reml=False)
    theta_vc = VarianceComponents.from_array(state.theta)
    u = design.B.T @ state.Vinv_r
    alpha = state.theta[:3, None] * u[None, :]
    return DimensionFit(state.beta, theta_vc, alpha, beta_pop, state.loglik, trace, it, converged,
                        state.score.tolist())


@dataclass
class FittedModel:
    """Everything needed to predict for new subjects.

    ``bank_*`` hold the raw baseline data of the N training subjects, in the
    column order of ``alpha``.
    """

    dims: list[DimensionFit]
    kernel_params: KernelParams
    bank_ids: list[str]
    bank_genotypes: np.ndarray
    bank_clinical: np.ndarray
    bank_features: np.ndarray
    n_observations: int
    dx_range: tuple[float, float]
    options: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def n_pheno(self) -> int:
        return len(self.dims)

    @property
    def converged(self) -> bool:
        return all(d.converged for d in self.dims)

    @property
    def beta_bar(self) -> np.ndarray:
        return np.array([d.beta_bar for d in self.dims])

    @property
    def beta_pop(self) -> np.ndarray:
        return np.array([d.beta_pop for d in self.dims])

    @property
    def thetas(self) -> list[VarianceComponents]:
        return [d.theta for d in self.dims]

    def alpha(self, kernel: str) -> np.ndarray:
        """(M, N) dual coefficients for kernel ``'G'``, ``'C'`` or ``'I'``."""
        row = "GCI".index(kernel)
        return np.array([d.alpha[row] for d in self.dims])

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "dims": [d.to_dict() for d in self.dims],
            "kernel_params": self.kernel_params.to_dict(),
            "bank": {
                "ids": list(self.bank_ids),
                "genotypes": self.bank_genotypes.astype(int).tolist(),
                "clinical": self.bank_clinical.tolist(),
                "features": self.bank_features.tolist(),
            },
            "n_observations": self.n_observations,
            "dx_range": list(self.dx_range),
            "options": self.options,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        if d.get("schema") != SCHEMA:
            raise SchemaError(f"expected schema {SCHEMA!r}, got {d.get('schema')!r}")
        try:
            bank = d["bank"]
            return cls(
                dims=[DimensionFit.from_dict(x) for x in d["dims"]],
                kernel_params=KernelParams.from_dict(d["kernel_params"]),
                bank_ids=list(bank["ids"]),
                bank_genotypes=np.array(bank["genotypes"], dtype=np.int64),
                bank_clinical=np.array(bank["clinical"], dtype=float),
                bank_features=np.array(bank["features"], dtype=float),
                n_observations=int(d["n_observations"]),
                dx_range=tuple(float(v) for v in d["dx_range"]),
                options=dict(d.get("options", {})),
                extras=dict(d.get("extras", {})),
            )
        except KeyError as exc:
            raise SchemaError(f"model document missing field {exc}") from None


def save_model(model: FittedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> FittedModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return FittedModel.from_dict(doc)


def _threads(opts: FitOptions) -> int:
    if opts.threads is not None:
        return max(1, int(opts.threads))
    try:
        return max(1, int(os.environ.get("LONGIPRED_THREADS", "1")))
    except ValueError:
        return 1


def check_design(cohort: Cohort, min_moving: int = 5) -> None:
    dx, _ = deltas(cohort)
    moving = int(np.count_nonzero(dx))
    if moving == 0:
        raise DegenerateDesign("DegenerateDesign: all observations have dx = 0")
    if moving < min_moving:
        raise DegenerateDesign(f"DegenerateDesign: need >= {min_moving} observations with dx != 0, got {moving}")


def fit(cohort: Cohort, grams: GramSet, opts: FitOptions | None = None) -> FittedModel:
    """Fit every phenotype dimension independently.

    A dimension that hits ``max_iter`` is still returned, with
    ``converged=False``.
    """
    opts = opts or FitOptions()
    check_design(cohort)
    design = _design_for(cohort, grams)
    _, dY = deltas(cohort)
    dims = range(cohort.n_pheno)
    workers = min(_threads(opts), cohort.n_pheno)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(lambda m: fit_dimension(design, dY[:, m].copy(), opts), dims))
    else:
        fits = [fit_dimension(design, dY[:, m].copy(), opts) for m in dims]
    dx = design.dx
    return FittedModel(
        dims=fits,
        kernel_params=grams.params,
        bank_ids=list(cohort.ids),
        bank_genotypes=np.array(cohort.genotypes),
        bank_clinical=np.array(cohort.clinical),
        bank_features=np.array(cohort.features),
        n_observations=cohort.n_observations,
        dx_range=(float(dx.min()), float(dx.max())),
        options={"tol_score": opts.tol_score, "tol_rel_ll": opts.tol_rel_ll,
                 "max_iter": opts.max_iter, "reml": opts.reml},
    )
