"""Follow-up prediction for new subjects from a single baseline.

    y_t = y_b + dx_t * (beta_bar + sum_j alpha_G[j] K_G(i, j)
                                 + alpha_C[j] K_C(i, j) + alpha_I[j] K_I(i, j))

Each prediction records its four additive terms (population, genetic,
clinical, imaging) so ``y_hat == y_b + term_pop + term_G + term_C + term_I``
holds bit for bit.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cohort import Subject
from .errors import DimensionMismatch, InvalidRequest, UnconvergedModel
from .kernels import cross_grams
from .mixedmodel import FittedModel


@dataclass(frozen=True, eq=False)
class PredictionRequest:
    subject: Subject
    target_ages: Sequence[float]


@dataclass(eq=False)
class PredictionRow:
    age: float
    dx: float
    y_hat: np.ndarray
    term_pop: np.ndarray
    term_G: np.ndarray
    term_C: np.ndarray
    term_I: np.ndarray


@dataclass(eq=False)
class Prediction:
    subject_id: str
    baseline: np.ndarray
    rows: list[PredictionRow]
    method: str = "full"
    warnings: list[str] = field(default_factory=list)


def _assemble(subject: Subject, ages, beta: np.ndarray, h: dict[str, np.ndarray],
              method: str, dx_range: tuple[float, float] | None) -> Prediction:
    yb = subject.baseline_phenotype
    rows = []
    warnings = []
    for age in ages:
        age = float(age)
        if not np.isfinite(age) or age < subject.baseline_age:
            raise InvalidRequest(f"target age {age} precedes baseline age {subject.baseline_age} of {subject.id!r}")
        dx = age - subject.baseline_age
        slack = 1e-9 * max(1.0, abs(dx))  # ages are stored as floats, so exact bounds wobble
        if dx_range is not None and not (dx_range[0] - slack <= dx <= dx_range[1] + slack):
            warnings.append(f"dx={dx!r} outside training range [{dx_range[0]!r}, {dx_range[1]!r}]")
        t_pop = dx * beta
        t_G = dx * h["G"]
        t_C = dx * h["C"]
        t_I = dx * h["I"]
        y_hat = yb + t_pop + t_G + t_C + t_I
        rows.append(PredictionRow(age, dx, y_hat, t_pop, t_G, t_C, t_I))
    return Prediction(subject.id, yb.copy(), rows, method, warnings)


def _check(model: FittedModel, subject: Subject, allow_unconverged: bool) -> None:
    if not model.converged and not allow_unconverged:
        raise UnconvergedModel("model did not converge; pass allow_unconverged=True to predict anyway")
    expect = (model.bank_genotypes.shape[1], model.bank_clinical.shape[1],
              model.bank_features.shape[1], model.n_pheno)
    got = (subject.genotype.size, subject.clinical.size, subject.features.size, subject.baseline_phenotype.size)
    if got != expect:
        raise DimensionMismatch(f"subject {subject.id!r} has (S,Q,P,M)={got}, model expects {expect}")


def kernel_effects(model: FittedModel, subject: Subject) -> dict[str, np.ndarray]:
    """Per-kernel subject deviation h_D(z_i) = sum_j alpha_D[j] K_D(z_i, z_j), one value per dimension."""
    K = cross_grams(model.kernel_params, subject.genotype[None, :], subject.clinical[None, :],
                    subject.features[None, :], model.bank_genotypes, model.bank_clinical, model.bank_features)
    return {name: model.alpha(name) @ K[name][0] for name in "GCI"}


def predict(model: FittedModel, req: PredictionRequest, allow_unconverged: bool = False) -> Prediction:
    _check(model, req.subject, allow_unconverged)
    h = kernel_effects(model, req.subject)
    return _assemble(req.subject, req.target_ages, model.beta_bar, h, "full", model.dx_range)


def predict_population_only(model: FittedModel, req: PredictionRequest,
                            allow_unconverged: bool = False) -> Prediction:
    """Population trend only (no subject-specific deviation); slope fitted with tau2 pinned at 0."""
    _check(model, req.subject, allow_unconverged)
    zeros = np.zeros(model.n_pheno)
    h = {"G": zeros, "C": zeros, "I": zeros}
    return _assemble(req.subject, req.target_ages, model.beta_pop, h, "pop", model.dx_range)


def predict_baseline_carry(req: PredictionRequest) -> Prediction:
    """Assume no change: every prediction equals the baseline phenotype."""
    zeros = np.zeros(req.subject.baseline_phenotype.size)
    h = {"G": zeros, "C": zeros, "I": zeros}
    return _assemble(req.subject, req.target_ages, zeros, h, "carry", None)


METHODS = {
    "full": predict,
    "pop": predict_population_only,
    "carry": lambda model, req, allow_unconverged=False: predict_baseline_carry(req),
}


def run_method(method: str, model: FittedModel, req: PredictionRequest, allow_unconverged: bool = False) -> Prediction:
    try:
        fn = METHODS[method]
    except KeyError:
        raise InvalidRequest(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(model, req, allow_unconverged=allow_unconverged)


def predictions_csv(predictions: Sequence[Prediction]) -> str:
    """Long-format table ``id,x_t,dim,y_hat,term_pop,term_G,term_C,term_I`` (dims are 1-based)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "x_t", "dim", "y_hat", "term_pop", "term_G", "term_C", "term_I"])
    for p in predictions:
        for row in p.rows:
            for m in range(row.y_hat.size):
                w.writerow([p.subject_id, repr(row.age), m + 1, repr(float(row.y_hat[m])),
                            repr(float(row.term_pop[m])), repr(float(row.term_G[m])),
                            repr(float(row.term_C[m])), repr(float(row.term_I[m]))])
    return buf.getvalue()
