"""Evaluation: relative error, Dice overlap, top-decile stratification, method comparison."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cohort import Cohort
from .errors import ZeroTruth
from .mixedmodel import FittedModel
from .predictor import PredictionRequest, run_method

METRICS = ("mean_rel_error", "median_rel_error")


def relative_error(pred: float, truth: float) -> float:
    """|pred - truth| / |truth|."""
    if truth == 0:
        raise ZeroTruth("relative error undefined for a zero true value")
    return abs(pred - truth) / abs(truth)


def dice(labels_a: np.ndarray, labels_b: np.ndarray, label: int) -> float:
    """2|A & B| / (|A| + |B|) for the pixels carrying ``label``; 1.0 if both are empty."""
    a = np.asarray(labels_a) == label
    b = np.asarray(labels_b) == label
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def relative_changes(cohort: Cohort, dim: int) -> dict[str, float]:
    """|y_last - y_b| / |y_b| per subject with at least one follow-up."""
    out = {}
    for sid, k in cohort.last_followups().items():
        yb = cohort.subject(sid).baseline_phenotype[dim]
        out[sid] = relative_error(cohort.observations[k].phenotype[dim], yb)
    return out


def top_decile(cohort: Cohort, dim: int) -> list[str]:
    """Ids of the ceil(10%) subjects with the largest relative change at their last follow-up.

    Ties are broken by ascending id.
    """
    change = relative_changes(cohort, dim)
    if not change:
        return []
    ranked = sorted(change, key=lambda sid: (-change[sid], sid))
    return ranked[:math.ceil(0.1 * len(ranked))]


@dataclass
class EvalReport:
    """Per-subject relative errors at the last follow-up and their summaries.

    ``errors[method][dim]`` maps subject id to relative error.
    """

    methods: list[str]
    n_pheno: int
    errors: dict[str, list[dict[str, float]]]
    top_decile: list[list[str]]
    dice: dict[str, dict[str, float]] = field(default_factory=dict)

    def summary(self, method: str, dim: int, stratum: str = "all") -> dict[str, float]:
        errs = self.errors[method][dim]
        ids = self.top_decile[dim] if stratum == "top_decile" else sorted(errs)
        vals = np.array([errs[i] for i in ids])
        if vals.size == 0:
            return {"mean_rel_error": float("nan"), "median_rel_error": float("nan")}
        return {"mean_rel_error": float(vals.mean()), "median_rel_error": float(np.median(vals))}

    def records(self) -> list[dict]:
        """Long-format rows: method, stratum, dim (1-based), metric, value."""
        rows = []
        for method in self.methods:
            for dim in range(self.n_pheno):
                for stratum in ("all", "top_decile"):
                    for metric, value in self.summary(method, dim, stratum).items():
                        rows.append({"method": method, "stratum": stratum, "dim": dim + 1,
                                     "metric": metric, "value": value})
        for method, per_label in self.dice.items():
            for label, value in per_label.items():
                rows.append({"method": method, "stratum": "all", "dim": label, "metric": "dice", "value": value})
        return rows

    def to_dict(self) -> dict:
        return {
            "methods": self.methods,
            "n_pheno": self.n_pheno,
            "top_decile": self.top_decile,
            "errors": self.errors,
            "summary": self.records(),
            "dice": self.dice,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def plotdata_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "stratum", "dim", "metric", "value"])
        for r in self.records():
            w.writerow([r["method"], r["stratum"], r["dim"], r["metric"], repr(float(r["value"]))])
        return buf.getvalue()


def compare_methods(model: FittedModel, cohort_test: Cohort, methods: Iterable[str] = ("full", "pop", "carry"),
                    allow_unconverged: bool = False) -> EvalReport:
    """Predict every held-out subject's last follow-up with each method and score it."""
    methods = list(dict.fromkeys(methods))
    last = cohort_test.last_followups()
    M = cohort_test.n_pheno
    errors: dict[str, list[dict[str, float]]] = {m: [dict() for _ in range(M)] for m in methods}
    for sid in sorted(last):
        obs = cohort_test.observations[last[sid]]
        req = PredictionRequest(cohort_test.subject(sid), [obs.age])
        for method in methods:
            y_hat = run_method(method, model, req, allow_unconverged).rows[0].y_hat
            for d in range(M):
                errors[method][d][sid] = relative_error(float(y_hat[d]), float(obs.phenotype[d]))
    deciles = [top_decile(cohort_test, d) for d in range(M)]
    return EvalReport(methods, M, errors, deciles)


def summarize_replicates(reports: Sequence[EvalReport], stratum: str = "top_decile",
                         metric: str = "mean_rel_error") -> dict[str, list[dict[str, float]]]:
    """Mean and standard deviation of a summary metric across replicate reports."""
    out: dict[str, list[dict[str, float]]] = {}
    first = reports[0]
    for method in first.methods:
        out[method] = []
        for dim in range(first.n_pheno):
            vals = np.array([r.summary(method, dim, stratum)[metric] for r in reports])
            out[method].append({"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0})
    return out
