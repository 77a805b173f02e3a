"""Longitudinal cohort data model and CSV ingestion.

A cohort is a set of subjects, each observed once at baseline (age, genotype,
clinical indicators, baseline image features, baseline phenotype), plus any
number of follow-up observations (age, phenotype).

File layout::

    subjects.csv      id,x_b,g_1..g_S,c_1..c_Q,f_1..f_P,y_1..y_M[,stratum]
    observations.csv  id,x_t,y_1..y_M

Subjects are kept sorted by id and observations by (id, age), so every array
derived from a cohort is reproducible regardless of input row order.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadGenotype,
    CohortError,
    InvalidObservation,
    MissingSubject,
    NonFiniteValue,
    RaggedRow,
)

_BLOCKS = ("g", "c", "f", "y")


@dataclass(frozen=True, eq=False)
class Subject:
    id: str
    baseline_age: float
    genotype: np.ndarray
    clinical: np.ndarray
    features: np.ndarray
    baseline_phenotype: np.ndarray
    stratum: str = ""

    def __post_init__(self):
        for name, dtype in (("genotype", np.int64), ("clinical", float),
                            ("features", float), ("baseline_phenotype", float)):
            arr = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "baseline_age", float(self.baseline_age))


@dataclass(frozen=True, eq=False)
class Observation:
    subject_id: str
    age: float
    phenotype: np.ndarray

    def __post_init__(self):
        arr = np.array(self.phenotype, dtype=float).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "phenotype", arr)
        object.__setattr__(self, "age", float(self.age))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Cohort:
    """Validated, canonically ordered cohort.

    Parameters
    ----------
    subjects, observations
        Any order; both are sorted on construction.

    Raises
    ------
    MissingSubject, BadGenotype, RaggedRow, NonFiniteValue, InvalidObservation
    """

    def __init__(self, subjects: Iterable[Subject], observations: Iterable[Observation] = ()):
        subjects = sorted(subjects, key=lambda s: s.id)
        observations = list(observations)
        if not subjects:
            raise CohortError("cohort has no subjects")
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise CohortError(f"duplicate subject id {dup!r}")

        first = subjects[0]
        dims = (first.genotype.size, first.clinical.size, first.features.size,
                first.baseline_phenotype.size)
        for s in subjects:
            got = (s.genotype.size, s.clinical.size, s.features.size, s.baseline_phenotype.size)
            if got != dims:
                raise RaggedRow(f"subject {s.id!r} has (S,Q,P,M)={got}, expected {dims}")
            _check_subject(s)

        index = {sid: k for k, sid in enumerate(ids)}
        for o in observations:
            if o.subject_id not in index:
                raise MissingSubject(f"observation references unknown subject {o.subject_id!r}")
            if o.phenotype.size != dims[3]:
                raise RaggedRow(f"observation of {o.subject_id!r} has M={o.phenotype.size}, expected {dims[3]}")
            if not math.isfinite(o.age) or not np.all(np.isfinite(o.phenotype)):
                raise NonFiniteValue(f"observation of {o.subject_id!r} has non-finite values")
            if o.age < subjects[index[o.subject_id]].baseline_age:
                raise InvalidObservation(
                    f"observation of {o.subject_id!r} at age {o.age} precedes baseline "
                    f"{subjects[index[o.subject_id]].baseline_age}")
        observations.sort(key=lambda o: (o.subject_id, o.age))

        self.subjects: tuple[Subject, ...] = tuple(subjects)
        self.observations: tuple[Observation, ...] = tuple(observations)
        self.n_loci, self.n_clinical, self.n_features, self.n_pheno = dims
        self._index = index
        self.incidence = _frozen(np.array([index[o.subject_id] for o in observations], dtype=np.int64))

        self.ids = tuple(ids)
        self.baseline_ages = _frozen(np.array([s.baseline_age for s in subjects]))
        self.genotypes = _frozen(np.array([s.genotype for s in subjects], dtype=np.int64).reshape(len(subjects), -1))
        self.clinical = _frozen(np.array([s.clinical for s in subjects], dtype=float).reshape(len(subjects), -1))
        self.features = _frozen(np.array([s.features for s in subjects], dtype=float).reshape(len(subjects), -1))
        self.baseline_phenotypes = _frozen(
            np.array([s.baseline_phenotype for s in subjects], dtype=float).reshape(len(subjects), -1))
        self.ages = _frozen(np.array([o.age for o in observations], dtype=float))
        self.phenotypes = _frozen(
            np.array([o.phenotype for o in observations], dtype=float).reshape(len(observations), dims[3]))

    def __len__(self) -> int:
        return len(self.subjects)

    def __repr__(self) -> str:
        return (f"Cohort(N={len(self.subjects)}, n={len(self.observations)}, S={self.n_loci}, "
                f"Q={self.n_clinical}, P={self.n_features}, M={self.n_pheno})")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    def subject(self, sid: str) -> Subject:
        return self.subjects[self._index[sid]]

    def subject_index(self, sid: str) -> int:
        return self._index[sid]

    def subset(self, ids: Iterable[str]) -> "Cohort":
        """Sub-cohort of the given subjects with their observations."""
        keep = set(ids)
        missing = keep.difference(self._index)
        if missing:
            raise MissingSubject(f"unknown subject ids {sorted(missing)[:5]}")
        return Cohort([s for s in self.subjects if s.id in keep],
                      [o for o in self.observations if o.subject_id in keep])

    def stratum(self, name: str) -> "Cohort":
        """Subjects whose ``stratum`` column equals ``name``."""
        ids = [s.id for s in self.subjects if s.stratum == name]
        if not ids:
            raise CohortError(f"no subjects in stratum {name!r}")
        return self.subset(ids)

    def last_followups(self) -> dict[str, int]:
        """Map subject id -> index of its latest observation (subjects without any are absent)."""
        out: dict[str, int] = {}
        for k, o in enumerate(self.observations):
            out[o.subject_id] = k  # sorted by age within subject
        return out


def _check_subject(s: Subject) -> None:
    if not math.isfinite(s.baseline_age):
        raise NonFiniteValue(f"subject {s.id!r}: non-finite baseline age")
    if s.baseline_age <= 0:
        raise InvalidObservation(f"subject {s.id!r}: baseline age must be > 0, got {s.baseline_age}")
    bad = ~np.isin(s.genotype, (0, 1, 2))
    if bad.any():
        raise BadGenotype(f"subject {s.id!r}: genotype value {s.genotype[bad][0]} not in {{0,1,2}}")
    for name in ("clinical", "features", "baseline_phenotype"):
        if not np.all(np.isfinite(getattr(s, name))):
            raise NonFiniteValue(f"subject {s.id!r}: non-finite {name}")


def deltas(cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    """Age and phenotype change of every observation relative to its subject's baseline.

    Returns
    -------
    dx : (n,) array
    dY : (n, M) array
    """
    inc = cohort.incidence
    dx = cohort.ages - cohort.baseline_ages[inc]
    dY = cohort.phenotypes - cohort.baseline_phenotypes[inc]
    return dx, dY.reshape(cohort.n_observations, cohort.n_pheno)


def incidence_matrix(cohort: Cohort) -> np.ndarray:
    """Dense (n, N) observation-to-subject 0/1 matrix."""
    Z = np.zeros((cohort.n_observations, cohort.n_subjects))
    Z[np.arange(cohort.n_observations), cohort.incidence] = 1.0
    return Z


# --- CSV I/O ---------------------------------------------------------------

_COL = re.compile(r"^([gcfy])_(\d+)$")


def _fmt(v: float) -> str:
    return repr(float(v))


def _parse_float(text: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise NonFiniteValue(f"{where}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise NonFiniteValue(f"{where}: non-finite value {text!r}")
    return v


def _parse_genotype(text: str, where: str) -> int:
    v = _parse_float(text, where)
    if v not in (0.0, 1.0, 2.0):
        raise BadGenotype(f"{where}: genotype value {text!r} not in {{0,1,2}}")
    return int(v)


def _layout(header: Sequence[str], path: str) -> tuple[dict[str, int], bool]:
    """Validate the subjects header; return per-block counts and whether a stratum column exists."""
    if list(header[:2]) != ["id", "x_b"]:
        raise RaggedRow(f"{path}:1: header must start with 'id,x_b'")
    cols = list(header[2:])
    has_stratum = bool(cols) and cols[-1] == "stratum"
    if has_stratum:
        cols = cols[:-1]
    counts = {b: 0 for b in _BLOCKS}
    order = 0
    for name in cols:
        m = _COL.match(name)
        if not m:
            raise RaggedRow(f"{path}:1: unexpected column {name!r}")
        block, k = m.group(1), int(m.group(2))
        pos = _BLOCKS.index(block)
        if pos < order or k != counts[block] + 1:
            raise RaggedRow(f"{path}:1: column {name!r} out of order")
        order = pos
        counts[block] = k
    return counts, has_stratum


def _read_rows(path: Path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh) if row]


def load_subjects(path: str | Path) -> list[Subject]:
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise RaggedRow(f"{path}: empty file")
    counts, has_stratum = _layout(rows[0], str(path))
    S, Q, P, M = (counts[b] for b in _BLOCKS)
    width = 2 + S + Q + P + M + has_stratum
    subjects = []
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{path}:{lineno}"
        if len(row) != width:
            raise RaggedRow(f"{where}: expected {width} fields, got {len(row)}")
        vals = row[2:2 + S + Q + P + M]
        g = [_parse_genotype(t, where) for t in vals[:S]]
        rest = [_parse_float(t, where) for t in vals[S:]]
        subjects.append(Subject(
            id=row[0],
            baseline_age=_parse_float(row[1], where),
            genotype=np.array(g, dtype=np.int64),
            clinical=np.array(rest[:Q]),
            features=np.array(rest[Q:Q + P]),
            baseline_phenotype=np.array(rest[Q + P:]),
            stratum=row[-1] if has_stratum else "",
        ))
    return subjects


def load_observations(path: str | Path, n_pheno: int | None = None) -> list[Observation]:
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise RaggedRow(f"{path}: empty file")
    header = rows[0]
    M = len(header) - 2
    expected = ["id", "x_t"] + [f"y_{k}" for k in range(1, M + 1)]
    if header != expected or (n_pheno is not None and M != n_pheno):
        raise RaggedRow(f"{path}:1: header must be 'id,x_t,y_1..y_M' matching the subjects file")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{path}:{lineno}"
        if len(row) != M + 2:
            raise RaggedRow(f"{where}: expected {M + 2} fields, got {len(row)}")
        out.append(Observation(row[0], _parse_float(row[1], where),
                               np.array([_parse_float(t, where) for t in row[2:]])))
    return out


def load_cohort(subjects_path: str | Path, observations_path: str | Path | None = None) -> Cohort:
    """Read and validate a cohort from its two CSV files.

    ``observations_path`` may be omitted for baseline-only (prediction) cohorts.
    """
    subjects = load_subjects(subjects_path)
    if not subjects:
        raise CohortError(f"{subjects_path}: no subject rows")
    obs = []
    if observations_path is not None:
        obs = load_observations(observations_path, subjects[0].baseline_phenotype.size)
    return Cohort(subjects, obs)


def subjects_csv(cohort: Cohort) -> str:
    S, Q, P, M = cohort.n_loci, cohort.n_clinical, cohort.n_features, cohort.n_pheno
    header = (["id", "x_b"] + [f"g_{k}" for k in range(1, S + 1)] + [f"c_{k}" for k in range(1, Q + 1)]
              + [f"f_{k}" for k in range(1, P + 1)] + [f"y_{k}" for k in range(1, M + 1)])
    with_stratum = any(s.stratum for s in cohort.subjects)
    if with_stratum:
        header.append("stratum")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for s in cohort.subjects:
        row = [s.id, _fmt(s.baseline_age)] + [str(int(v)) for v in s.genotype]
        row += [_fmt(v) for v in s.clinical] + [_fmt(v) for v in s.features]
        row += [_fmt(v) for v in s.baseline_phenotype]
        if with_stratum:
            row.append(s.stratum)
        w.writerow(row)
    return buf.getvalue()


def observations_csv(cohort: Cohort) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "x_t"] + [f"y_{k}" for k in range(1, cohort.n_pheno + 1)])
    for o in cohort.observations:
        w.writerow([o.subject_id, _fmt(o.age)] + [_fmt(v) for v in o.phenotype])
    return buf.getvalue()


def write_cohort(cohort: Cohort, subjects_path: str | Path, observations_path: str | Path) -> None:
    """Write canonical CSV files (sorted rows, shortest round-trip float repr)."""
    Path(subjects_path).write_text(subjects_csv(cohort), encoding="utf-8")
    Path(observations_path).write_text(observations_csv(cohort), encoding="utf-8")


def load_cohort_dir(directory: str | Path) -> Cohort:
    """Load ``subjects.csv`` (+ ``observations.csv`` if present) from a directory."""
    d = Path(directory)
    obs = d / "observations.csv"
    return load_cohort(d / "subjects.csv", obs if obs.exists() else None)


def write_cohort_dir(cohort: Cohort, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, d / "subjects.csv", d / "observations.csv")
