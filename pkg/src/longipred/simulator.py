"""Synthetic cohorts drawn from the generative model, with ground truth.

Scalar mode draws phenotypes directly. ``anatomy2d`` mode draws latent
coefficients of a fixed set of smooth deformation modes on a synthetic
atlas; phenotypes and baseline image features are then the per-label PCA
coefficients of the resulting displacement fields.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import deformation as dfm
from .cohort import Cohort, Observation, Subject
from .errors import InvalidScenario
from .kernels import KERNEL_NAMES, GramSet, gram_set, kernel_params_with_weights

log = logging.getLogger(__name__)

# atlas labels
BACKGROUND, VENTRICLE, HIPPOCAMPUS, CORTEX = 1, 2, 3, 4
LABEL_NAMES = {BACKGROUND: "background", VENTRICLE: "ventricle", HIPPOCAMPUS: "hippocampus", CORTEX: "cortex"}
N_MODES = 4


@dataclass
class Stratum:
    name: str
    fraction: float
    beta_shift: list[float] = field(default_factory=list)


@dataclass
class SimScenario:
    """Generative-model parameters.

    ``theta`` is one ``[tau2_G, tau2_C, tau2_I, sigma2]`` per phenotype
    dimension (latent mode in anatomy mode), or a single one used for all.
    ``schedule`` lists the follow-up times in years after baseline.
    """

    n_subjects: int = 400
    n_test: int = 100
    n_loci: int = 30
    n_clinical: int = 5
    n_features: int = 5
    n_pheno: int = 1
    beta_bar: list[float] = field(default_factory=lambda: [2.0])
    theta: list = field(default_factory=lambda: [[1.0, 1.0, 1.0, 1.0]])
    maf: list[float] | None = None
    schedule: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0])
    baseline_age: list[float] = field(default_factory=lambda: [60.0, 80.0])
    baseline_mean: list[float] = field(default_factory=lambda: [100.0])
    baseline_sd: list[float] = field(default_factory=lambda: [10.0])
    clinical_weights: list[float] | None = None
    strata: list[Stratum] = field(default_factory=list)
    mode: str = "scalar"
    grid: int = 160
    baseline_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.strata = [s if isinstance(s, Stratum) else Stratum(**s) for s in self.strata]
        self.validate()

    @property
    def latent_dim(self) -> int:
        return N_MODES if self.mode == "anatomy2d" else self.n_pheno

    def thetas(self) -> np.ndarray:
        th = np.asarray(self.theta, dtype=float).reshape(-1, 4)
        if th.shape[0] == 1:
            th = np.repeat(th, self.latent_dim, axis=0)
        return th

    def _vec(self, values, n: int, name: str) -> np.ndarray:
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.size == 1:
            v = np.repeat(v, n)
        if v.size != n:
            raise InvalidScenario(f"{name} must have 1 or {n} entries, got {v.size}")
        return v

    def validate(self) -> None:
        if self.mode not in ("scalar", "anatomy2d"):
            raise InvalidScenario(f"mode must be 'scalar' or 'anatomy2d', got {self.mode!r}")
        counts = dict(n_subjects=self.n_subjects, n_loci=self.n_loci, n_clinical=self.n_clinical,
                      n_features=self.n_features, n_pheno=self.n_pheno)
        for k, v in counts.items():
            if int(v) < 1:
                raise InvalidScenario(f"{k} must be >= 1, got {v}")
        if not 0 <= self.n_test < self.n_subjects - 1:
            raise InvalidScenario("n_test must leave at least 2 training subjects")
        th = np.asarray(self.theta, dtype=float).reshape(-1, 4)
        if th.shape[0] not in (1, self.latent_dim):
            raise InvalidScenario(f"theta needs 1 or {self.latent_dim} rows")
        if np.any(th[:, :3] < 0) or np.any(th[:, 3] <= 0) or not np.all(np.isfinite(th)):
            raise InvalidScenario("theta needs tau2 >= 0 and sigma2 > 0")
        self._vec(self.beta_bar, self.latent_dim, "beta_bar")
        if self.mode == "scalar":
            self._vec(self.baseline_mean, self.n_pheno, "baseline_mean")
            self._vec(self.baseline_sd, self.n_pheno, "baseline_sd")
        if self.maf is not None:
            maf = self._vec(self.maf, self.n_loci, "maf")
            if np.any(maf <= 0) or np.any(maf > 0.5):
                raise InvalidScenario("minor-allele frequencies must lie in (0, 0.5]")
        if self.clinical_weights is not None:
            w = self._vec(self.clinical_weights, self.n_clinical, "clinical_weights")
            if np.any(w < 0):
                raise InvalidScenario("clinical weights must be >= 0")
        if not self.schedule or any(float(d) < 0 for d in self.schedule):
            raise InvalidScenario("schedule must list nonnegative follow-up times")
        lo, hi = self.baseline_age
        if not 0 < lo <= hi:
            raise InvalidScenario("baseline_age must be [lo, hi] with 0 < lo <= hi")
        if self.strata:
            if abs(sum(s.fraction for s in self.strata) - 1.0) > 1e-9:
                raise InvalidScenario("stratum fractions must sum to 1")
            for s in self.strata:
                if s.beta_shift:
                    self._vec(s.beta_shift, self.latent_dim, f"beta_shift of {s.name}")
        if self.mode == "anatomy2d" and self.grid < 32:
            raise InvalidScenario("anatomy grid must be at least 32 pixels")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidScenario(f"unknown scenario fields {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidScenario(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "SimScenario":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


PRESETS: dict[str, dict] = {
    # tau2 components each >= sigma2: subject-specific change dominates noise
    "strong_h": dict(n_subjects=400, n_test=100, beta_bar=[40.0], theta=[[1.0, 1.0, 1.0, 1.0]]),
    "null_h": dict(n_subjects=400, n_test=100, beta_bar=[40.0], theta=[[0.0, 0.0, 0.0, 1.0]]),
    "anatomy": dict(mode="anatomy2d", n_subjects=60, n_test=10, n_loci=20, n_clinical=3,
                    beta_bar=[0.5, 0.0, 0.0, 0.0], theta=[[0.04, 0.04, 0.04, 0.01]],
                    schedule=[1.0, 2.0]),
    "healthy_disease": dict(mode="anatomy2d", n_subjects=100, n_test=0, n_loci=20, n_clinical=3,
                            beta_bar=[0.3, 0.0, 0.0, 0.0], theta=[[0.02, 0.02, 0.02, 0.005]],
                            schedule=[1.0, 2.0, 3.0],
                            strata=[dict(name="healthy", fraction=0.8, beta_shift=[0.0, 0.0, 0.0, 0.0]),
                                    dict(name="disease", fraction=0.2, beta_shift=[0.6, 0.0, 0.0, 0.0])]),
}


def preset(name: str, **overrides) -> SimScenario:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise InvalidScenario(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return SimScenario(**base)


@dataclass(eq=False)
class SimTruth:
    """Ground truth behind a simulated cohort.

    ``h`` has shape (3, N, D) for kernels G, C, I over the N subjects and the D
    latent dimensions (phenotypes in scalar mode, deformation modes in
    anatomy mode). ``dx``/``dlatent``/``noise`` are per observation in cohort order.
    """

    scenario: SimScenario
    grams: GramSet
    h: np.ndarray
    beta_subject: np.ndarray  # (N, D) population slope plus stratum shift
    dx: np.ndarray
    dlatent: np.ndarray  # (n, D) latent change: dx * (beta + sum h) + noise
    noise: np.ndarray
    train_ids: list[str]
    test_ids: list[str]
    atlas: dfm.Atlas | None = None
    modes: np.ndarray | None = None
    deformation: dfm.DeformationModel | None = None
    latent_baseline: np.ndarray | None = None  # (N, K)

    def latent_followup(self, obs_index: int, cohort: Cohort) -> np.ndarray:
        return self.latent_baseline[cohort.incidence[obs_index]] + self.dlatent[obs_index]

    def field(self, z: np.ndarray) -> np.ndarray:
        return latent_field(z, self.modes)

    def to_dict(self, cohort: Cohort) -> dict:
        out = {
            "scenario": self.scenario.to_dict(),
            "kernel_params": self.grams.params.to_dict(),
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "subjects": {
                sid: {"h_G": self.h[0, i].tolist(), "h_C": self.h[1, i].tolist(), "h_I": self.h[2, i].tolist(),
                      "beta": self.beta_subject[i].tolist()}
                for i, sid in enumerate(cohort.ids)
            },
            "observations": [
                {"id": o.subject_id, "x_t": o.age, "noise": self.noise[k].tolist(),
                 "dlatent": self.dlatent[k].tolist()}
                for k, o in enumerate(cohort.observations)
            ],
        }
        if self.latent_baseline is not None:
            out["latent_baseline"] = {sid: self.latent_baseline[i].tolist() for i, sid in enumerate(cohort.ids)}
        return out


# --- anatomy ------------------------------------------------------------------

def make_anatomy_atlas(scenario: SimScenario) -> tuple[dfm.Atlas, np.ndarray]:
    """Concentric synthetic anatomy and its smooth deformation modes.

    Returns the atlas and an array of ``N_MODES`` fields, each scaled to a
    maximum displacement of one pixel per unit coefficient. Mode 0 expands the
    central ("ventricle") region, modes 1-2 are smooth translations and mode 3
    an anisotropic stretch.
    """
    n = int(scenario.grid)
    grid = dfm.Grid2D(n, n)
    x, y = grid.coords()
    cx = cy = (n - 1) / 2.0
    dx, dy = x - cx, y - cy
    r = np.sqrt((dx / 1.1) ** 2 + (dy / 0.9) ** 2)
    labels = np.full((n, n), BACKGROUND, dtype=np.int64)
    labels[r < 0.46 * n] = CORTEX
    labels[r < 0.31 * n] = HIPPOCAMPUS
    labels[r < 0.17 * n] = VENTRICLE
    tone = {BACKGROUND: 0.05, VENTRICLE: 0.15, HIPPOCAMPUS: 0.55, CORTEX: 0.85}
    intensity = np.zeros((n, n))
    for lab, val in tone.items():
        intensity[labels == lab] = val
    intensity = np.clip(gaussian_filter(intensity, sigma=1.0, mode="nearest"), 0.0, 1.0)
    atlas = dfm.Atlas(intensity, labels)

    s = 0.2 * n
    g = np.exp(-(dx ** 2 + dy ** 2) / (2 * s ** 2))
    wide = np.exp(-(dx ** 2 + dy ** 2) / (2 * (0.3 * n) ** 2))
    modes = np.zeros((N_MODES, n, n, 2))
    modes[0, ..., 0] = -dx * g  # pull-back toward the centre enlarges central structures
    modes[0, ..., 1] = -dy * g
    modes[1, ..., 0] = wide
    modes[2, ..., 1] = wide
    modes[3, ..., 0] = dx * g
    modes[3, ..., 1] = -dy * g
    for k in range(N_MODES):
        modes[k] /= np.max(np.hypot(modes[k, ..., 0], modes[k, ..., 1]))
    return atlas, modes


def latent_field(z: np.ndarray, modes: np.ndarray) -> np.ndarray:
    return np.tensordot(np.asarray(z, dtype=float), modes, axes=(0, 0))


def label_counts(labels: np.ndarray, n_labels: int = 4) -> np.ndarray:
    return np.bincount(labels.reshape(-1), minlength=n_labels + 1)[1:n_labels + 1]


# --- sampling -------------------------------------------------------------------

def draw_health_effects(grams: GramSet, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw of (h_G, h_C, h_I) for every subject; shape (3, N, D) for theta of shape (D, 4)."""
    theta = np.atleast_2d(theta)
    N = grams.K_G.shape[0]
    chol = {name: np.linalg.cholesky(grams[name] + 1e-12 * np.eye(N)) for name in KERNEL_NAMES}
    h = np.zeros((3, N, theta.shape[0]))
    for d in range(theta.shape[0]):
        for k, name in enumerate(KERNEL_NAMES):
            z = rng.standard_normal(N)
            h[k, :, d] = np.sqrt(theta[d, k]) * (chol[name] @ z)
    return h


def _assign_strata(scenario: SimScenario, N: int, rng: np.random.Generator) -> list[str]:
    if not scenario.strata:
        return [""] * N
    counts = [int(round(s.fraction * N)) for s in scenario.strata]
    counts[-1] = N - sum(counts[:-1])
    names = [s.name for s, c in zip(scenario.strata, counts) for _ in range(c)]
    return [names[i] for i in rng.permutation(N)]


def simulate(scenario: SimScenario) -> tuple[Cohort, SimTruth]:
    """Draw a cohort and its ground truth; fully determined by ``scenario.seed``."""
    sc = scenario
    sc.validate()
    rng = np.random.default_rng(sc.seed)
    N, S, Q = sc.n_subjects, sc.n_loci, sc.n_clinical
    D = sc.latent_dim
    ids = [f"s{i:04d}" for i in range(N)]
    train_ids, test_ids = ids[:N - sc.n_test], ids[N - sc.n_test:]

    maf = sc._vec(sc.maf, S, "maf") if sc.maf is not None else rng.uniform(0.05, 0.5, S)
    G = rng.binomial(2, maf, size=(N, S))
    C = rng.standard_normal((N, Q))
    lo, hi = sc.baseline_age
    xb = rng.uniform(lo, hi, N)
    strata = _assign_strata(sc, N, rng)

    atlas = modes = dmodel = zb = None
    if sc.mode == "scalar":
        F = rng.standard_normal((N, sc.n_features))
        mean = sc._vec(sc.baseline_mean, sc.n_pheno, "baseline_mean")
        sd = sc._vec(sc.baseline_sd, sc.n_pheno, "baseline_sd")
        Yb = mean + sd * rng.standard_normal((N, sc.n_pheno))
    else:
        atlas, modes = make_anatomy_atlas(sc)
        zb = sc.baseline_scale * rng.standard_normal((N, N_MODES))
        fields_b = [latent_field(z, modes) for z in zb]
        dmodel = dfm.fit_pca(fields_b[:N - sc.n_test], atlas)
        Yb = np.array([dfm.encode(f, dmodel) for f in fields_b])
        F = Yb

    base = [Subject(ids[i], xb[i], G[i], C[i], F[i], Yb[i], strata[i]) for i in range(N)]
    weights = sc._vec(sc.clinical_weights, Q, "clinical_weights") if sc.clinical_weights is not None else np.ones(Q)
    params = kernel_params_with_weights(Cohort(base), weights)
    grams = gram_set(Cohort(base), params)

    theta = sc.thetas()
    h = draw_health_effects(grams, theta, rng)
    beta = np.tile(sc._vec(sc.beta_bar, D, "beta_bar"), (N, 1))
    shifts = {s.name: sc._vec(s.beta_shift, D, "beta_shift") for s in sc.strata if s.beta_shift}
    for i, name in enumerate(strata):
        if name in shifts:
            beta[i] += shifts[name]
    slope = beta + h.sum(axis=0)

    observations, dxs, dlat, noise = [], [], [], []
    for i in range(N):
        for t in sorted(float(v) for v in sc.schedule):
            eps = np.sqrt(theta[:, 3]) * rng.standard_normal(D)
            change = t * slope[i] + eps
            if sc.mode == "scalar":
                y = Yb[i] + change
            else:
                y = dfm.encode(latent_field(zb[i] + change, modes), dmodel)
            observations.append(Observation(ids[i], xb[i] + t, y))
            dxs.append(float(t))
            dlat.append(change)
            noise.append(eps)
    cohort = Cohort(base, observations)
    # Cohort sorts observations by (id, age); generation order already matches
    truth = SimTruth(sc, grams, h, beta, np.array(dxs), np.array(dlat), np.array(noise),
                     train_ids, test_ids, atlas, modes, dmodel, zb)
    return cohort, truth


def split(cohort: Cohort, truth: SimTruth) -> tuple[Cohort, Cohort | None]:
    train = cohort.subset(truth.train_ids)
    test = cohort.subset(truth.test_ids) if truth.test_ids else None
    return train, test


def write_simulation(cohort: Cohort, truth: SimTruth, out: str | Path) -> list[Path]:
    """Write cohort CSVs (full, train/, test/), truth.json and, in anatomy mode, images and fields.

    Returns the written paths in a fixed order.
    """
    from .cohort import write_cohort_dir

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    write_cohort_dir(cohort, out)
    written += [out / "subjects.csv", out / "observations.csv"]
    train, test = split(cohort, truth)
    write_cohort_dir(train, out / "train")
    written += [out / "train" / "subjects.csv", out / "train" / "observations.csv"]
    if test is not None:
        write_cohort_dir(test, out / "test")
        written += [out / "test" / "subjects.csv", out / "test" / "observations.csv"]
    doc = truth.to_dict(cohort)
    if truth.atlas is not None:
        doc["deformation"] = truth.deformation.to_dict()
        doc["modes"] = truth.modes.tolist()
        anat = out / "anatomy"
        anat.mkdir(exist_ok=True)
        dfm.write_pgm(anat / "atlas.pgm", truth.atlas.intensity)
        dfm.write_pgm(anat / "atlas_labels.pgm", truth.atlas.labels, maxval=255)
        written += [anat / "atlas.pgm", anat / "atlas_labels.pgm"]
        for sid in truth.test_ids:
            i = cohort.subject_index(sid)
            u_b = truth.field(truth.latent_baseline[i])
            dfm.write_field_csv(anat / f"{sid}_baseline_field.csv", u_b)
            dfm.write_pgm(anat / f"{sid}_baseline.pgm", dfm.warp_image(truth.atlas.intensity, u_b))
            written += [anat / f"{sid}_baseline_field.csv", anat / f"{sid}_baseline.pgm"]
            for k, o in enumerate(cohort.observations):
                if o.subject_id == sid:
                    u_t = truth.field(truth.latent_followup(k, cohort))
                    tag = f"{sid}_t{o.age - cohort.subject(sid).baseline_age:.3f}"
                    dfm.write_field_csv(anat / f"{tag}_field.csv", u_t)
                    written.append(anat / f"{tag}_field.csv")
    (out / "truth.json").write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    written.append(out / "truth.json")
    return written
