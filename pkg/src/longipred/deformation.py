"""2D displacement-field phenotypes: per-label PCA, warping, composition, inversion.

Conventions
-----------
Images and label maps are ``(H, W)`` arrays indexed ``[y, x]``. A displacement
field is an ``(H, W, 2)`` float array whose last axis is ``(ux, uy)``. A field
``u`` warps an image by pull-back, ``I(v) = A(v + u(v))``, so the field that
maps the atlas to a subject is also the one used to resample the atlas into
that subject's frame.

Sampling clamps coordinates to the grid. Intensities and fields use bilinear
interpolation written as nested linear interpolations (``a + t * (b - a)``),
which keeps constant images exactly constant; label maps use nearest neighbour.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NotInvertible, TooFewSamples

log = logging.getLogger(__name__)

EXPLAINED_VARIANCE = 0.95


@dataclass(frozen=True)
class Grid2D:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates ``(x, y)``, each of shape ``(H, W)``."""
        y, x = np.mgrid[0:self.height, 0:self.width].astype(float)
        return x, y


@dataclass(frozen=True, eq=False)
class Atlas:
    intensity: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.intensity.shape != self.labels.shape:
            raise DimensionMismatch("atlas intensity and labels differ in shape")
        present = set(np.unique(self.labels).tolist())
        if not present or min(present) < 1 or present != set(range(1, max(present) + 1)):
            raise ValueError(f"labels must cover 1..L with every label nonempty, got {sorted(present)}")

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.labels.shape[1], self.labels.shape[0])

    @property
    def n_labels(self) -> int:
        return int(self.labels.max())


def zero_field(shape: tuple[int, int]) -> np.ndarray:
    return np.zeros(shape + (2,))


def _check_field(u: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim != 3 or u.shape[2] != 2:
        raise DimensionMismatch(f"displacement field must be (H, W, 2), got {u.shape}")
    if shape is not None and u.shape[:2] != tuple(shape):
        raise DimensionMismatch(f"field shape {u.shape[:2]} does not match grid {shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("displacement field has non-finite entries")
    return u


# --- sampling --------------------------------------------------------------

def _lerp(a, b, t):
    return a + t * (b - a)


def sample_bilinear(values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``values`` (H, W[, ...]) at coordinates clamped to the grid."""
    H, W = values.shape[:2]
    x = np.clip(x, 0.0, W - 1.0)
    y = np.clip(y, 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    if values.ndim > 2:
        extra = (slice(None),) * 2 + (None,) * (values.ndim - 2)
        fx = fx[extra]
        fy = fy[extra]
    top = _lerp(values[y0, x0], values[y0, x1], fx)
    bottom = _lerp(values[y1, x0], values[y1, x1], fx)
    return _lerp(top, bottom, fy)


def sample_nearest(values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    H, W = values.shape[:2]
    xi = np.clip(np.floor(x + 0.5), 0, W - 1).astype(np.intp)
    yi = np.clip(np.floor(y + 0.5), 0, H - 1).astype(np.intp)
    return values[yi, xi]


def _targets(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    H, W = u.shape[:2]
    y, x = np.mgrid[0:H, 0:W].astype(float)
    return x + u[..., 0], y + u[..., 1]


def warp_image(image: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Resample ``image`` at ``v + u(v)`` with bilinear interpolation."""
    image = np.asarray(image, dtype=float)
    u = _check_field(u, image.shape)
    return sample_bilinear(image, *_targets(u))


def warp_labels(labels: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Nearest-neighbour resampling of a label map at ``v + u(v)``."""
    labels = np.asarray(labels)
    u = _check_field(u, labels.shape)
    return sample_nearest(labels, *_targets(u))


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Field of the map v -> T_outer(T_inner(v)), where T(v) = v + u(v)."""
    inner = _check_field(inner)
    outer = _check_field(outer, inner.shape[:2])
    return inner + sample_bilinear(outer, *_targets(inner))


def inversion_residual(u: np.ndarray, u_inv: np.ndarray) -> float:
    """max_v |u_inv(v) + u(v + u_inv(v))| in pixels."""
    r = compose(u, u_inv)
    return float(np.max(np.hypot(r[..., 0], r[..., 1])))


def invert(u: np.ndarray, max_iter: int = 30, tol: float = 1e-4, fail_above: float = 0.5) -> np.ndarray:
    """Inverse field by the fixed-point iteration u_inv(v) <- -u(v + u_inv(v)).

    Raises NotInvertible when the residual is still above ``fail_above``
    pixels after ``max_iter`` iterations.
    """
    u = _check_field(u)
    v = -u
    res = inversion_residual(u, v)
    for _ in range(max_iter):
        if res < tol:
            break
        v = -sample_bilinear(u, *_targets(v))
        res = inversion_residual(u, v)
    if res > fail_above:
        raise NotInvertible(f"fixed-point inversion stalled at residual {res:.3g} px")
    if res >= tol:
        log.debug("inversion stopped at residual %.3g px", res)
    return v


# --- per-label PCA ---------------------------------------------------------

@dataclass(eq=False)
class LabelPCA:
    label: int
    pixels: np.ndarray  # flat row-major pixel indices
    mean: np.ndarray  # (2 * n_pixels,) interleaved (ux, uy)
    basis: np.ndarray  # (C, 2 * n_pixels) orthonormal rows
    singular_values: np.ndarray
    explained_ratio: float

    @property
    def n_components(self) -> int:
        return self.basis.shape[0]


@dataclass(eq=False)
class DeformationModel:
    shape: tuple[int, int]
    labels: np.ndarray
    parts: list[LabelPCA]

    @property
    def n_components(self) -> list[int]:
        return [p.n_components for p in self.parts]

    @property
    def dim(self) -> int:
        return sum(self.n_components)

    def slices(self) -> list[slice]:
        out, start = [], 0
        for p in self.parts:
            out.append(slice(start, start + p.n_components))
            start += p.n_components
        return out

    def mean_field(self) -> np.ndarray:
        return decode(np.zeros(self.dim), self)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "labels": self.labels.astype(int).tolist(),
            "parts": [{
                "label": p.label,
                "mean": p.mean.tolist(),
                "basis": p.basis.tolist(),
                "singular_values": p.singular_values.tolist(),
                "explained_ratio": p.explained_ratio,
            } for p in self.parts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeformationModel":
        labels = np.array(d["labels"], dtype=np.int64)
        flat = labels.reshape(-1)
        parts = []
        for p in d["parts"]:
            pix = np.flatnonzero(flat == p["label"])
            basis = np.array(p["basis"], dtype=float).reshape(-1, 2 * pix.size)
            parts.append(LabelPCA(int(p["label"]), pix, np.array(p["mean"], dtype=float), basis,
                                  np.array(p["singular_values"], dtype=float), float(p["explained_ratio"])))
        return cls(tuple(d["shape"]), labels, parts)


def _label_vectors(fields: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    n = fields.shape[0]
    return fields.reshape(n, -1, 2)[:, pixels, :].reshape(n, -1)


def fit_pca(training_fields, atlas: Atlas | np.ndarray, threshold: float = EXPLAINED_VARIANCE) -> DeformationModel:
    """Per-label PCA of displacement fields, one sample per field.

    Each label keeps the fewest leading components whose explained variance
    reaches ``threshold``. A label with no variation keeps only its mean.
    The sign of every component is fixed so its largest-magnitude entry is positive.
    """
    labels = atlas.labels if isinstance(atlas, Atlas) else np.asarray(atlas)
    fields = np.array([_check_field(f, labels.shape) for f in training_fields])
    if fields.shape[0] < 2:
        raise TooFewSamples(f"need at least 2 training fields, got {fields.shape[0]}")
    flat = labels.reshape(-1)
    parts = []
    for lab in np.unique(flat):
        pix = np.flatnonzero(flat == lab)
        X = _label_vectors(fields, pix)
        mean = X.mean(axis=0)
        Xc = X - mean
        _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
        energy = s ** 2
        total = float(energy.sum())
        if total <= 1e-20 * max(1.0, float(np.sum(X * X))):
            log.info("label %d has no displacement variance; mean-only", lab)
            parts.append(LabelPCA(int(lab), pix, mean, np.zeros((0, pix.size * 2)), s[:0], 1.0))
            continue
        cum = np.cumsum(energy) / total
        C = int(np.searchsorted(cum, threshold - 1e-12) + 1)
        C = min(C, s.size)
        basis = Vt[:C].copy()
        for row in basis:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
        parts.append(LabelPCA(int(lab), pix, mean, basis, s[:C].copy(), float(cum[C - 1])))
    return DeformationModel(labels.shape, labels.copy(), parts)


def encode(u: np.ndarray, model: DeformationModel) -> np.ndarray:
    """Per-label PCA coefficients of a field, concatenated in label order."""
    u = _check_field(u, model.shape)
    out = []
    for p in model.parts:
        x = _label_vectors(u[None], p.pixels)[0]
        out.append(p.basis @ (x - p.mean))
    return np.concatenate(out) if out else np.zeros(0)


def decode(y: np.ndarray, model: DeformationModel) -> np.ndarray:
    """Field reconstructed from coefficients: per-label mean plus basis combination."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != model.dim:
        raise DimensionMismatch(f"expected {model.dim} coefficients, got {y.size}")
    flat = np.zeros((model.shape[0] * model.shape[1], 2))
    for p, sl in zip(model.parts, model.slices()):
        vec = p.mean + y[sl] @ p.basis
        flat[p.pixels] = vec.reshape(-1, 2)
    return flat.reshape(model.shape + (2,))


# --- follow-up synthesis -----------------------------------------------------

def followup_warp(phi_ab: np.ndarray, y_t: np.ndarray, model: DeformationModel) -> np.ndarray:
    """Field taking the baseline image to the follow-up predicted by ``y_t``.

    ``phi_ab`` is the atlas-to-baseline field (I_b(v) = A(v + phi_ab(v))); the
    follow-up field from the atlas is ``decode(y_t)``. Pulling the baseline
    back through the atlas gives I_t(v) = I_b(T_ab^-1(T_t(v))).
    """
    u_t = decode(y_t, model)
    return compose(invert(phi_ab), u_t)


def synthesize_followup(baseline_image: np.ndarray, phi_ab: np.ndarray, y_t: np.ndarray,
                        model: DeformationModel) -> np.ndarray:
    return warp_image(baseline_image, followup_warp(phi_ab, y_t, model))


def propagate_labels(baseline_labels: np.ndarray, phi_ab: np.ndarray, y_t: np.ndarray,
                     model: DeformationModel) -> np.ndarray:
    return warp_labels(baseline_labels, followup_warp(phi_ab, y_t, model))


# --- file formats ------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray, maxval: int = 65535) -> None:
    """Binary PGM. Float images are scaled from [0, 1]; integer arrays are written as is."""
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.integer):
        data = image.astype(np.int64)
    else:
        data = np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)
    if data.min() < 0 or data.max() > maxval:
        raise ValueError(f"pixel values outside [0, {maxval}]")
    H, W = data.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(data.astype(dtype).tobytes())


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Raw integer pixels and maxval of a binary PGM."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[pos + 1:], dtype=dtype, count=W * H)
    return data.reshape(H, W).astype(np.int64), maxval


def write_field_csv(path: str | Path, u: np.ndarray) -> None:
    u = _check_field(u)
    H, W = u.shape[:2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "ux", "uy"])
        for yy in range(H):
            for xx in range(W):
                w.writerow([xx, yy, repr(float(u[yy, xx, 0])), repr(float(u[yy, xx, 1]))])


def read_field_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["x", "y", "ux", "uy"]:
        raise ValueError(f"{path}: header must be x,y,ux,uy")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r])
    W = int(data[:, 0].max()) + 1
    H = int(data[:, 1].max()) + 1
    u = np.zeros((H, W, 2))
    u[data[:, 1].astype(int), data[:, 0].astype(int)] = data[:, 2:4]
    return u
