"""PCA landmark shape model.

Shapes are flattened as interleaved ``(x0, y0, x1, y1, ...)`` vectors of
length 2K.  A :class:`ShapeBasis` holds the mean shape and an orthonormal
matrix of principal directions; any base shape (the population mean or a
subject's own neutral shape) plus ``basis @ params`` gives a new shape.
"""

from __future__ import annotations

import math
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

DEFAULT_VARIANCE_FRACTION = 0.95
CANONICAL_LEFT_EYE = (45.0, 54.0)
CANONICAL_RIGHT_EYE = (99.0, 54.0)
BASIS_MAGIC = b"G2SB"


class ShapeModelError(ValueError):
    pass


class DegenerateGeometryError(ShapeModelError):
    pass


class LandmarkFormatError(ShapeModelError):
    pass


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """K fiducial points in pixel coordinates, stored as a (K, 2) array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ShapeModelError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def K(self) -> int:
        return self.points.shape[0]

    def vector(self) -> np.ndarray:
        return self.points.reshape(-1).copy()

    @classmethod
    def from_vector(cls, v) -> "LandmarkSet":
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.size % 2:
            raise ShapeModelError(f"shape vector must have even length, got {v.shape}")
        return cls(v.reshape(-1, 2))

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]))

    def __eq__(self, other) -> bool:
        return isinstance(other, LandmarkSet) and np.array_equal(self.points, other.points)

    def __len__(self) -> int:
        return self.K


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(rotation) @ p + translation``."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ShapeModelError(f"similarity scale must be positive, got {self.scale}")

    def _complex(self) -> tuple[complex, complex]:
        a = self.scale * complex(math.cos(self.rotation), math.sin(self.rotation))
        return a, complex(*self.translation)

    def apply(self, landmarks: LandmarkSet) -> LandmarkSet:
        a, b = self._complex()
        z = landmarks.points[:, 0] + 1j * landmarks.points[:, 1]
        w = a * z + b
        return LandmarkSet(np.column_stack([w.real, w.imag]))

    def inverse(self) -> "SimilarityTransform":
        a, b = self._complex()
        ai = 1.0 / a
        bi = -b * ai
        return SimilarityTransform(abs(ai), math.atan2(ai.imag, ai.real), (bi.real, bi.imag))


def _eye_point(landmarks: LandmarkSet, idx) -> np.ndarray:
    ids = [idx] if np.isscalar(idx) else list(idx)
    if not ids or any(not 0 <= i < landmarks.K for i in ids):
        raise ShapeModelError(f"eye index {idx} out of range for K={landmarks.K}")
    return landmarks.points[ids].mean(axis=0)


def align_landmarks(
    landmarks: LandmarkSet,
    left_eye_idx,
    right_eye_idx,
    canonical_left=CANONICAL_LEFT_EYE,
    canonical_right=CANONICAL_RIGHT_EYE,
) -> tuple[LandmarkSet, SimilarityTransform]:
    """Similarity-normalize so the two eye points land on canonical positions.

    An eye index may be a single landmark index or a sequence of indices
    whose centroid is used as the eye location.
    """
    left = complex(*_eye_point(landmarks, left_eye_idx))
    right = complex(*_eye_point(landmarks, right_eye_idx))
    if abs(right - left) < 1e-12:
        raise DegenerateGeometryError("eye points coincide; similarity transform is undefined")
    cl, cr = complex(*canonical_left), complex(*canonical_right)
    a = (cr - cl) / (right - left)
    b = cl - a * left
    transform = SimilarityTransform(abs(a), math.atan2(a.imag, a.real), (b.real, b.imag))
    return transform.apply(landmarks), transform


@dataclass(frozen=True, eq=False)
class ShapeBasis:
    mean_shape: np.ndarray  # (2K,)
    basis: np.ndarray  # (2K, N)
    eigenvalues: np.ndarray  # (N,)

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        basis = np.asarray(self.basis, dtype=np.float64).reshape(mean.size, -1)
        eig = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if eig.size != basis.shape[1]:
            raise ShapeModelError(f"{eig.size} eigenvalues for {basis.shape[1]} basis columns")
        for arr in (mean, basis, eig):
            arr.setflags(write=False)
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def K(self) -> int:
        return self.mean_shape.size // 2

    @property
    def N(self) -> int:
        return self.basis.shape[1]

    @property
    def mean(self) -> LandmarkSet:
        return LandmarkSet.from_vector(self.mean_shape)

    def orthonormality_error(self) -> float:
        return float(np.abs(self.basis.T @ self.basis - np.eye(self.N)).max(initial=0.0))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ShapeBasis)
            and np.array_equal(self.mean_shape, other.mean_shape)
            and np.array_equal(self.basis, other.basis)
            and np.array_equal(self.eigenvalues, other.eigenvalues)
        )


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = vectors.copy()
    for j in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, j]) > tol)
        if nz.size and out[nz[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


def fit_shape_basis(
    shapes: Sequence[LandmarkSet],
    n_components: int | None = None,
    variance_fraction: float | None = None,
) -> ShapeBasis:
    """PCA of aligned shapes via SVD of the centered data matrix.

    Exactly one of ``n_components`` / ``variance_fraction`` may be given;
    with neither, ``variance_fraction=0.95``.  In variance mode N is the
    smallest count whose cumulative eigenvalue fraction reaches the target
    (N = 0 when the shapes carry no variance).
    """
    if len(shapes) < 2:
        raise ShapeModelError("need at least 2 shapes to fit a basis")
    ks = {s.K for s in shapes}
    if len(ks) != 1:
        raise ShapeModelError(f"shapes have mismatched point counts: {sorted(ks)}")
    if n_components is not None and variance_fraction is not None:
        raise ShapeModelError("give n_components or variance_fraction, not both")
    if n_components is None and variance_fraction is None:
        variance_fraction = DEFAULT_VARIANCE_FRACTION

    data = np.stack([s.vector() for s in shapes])
    mean = data.mean(axis=0)
    centered = data - mean
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    max_n = min(data.shape[1], len(shapes) - 1)
    eig = sing[:max_n] ** 2 / (len(shapes) - 1)
    vecs = vt[:max_n].T

    if n_components is not None:
        if not 0 <= n_components <= max_n:
            raise ShapeModelError(f"n_components must be in [0, {max_n}], got {n_components}")
        n = n_components
    else:
        if not 0 < variance_fraction <= 1:
            raise ShapeModelError("variance_fraction must lie in (0, 1]")
        total = eig.sum()
        if total <= 0:
            n = 0
        else:
            cum = np.cumsum(eig) / total
            n = int(np.searchsorted(cum, variance_fraction * (1 - 1e-12)) + 1)
            n = min(n, max_n)
    return ShapeBasis(mean, _fix_signs(vecs[:, :n]), eig[:n])


def _check_dims(basis: ShapeBasis, *shapes: LandmarkSet, params=None) -> None:
    for s in shapes:
        if s.K != basis.K:
            raise ShapeModelError(f"landmark count {s.K} does not match basis K={basis.K}")
    if params is not None and np.shape(params) != (basis.N,):
        raise ShapeModelError(f"params of shape {np.shape(params)} do not match basis N={basis.N}")


def shape_from_params(basis: ShapeBasis, base_shape: LandmarkSet, params) -> LandmarkSet:
    params = np.asarray(params, dtype=np.float64)
    _check_dims(basis, base_shape, params=params)
    return LandmarkSet.from_vector(base_shape.vector() + basis.basis @ params)


def fit_params(basis: ShapeBasis, base_shape: LandmarkSet, observed: LandmarkSet, method: str = "projection") -> np.ndarray:
    """Least-squares shape parameters of ``observed`` about ``base_shape``.

    ``method="projection"`` uses the orthonormal shortcut ``S.T @ d``;
    ``method="lstsq"`` solves the general problem for any basis.
    """
    _check_dims(basis, base_shape, observed)
    d = observed.vector() - base_shape.vector()
    if method == "projection":
        return basis.basis.T @ d
    if method == "lstsq":
        return np.linalg.lstsq(basis.basis, d, rcond=None)[0]
    raise ShapeModelError(f"unknown fit method {method!r}")


def transfer_shape(basis: ShapeBasis, neutral_target: LandmarkSet, params_source) -> LandmarkSet:
    """Expression of ``params_source`` re-anchored on another subject's neutral shape."""
    return shape_from_params(basis, neutral_target, params_source)


def interpolate_params(p_from, p_to, t: float) -> np.ndarray:
    p_from = np.asarray(p_from, dtype=np.float64)
    p_to = np.asarray(p_to, dtype=np.float64)
    if p_from.shape != p_to.shape:
        raise ShapeModelError(f"parameter length mismatch: {p_from.shape} vs {p_to.shape}")
    return (1.0 - t) * p_from + t * p_to


def semantic_prototypes(
    basis: ShapeBasis,
    labeled_samples: Iterable[tuple[LandmarkSet, LandmarkSet, Hashable]],
    labels: Iterable[Hashable] | None = None,
) -> dict[Hashable, np.ndarray]:
    """Mean fitted parameters per expression label.

    ``labels`` optionally names groups that must be present; an empty group
    raises.
    """
    groups: dict[Hashable, list[np.ndarray]] = defaultdict(list)
    for neutral, expressed, label in labeled_samples:
        groups[label].append(fit_params(basis, neutral, expressed))
    for label in labels or ():
        if not groups.get(label):
            raise ShapeModelError(f"no samples for label {label!r}")
    if not groups:
        raise ShapeModelError("no labeled samples")
    return {label: np.mean(ps, axis=0) for label, ps in groups.items()}


# ---------------------------------------------------------------- file I/O


def write_landmarks(path, landmarks: LandmarkSet) -> None:
    lines = [str(landmarks.K)] + [f"{x!r} {y!r}" for x, y in landmarks.points.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks(path) -> LandmarkSet:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LandmarkFormatError(f"{path}: cannot read landmark file ({exc})") from exc
    lines = text.split("\n")
    if not text.endswith("\n"):
        raise LandmarkFormatError(f"{path}: not newline-terminated")
    lines = lines[:-1]
    try:
        k = int(lines[0])
    except (IndexError, ValueError) as exc:
        raise LandmarkFormatError(f"{path}: first line must be the integer point count") from exc
    if k < 1 or len(lines) != k + 1:
        raise LandmarkFormatError(f"{path}: header says K={k} but file has {len(lines) - 1} point lines")
    pts = []
    for n, line in enumerate(lines[1:], start=2):
        fields = line.split(" ")
        try:
            if len(fields) != 2:
                raise ValueError
            pts.append((float(fields[0]), float(fields[1])))
        except ValueError as exc:
            raise LandmarkFormatError(f"{path}:{n}: expected 'x y', got {line!r}") from exc
    try:
        return LandmarkSet(np.array(pts))
    except ShapeModelError as exc:
        raise LandmarkFormatError(f"{path}: {exc}") from exc


def save_basis(path, basis: ShapeBasis) -> None:
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(struct.pack("<II", basis.K, basis.N))
        fh.write(basis.mean_shape.astype("<f8").tobytes())
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.basis).astype("<f8").tobytes())


def load_basis(path) -> ShapeBasis:
    raw = Path(path).read_bytes()
    if raw[:4] != BASIS_MAGIC:
        raise ShapeModelError(f"{path}: not a shape basis file")
    k, n = struct.unpack_from("<II", raw, 4)
    expected = 12 + 8 * (2 * k + n + 2 * k * n)
    if len(raw) != expected:
        raise ShapeModelError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=12).astype(np.float64)
    mean = vals[: 2 * k]
    eig = vals[2 * k : 2 * k + n]
    basis = vals[2 * k + n :].reshape(2 * k, n)
    return ShapeBasis(mean, basis, eig)
