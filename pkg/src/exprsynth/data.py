"""Procedural synthetic face pairs, on-disk datasets and preprocessing.

Faces are drawn on a 144x144 grayscale canvas from an 18-point markup.
The emitted landmarks are exactly the control points the renderer used,
quantized to 1/256 px so that flips and integer shifts are exact in
floating point.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .heatmap import crop_heatmap_coords, default_sigma, render_heatmap
from .shape_model import LandmarkFormatError, LandmarkSet, read_landmarks, write_landmarks

CANVAS = 144
CROP = 128
QUANTUM = 1.0 / 256.0

# 0-3 left eye (outer, top, inner, bottom), 4-7 right eye (inner, top, outer,
# bottom), 8-9 left brow (outer, inner), 10-11 right brow (inner, outer),
# 12 nose tip, 13-16 mouth (left corner, upper lip, right corner, lower lip),
# 17 chin.  "Left" means smaller image x.
N_LANDMARKS = 18
LEFT_EYE = (0, 1, 2, 3)
RIGHT_EYE = (4, 5, 6, 7)
SYMMETRIC_PAIRS = ((0, 6), (1, 5), (2, 4), (3, 7), (8, 11), (9, 10), (13, 15))


def _flip_permutation() -> np.ndarray:
    perm = np.arange(N_LANDMARKS)
    for a, b in SYMMETRIC_PAIRS:
        perm[a], perm[b] = b, a
    return perm


FLIP_PERMUTATION = _flip_permutation()


class DatasetError(RuntimeError):
    pass


def stream_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named random stream (data, init, augmentation...)."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode()), *map(int, keys)])


# ------------------------------------------------------------------ subjects

SUBJECT_RANGES = {
    "eye_y": (50.0, 58.0),
    "eye_spacing": (21.0, 27.0),
    "eye_half_width": (7.0, 10.0),
    "eye_half_height": (2.5, 4.5),
    "brow_gap": (9.0, 13.0),
    "brow_half_length": (7.0, 11.0),
    "nose_length": (20.0, 28.0),
    "mouth_gap": (10.0, 14.0),
    "mouth_half_width": (11.0, 17.0),
    "lip_offset": (2.0, 3.5),
    "chin_drop": (12.0, 18.0),
    "face_half_width": (42.0, 54.0),
    "face_top": (8.0, 18.0),
    "hair_depth": (8.0, 22.0),
    "skin_tone": (0.55, 0.85),
    "hair_tone": (0.05, 0.45),
    "background": (0.15, 0.35),
    "feature_tone": (0.02, 0.25),
    "texture_amplitude": (0.03, 0.08),
}


@dataclass(frozen=True)
class SyntheticSubject:
    eye_y: float
    eye_spacing: float
    eye_half_width: float
    eye_half_height: float
    brow_gap: float
    brow_half_length: float
    nose_length: float
    mouth_gap: float
    mouth_half_width: float
    lip_offset: float
    chin_drop: float
    face_half_width: float
    face_top: float
    hair_depth: float
    skin_tone: float
    hair_tone: float
    background: float
    feature_tone: float
    texture_amplitude: float
    texture_seed: int

    def in_range(self) -> bool:
        return all(lo <= getattr(self, k) <= hi for k, (lo, hi) in SUBJECT_RANGES.items())


def generate_subject(seed) -> SyntheticSubject:
    rng = np.random.default_rng(seed)
    values = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in SUBJECT_RANGES.items()}
    return SyntheticSubject(**values, texture_seed=int(rng.integers(0, 2**31 - 1)))


# --------------------------------------------------------------- expressions


@dataclass(frozen=True)
class ExpressionOffsets:
    """Per-organ displacements in pixels.

    mouth_corner_lift moves both corners up by the lift and outward by half
    of it; mouth_open raises the upper lip by a quarter of the opening and
    lowers the lower lip and chin by three quarters; brow_raise lifts all
    brow points; brow_furrow lowers the inner brow points and pulls them
    toward the midline by half the amount; eye_open widens each eye's
    top/bottom points symmetrically about the eye center.
    """

    mouth_corner_lift: float = 0.0
    mouth_open: float = 0.0
    brow_raise: float = 0.0
    brow_furrow: float = 0.0
    eye_open: float = 0.0

    def scaled(self, factor: float) -> "ExpressionOffsets":
        return ExpressionOffsets(*(factor * getattr(self, f.name) for f in fields(self)))


EXPRESSIONS = {
    "happy": ExpressionOffsets(mouth_corner_lift=7.0, mouth_open=3.0, eye_open=-1.0),
    "sad": ExpressionOffsets(mouth_corner_lift=-5.0, brow_furrow=-3.0, eye_open=-1.0),
    "surprise": ExpressionOffsets(mouth_open=10.0, brow_raise=6.0, eye_open=2.0),
    "angry": ExpressionOffsets(mouth_corner_lift=-2.0, brow_raise=-1.0, brow_furrow=4.0, eye_open=-1.5),
    "fear": ExpressionOffsets(mouth_corner_lift=-1.0, mouth_open=5.0, brow_raise=4.0, brow_furrow=2.0, eye_open=1.5),
    "disgust": ExpressionOffsets(mouth_corner_lift=-3.0, mouth_open=1.5, brow_furrow=3.0, eye_open=-2.0),
}
INTENSITIES = (1.0 / 3.0, 2.0 / 3.0, 1.0)


def _quantize(v: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(v) / QUANTUM) * QUANTUM


def neutral_landmarks(subject: SyntheticSubject) -> LandmarkSet:
    return face_landmarks(subject, ExpressionOffsets())


def face_landmarks(subject: SyntheticSubject, offsets: ExpressionOffsets) -> LandmarkSet:
    s, o = subject, offsets
    cx = CANVAS / 2.0
    pts = np.zeros((N_LANDMARKS, 2))
    eye_h = max(s.eye_half_height + o.eye_open, 0.5)
    for side, (outer, top, inner, bottom) in ((-1, LEFT_EYE), (1, (6, 5, 4, 7))):
        ex = cx + side * s.eye_spacing
        pts[outer] = (ex + side * s.eye_half_width, s.eye_y)
        pts[inner] = (ex - side * s.eye_half_width, s.eye_y)
        pts[top] = (ex, s.eye_y - eye_h)
        pts[bottom] = (ex, s.eye_y + eye_h)
        brow_y = s.eye_y - s.brow_gap - o.brow_raise
        outer_b, inner_b = (8, 9) if side < 0 else (11, 10)
        pts[outer_b] = (ex + side * s.brow_half_length, brow_y)
        pts[inner_b] = (ex - side * s.brow_half_length - side * 0.5 * o.brow_furrow, brow_y + o.brow_furrow)
    nose_y = s.eye_y + s.nose_length
    pts[12] = (cx, nose_y)
    mouth_y = nose_y + s.mouth_gap
    lift = o.mouth_corner_lift
    pts[13] = (cx - s.mouth_half_width - 0.5 * lift, mouth_y - lift)
    pts[15] = (cx + s.mouth_half_width + 0.5 * lift, mouth_y - lift)
    pts[14] = (cx, mouth_y - s.lip_offset - 0.25 * o.mouth_open)
    pts[16] = (cx, mouth_y + s.lip_offset + 0.75 * o.mouth_open)
    pts[17] = (cx, mouth_y + s.lip_offset + s.chin_drop + 0.75 * o.mouth_open)
    pts = _quantize(pts)
    if pts.min() < 0 or pts.max() > CANVAS - 1:
        raise DatasetError("expression offsets push landmarks outside the canvas")
    return LandmarkSet(pts)


# ----------------------------------------------------------------- renderer


def _coverage(signed_distance: np.ndarray) -> np.ndarray:
    """Anti-aliased area coverage from a signed distance (negative inside)."""
    return np.clip(0.5 - signed_distance, 0.0, 1.0)


def _segment_distance(px, py, a, b) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _stroke(px, py, points: Sequence[np.ndarray], width: float) -> np.ndarray:
    d = np.min([_segment_distance(px, py, points[i], points[i + 1]) for i in range(len(points) - 1)], axis=0)
    return _coverage(d - width / 2.0)


def _parabola(x0, x1, x2, y0, y1, y2):
    """Quadratic through three points with distinct x."""
    coeffs = np.polyfit([x0, x1, x2], [y0, y1, y2], 2)
    return np.poly1d(coeffs)


def _blend(img, coverage, value):
    return img * (1.0 - coverage) + value * coverage


def render_face(subject: SyntheticSubject, offsets: ExpressionOffsets | None = None) -> tuple[np.ndarray, LandmarkSet]:
    """Draw a face and return ``(image[144, 144] in [0, 1], landmarks)``."""
    lm = face_landmarks(subject, offsets or ExpressionOffsets())
    p = lm.points
    s = subject
    py, px = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    img = np.full((CANVAS, CANVAS), s.background)

    # face: upper half-ellipse to the forehead, lower half-ellipse to the chin
    cx = CANVAS / 2.0
    cy = p[12, 1]
    ry = np.where(py < cy, cy - s.face_top, p[17, 1] - cy)
    r = np.hypot((px - cx) / s.face_half_width, (py - cy) / ry)
    face = _coverage((r - 1.0) * np.minimum(s.face_half_width, ry))
    tex_rng = np.random.default_rng(s.texture_seed)
    texture = gaussian_filter(tex_rng.standard_normal((CANVAS, CANVAS)), 4.0, mode="wrap")
    texture *= s.texture_amplitude / (texture.std() + 1e-12)
    img = _blend(img, face, np.clip(s.skin_tone + texture, 0.0, 1.0))
    hair = face * _coverage(py - (s.face_top + s.hair_depth))
    img = _blend(img, hair, s.hair_tone)

    dark = s.feature_tone
    # brows
    img = _blend(img, _stroke(px, py, [p[8], p[9]], 3.0), dark)
    img = _blend(img, _stroke(px, py, [p[10], p[11]], 3.0), dark)
    # eyes: ellipse through the four control points
    for outer, top, inner, bottom in (LEFT_EYE, (6, 5, 4, 7)):
        ecx = 0.5 * (p[outer, 0] + p[inner, 0])
        ecy = 0.5 * (p[top, 1] + p[bottom, 1])
        ax = 0.5 * abs(p[outer, 0] - p[inner, 0])
        ay = 0.5 * abs(p[bottom, 1] - p[top, 1])
        re = np.hypot((px - ecx) / ax, (py - ecy) / ay)
        img = _blend(img, _coverage((re - 1.0) * min(ax, ay)), dark)
    # nose bridge and nostril line
    bridge_top = np.array([cx, s.eye_y + 4.0])
    img = _blend(img, 0.6 * _stroke(px, py, [bridge_top, p[12]], 1.5), dark)
    img = _blend(img, 0.6 * _stroke(px, py, [p[12] + (-4.0, -1.0), p[12], p[12] + (4.0, -1.0)], 1.5), dark)
    # mouth: region between upper and lower lip parabolas, outlined
    xl, xr = p[13, 0], p[15, 0]
    upper = _parabola(xl, p[14, 0], xr, p[13, 1], p[14, 1], p[15, 1])
    lower = _parabola(xl, p[16, 0], xr, p[13, 1], p[16, 1], p[15, 1])
    inside_x = np.minimum(px - xl, xr - px)
    inside_y = np.minimum(py - upper(px), lower(px) - py)
    mouth = _coverage(-np.minimum(inside_x, inside_y))
    img = _blend(img, mouth, 0.5 * dark)
    xs = np.linspace(xl, xr, 17)
    img = _blend(img, _stroke(px, py, [np.array(v) for v in zip(xs, upper(xs))], 1.5), dark)
    img = _blend(img, _stroke(px, py, [np.array(v) for v in zip(xs, lower(xs))], 1.5), dark)
    return np.clip(img, 0.0, 1.0), lm


# ------------------------------------------------------------------ samples


@dataclass
class Sample:
    image_neutral: np.ndarray  # (C, H, W)
    image_expr: np.ndarray
    landmarks_neutral: LandmarkSet
    landmarks_expr: LandmarkSet
    subject_id: str
    expression: str
    intensity: float = 1.0

    def __post_init__(self):
        if self.image_neutral.shape != self.image_expr.shape:
            raise DatasetError(f"{self.subject_id}: image shapes differ")
        if self.landmarks_neutral.K != self.landmarks_expr.K:
            raise DatasetError(f"{self.subject_id}: landmark counts differ")
        for img in (self.image_neutral, self.image_expr):
            if img.min() < 0 or img.max() > 1:
                raise DatasetError(f"{self.subject_id}: image values outside [0, 1]")


@dataclass
class Dataset:
    samples: list[Sample]
    split: dict[str, str]  # subject id -> "train" | "test"
    neutral: dict[str, tuple[np.ndarray, LandmarkSet]] = field(default_factory=dict)

    def subset(self, which: str) -> list[Sample]:
        return [s for s in self.samples if self.split[s.subject_id] == which]

    def subjects(self, which: str | None = None) -> list[str]:
        return sorted(k for k, v in self.split.items() if which is None or v == which)


def quantize_image(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def subject_id(i: int) -> str:
    return f"s{i:03d}"


def synthesize_dataset(
    n_subjects: int = 20,
    seed: int = 0,
    expressions: Sequence[str] | int = tuple(EXPRESSIONS),
    intensities: Sequence[float] = INTENSITIES,
    n_test_subjects: int = 5,
) -> Dataset:
    """In-memory dataset: one neutral image per subject paired with every
    (expression, intensity) image; the split is by subject."""
    if n_subjects < 1:
        raise DatasetError("need at least one subject")
    if isinstance(expressions, int):
        expressions = tuple(EXPRESSIONS)[:expressions]
    if not expressions or not intensities:
        raise DatasetError("need at least one expression and intensity")
    samples, neutral = [], {}
    for i in range(n_subjects):
        sid = subject_id(i)
        subject = generate_subject([seed, i])
        img_n, lm_n = render_face(subject)
        img_n = quantize_image(img_n)[None]
        neutral[sid] = (img_n, lm_n)
        for name in expressions:
            for level in intensities:
                img_e, lm_e = render_face(subject, EXPRESSIONS[name].scaled(level))
                samples.append(Sample(img_n, quantize_image(img_e)[None], lm_n, lm_e, sid, name, float(level)))
    n_test = min(n_test_subjects, max(n_subjects - 1, 0))
    order = stream_rng(seed, "split").permutation(n_subjects)
    test_ids = {subject_id(i) for i in order[:n_test]}
    split = {subject_id(i): ("test" if subject_id(i) in test_ids else "train") for i in range(n_subjects)}
    return Dataset(samples, split, neutral)


# ------------------------------------------------------------------ disk I/O

MANIFEST = "manifest.tsv"
SPLIT = "split.tsv"


def write_image(path, img: np.ndarray) -> None:
    arr = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing image file: {path}")
    try:
        arr = np.asarray(Image.open(path))
    except OSError as exc:
        raise DatasetError(f"unreadable image file: {path} ({exc})") from exc
    arr = arr.astype(np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def make_dataset(
    out_dir,
    n_subjects: int = 20,
    expressions_per_subject: int = 6,
    seed: int = 0,
    intensities: Sequence[float] = INTENSITIES,
    n_test_subjects: int = 5,
) -> Path:
    """Write images, landmark files, the manifest and the subject split; return the manifest path."""
    if expressions_per_subject < 1 or expressions_per_subject > len(EXPRESSIONS):
        raise DatasetError(f"expressions_per_subject must be in [1, {len(EXPRESSIONS)}]")
    ds = synthesize_dataset(n_subjects, seed, expressions_per_subject, intensities, n_test_subjects)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    for sid, (img, lm) in ds.neutral.items():
        write_image(out / "images" / f"{sid}_neutral.pgm", img)
        write_landmarks(out / "landmarks" / f"{sid}_neutral.txt", lm)
    rows = []
    for s in ds.samples:
        stem = f"{s.subject_id}_{s.expression}_{round(s.intensity * 3)}"
        write_image(out / "images" / f"{stem}.pgm", s.image_expr)
        write_landmarks(out / "landmarks" / f"{stem}.txt", s.landmarks_expr)
        rows.append("\t".join([
            s.subject_id, s.expression, repr(s.intensity),
            f"images/{s.subject_id}_neutral.pgm", f"images/{stem}.pgm",
            f"landmarks/{s.subject_id}_neutral.txt", f"landmarks/{stem}.txt",
        ]))
    (out / MANIFEST).write_text("\n".join(rows) + "\n")
    (out / SPLIT).write_text("".join(f"{sid}\t{which}\n" for sid, which in sorted(ds.split.items())))
    return out / MANIFEST


def load_dataset(directory) -> Dataset:
    """Read a dataset written by :func:`make_dataset` (or by hand in the same layout)."""
    root = Path(directory)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    split = {}
    if (root / SPLIT).is_file():
        for n, line in enumerate((root / SPLIT).read_text().splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("train", "test"):
                raise DatasetError(f"{root / SPLIT}:{n}: malformed split row")
            if parts[0] in split:
                raise DatasetError(f"{root / SPLIT}: subject {parts[0]} listed twice")
            split[parts[0]] = parts[1]
    images: dict[str, np.ndarray] = {}
    marks: dict[str, LandmarkSet] = {}

    def image(rel):
        if rel not in images:
            images[rel] = read_image(root / rel)
        return images[rel]

    def landmarks(rel):
        if rel not in marks:
            path = root / rel
            if not path.is_file():
                raise DatasetError(f"missing landmark file: {path}")
            try:
                marks[rel] = read_landmarks(path)
            except LandmarkFormatError as exc:
                raise DatasetError(str(exc)) from exc
        return marks[rel]

    samples, neutral = [], {}
    k_seen = None
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 7:
            raise DatasetError(f"{manifest}:{n}: expected 7 tab-separated fields, got {len(parts)}")
        sid, label, intensity, img_n, img_e, lm_n, lm_e = parts
        ln, le = landmarks(lm_n), landmarks(lm_e)
        for rel, lm in ((lm_n, ln), (lm_e, le)):
            if k_seen is None:
                k_seen = lm.K
            elif lm.K != k_seen:
                raise DatasetError(f"non-uniform K: {root / rel} has {lm.K} points, expected {k_seen}")
        try:
            sample = Sample(image(img_n), image(img_e), ln, le, sid, label, float(intensity))
        except ValueError as exc:
            raise DatasetError(f"{manifest}:{n}: {exc}") from exc
        samples.append(sample)
        neutral.setdefault(sid, (sample.image_neutral, ln))
        split.setdefault(sid, "train")
    if not samples:
        raise DatasetError(f"{manifest}: no samples")
    return Dataset(samples, split, neutral)


# ------------------------------------------------------------- preprocessing


@dataclass
class ModelInput:
    """One preprocessed pair at model resolution."""

    image_neutral: np.ndarray  # (C, S, S)
    image_expr: np.ndarray
    landmarks_neutral: LandmarkSet
    landmarks_expr: LandmarkSet
    heatmap_expr: np.ndarray  # (K or 1, S, S)
    crop_offset: tuple[int, int]
    flipped: bool


def flip_landmarks(landmarks: LandmarkSet, width: int) -> LandmarkSet:
    """Mirror x -> width - 1 - x and swap left/right points."""
    if landmarks.K != N_LANDMARKS:
        raise DatasetError(f"flip table covers the {N_LANDMARKS}-point markup, got K={landmarks.K}")
    pts = landmarks.points[FLIP_PERMUTATION].copy()
    pts[:, 0] = (width - 1) - pts[:, 0]
    return LandmarkSet(pts)


def flip_heatmap(maps: np.ndarray) -> np.ndarray:
    """Mirror a rendered heatmap and swap its left/right channels."""
    out = maps[..., ::-1]
    return out[FLIP_PERMUTATION] if out.shape[0] == N_LANDMARKS else out


def resize_landmarks(landmarks: LandmarkSet, factor: float) -> LandmarkSet:
    """Rescale pixel-center coordinates by ``factor``."""
    return LandmarkSet((landmarks.points + 0.5) * factor - 0.5)


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    c, h, w = img.shape
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def preprocess(
    sample: Sample,
    mode: str = "test",
    rng: np.random.Generator | None = None,
    size: int = 64,
    sigma: float | None = None,
    heatmap_mode: str = "per-point",
) -> ModelInput:
    """Crop 128x128 from the 144x144 canvas (random + flip in train, center in
    test), downsample to ``size`` and render the expression heatmap."""
    c, h, w = sample.image_neutral.shape
    if (h, w) != (CANVAS, CANVAS):
        raise DatasetError(f"preprocess expects {CANVAS}x{CANVAS} input, got {h}x{w}")
    if CROP % size:
        raise DatasetError(f"model size {size} must divide {CROP}")
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        dx, dy = (int(v) for v in rng.integers(0, CANVAS - CROP + 1, size=2))
        flip = bool(rng.random() < 0.5)
    elif mode == "test":
        dx = dy = (CANVAS - CROP) // 2
        flip = False
    else:
        raise ValueError(f"unknown preprocess mode {mode!r}")
    factor = CROP // size
    images, marks = [], []
    for img, lm in ((sample.image_neutral, sample.landmarks_neutral), (sample.image_expr, sample.landmarks_expr)):
        img = img[:, dy : dy + CROP, dx : dx + CROP]
        lm = crop_heatmap_coords(lm, (dx, dy))
        if flip:
            img = img[:, :, ::-1]
            lm = flip_landmarks(lm, CROP)
        images.append(np.ascontiguousarray(downsample(img, factor)))
        marks.append(resize_landmarks(lm, 1.0 / factor))
    sigma = default_sigma(size) if sigma is None else sigma
    heat = render_heatmap(marks[1], size, size, sigma, heatmap_mode)
    return ModelInput(images[0], images[1], marks[0], marks[1], heat, (dx, dy), flip)


def model_image(img: np.ndarray, size: int = 64) -> np.ndarray:
    """Canvas image -> center-cropped, downsampled model image."""
    off = (CANVAS - CROP) // 2
    return np.ascontiguousarray(downsample(img[:, off : off + CROP, off : off + CROP], CROP // size))


def to_model_frame(landmarks: LandmarkSet, size: int = 64) -> LandmarkSet:
    """Canvas coordinates -> center-cropped model coordinates."""
    off = (CANVAS - CROP) // 2
    return resize_landmarks(crop_heatmap_coords(landmarks, (off, off)), size / CROP)


def collate(inputs: Sequence[ModelInput]) -> dict[str, np.ndarray]:
    return {
        "neutral": np.stack([m.image_neutral for m in inputs]),
        "expr": np.stack([m.image_expr for m in inputs]),
        "heatmap": np.stack([m.heatmap_expr for m in inputs]),
    }
