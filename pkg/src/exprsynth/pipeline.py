"""Inference procedures built on the trained generators, and evaluation metrics."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .autodiff import Tensor, no_grad
from .data import Sample, preprocess
from .heatmap import default_sigma, render_heatmap
from .networks import GeneratorNet, IdentityNet
from .shape_model import LandmarkSet, ShapeBasis, fit_params, interpolate_params, shape_from_params, transfer_shape

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------- inference


@contextmanager
def _eval_mode(net):
    was = net.training
    net.eval()
    try:
        yield net
    finally:
        net.train(was)


def _heatmap_for(net: GeneratorNet, landmarks: LandmarkSet, size: int, sigma: float | None) -> np.ndarray:
    k = net.config.heatmap_channels
    mode = "per-point" if k == landmarks.K else "aggregated"
    if mode == "aggregated" and k != 1:
        raise ValueError(f"generator expects {k} heatmap channels, landmarks have K={landmarks.K}")
    return render_heatmap(landmarks, size, size, default_sigma(size) if sigma is None else sigma, mode)


def run_generator(net: GeneratorNet, images: np.ndarray, landmarks: Sequence[LandmarkSet], sigma: float | None = None) -> np.ndarray:
    """Evaluation-mode forward of ``net`` on ``images[B, C, S, S]`` conditioned on per-image landmarks."""
    if images.ndim != 4 or len(landmarks) != images.shape[0]:
        raise ValueError("need one landmark set per image in a [B, C, S, S] batch")
    size = images.shape[-1]
    heat = np.stack([_heatmap_for(net, lm, size, sigma) for lm in landmarks])
    with _eval_mode(net), no_grad():
        return net(Tensor(images), Tensor(heat)).data


def remove_expression(g_neutral: GeneratorNet, image: np.ndarray, landmarks: LandmarkSet, sigma: float | None = None) -> np.ndarray:
    """Neutral face from an expressive ``image[C, S, S]`` and its own landmarks."""
    return run_generator(g_neutral, image[None], [landmarks], sigma)[0]


def synthesize_expression(g_expr: GeneratorNet, neutral_image: np.ndarray, target_landmarks: LandmarkSet, sigma: float | None = None) -> np.ndarray:
    """Expressive face whose geometry follows ``target_landmarks``."""
    return run_generator(g_expr, neutral_image[None], [target_landmarks], sigma)[0]


@dataclass
class TransferRequest:
    image_a: np.ndarray
    landmarks_a: LandmarkSet
    image_b: np.ndarray
    landmarks_b: LandmarkSet
    # neutral shapes of both subjects; supplied because landmark detection is external
    neutral_landmarks_a: LandmarkSet
    neutral_landmarks_b: LandmarkSet

    def validate(self, basis: ShapeBasis) -> None:
        for lm in (self.landmarks_a, self.landmarks_b, self.neutral_landmarks_a, self.neutral_landmarks_b):
            if lm.K != basis.K:
                raise PipelineError("request", f"landmark count {lm.K} does not match basis K={basis.K}")


@dataclass
class TransferResult:
    neutral_a: np.ndarray
    neutral_b: np.ndarray
    params_a: np.ndarray
    params_b: np.ndarray
    shape_ab: LandmarkSet
    shape_ba: LandmarkSet
    image_ab: np.ndarray
    image_ba: np.ndarray


def expression_transfer(
    request: TransferRequest,
    g_neutral: GeneratorNet,
    g_expr: GeneratorNet,
    basis: ShapeBasis,
    sigma: float | None = None,
) -> TransferResult:
    """Swap expressions between faces A and B.

    Stages: remove both expressions, fit each face's shape parameters about
    its own neutral shape, re-anchor each parameter vector on the other
    subject's neutral shape, synthesize.
    """
    request.validate(basis)
    try:
        neutral_a = remove_expression(g_neutral, request.image_a, request.landmarks_a, sigma)
        neutral_b = remove_expression(g_neutral, request.image_b, request.landmarks_b, sigma)
    except Exception as exc:
        raise PipelineError("remove", str(exc)) from exc
    try:
        p_a = fit_params(basis, request.neutral_landmarks_a, request.landmarks_a)
        p_b = fit_params(basis, request.neutral_landmarks_b, request.landmarks_b)
    except Exception as exc:
        raise PipelineError("fit", str(exc)) from exc
    try:
        s_ab = transfer_shape(basis, request.neutral_landmarks_a, p_b)
        s_ba = transfer_shape(basis, request.neutral_landmarks_b, p_a)
    except Exception as exc:
        raise PipelineError("swap", str(exc)) from exc
    try:
        i_ab = synthesize_expression(g_expr, neutral_a, s_ab, sigma)
        i_ba = synthesize_expression(g_expr, neutral_b, s_ba, sigma)
    except Exception as exc:
        raise PipelineError("synthesize", str(exc)) from exc
    return TransferResult(neutral_a, neutral_b, p_a, p_b, s_ab, s_ba, i_ab, i_ba)


def interpolation_shapes(basis: ShapeBasis, neutral_landmarks: LandmarkSet, target_params, steps: int) -> list[LandmarkSet]:
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    zero = np.zeros(basis.N)
    shapes = []
    for i in range(steps):
        t = i / (steps - 1)
        shapes.append(neutral_landmarks if i == 0 else shape_from_params(basis, neutral_landmarks, interpolate_params(zero, target_params, t)))
    return shapes


def interpolate_expression(
    g_expr: GeneratorNet,
    neutral_image: np.ndarray,
    basis: ShapeBasis,
    neutral_landmarks: LandmarkSet,
    target_params,
    steps: int,
    sigma: float | None = None,
) -> list[np.ndarray]:
    """Frames at t = 0, 1/(steps-1), ..., 1 along ``t * target_params``."""
    shapes = interpolation_shapes(basis, neutral_landmarks, target_params, steps)
    frames = run_generator(g_expr, np.repeat(neutral_image[None], steps, axis=0), shapes, sigma)
    return list(frames)


def expression_invariant_probe_transform(
    g_neutral: GeneratorNet, probes: Sequence[tuple[np.ndarray, LandmarkSet]], sigma: float | None = None, batch: int = 16
) -> list[np.ndarray]:
    """Replace each probe image by its expression-removed version."""
    out = []
    for s in range(0, len(probes), batch):
        chunk = probes[s : s + batch]
        out.extend(run_generator(g_neutral, np.stack([img for img, _ in chunk]), [lm for _, lm in chunk], sigma))
    return out


# ------------------------------------------------------------------ metrics


def _check_pair(reference: np.ndarray, candidate: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    for img in (a, b):
        if img.min() < 0 or img.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ValueError(f"expected [H, W] or [C, H, W] with C in (1, 3), got {a.shape}")
    return a, b


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a [3, H, W] image; single-channel images pass through."""
    return img[0] if img.shape[0] == 1 else np.tensordot(LUMA, img, axes=1)


def psnr(reference: np.ndarray, candidate: np.ndarray) -> float:
    """PSNR in dB on the luminance channel with peak 1.0, capped at 99 dB."""
    a, b = _check_pair(reference, candidate)
    mse = float(np.mean((luminance(a) - luminance(b)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    w = gaussian_window()
    if min(x.shape) < len(w):
        raise ValueError(f"image {x.shape} smaller than the {len(w)}x{len(w)} SSIM window")
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, L = 1) averaged over channels."""
    a, b = _check_pair(reference, candidate)
    return float(np.mean([ssim_channel(a[c], b[c]) for c in range(a.shape[0])]))


@dataclass
class RecognitionResult:
    rank1: float
    tar_at_far1: float
    tar_at_far01: float

    def row(self, label: str) -> str:
        return f"{label}\t{self.rank1:.2f}\t{self.tar_at_far1:.2f}\t{self.tar_at_far01:.2f}"


def cosine_similarity_matrix(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    p = probe / np.linalg.norm(probe, axis=1, keepdims=True)
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    return p @ g.T


def verification_threshold(impostor_scores: np.ndarray, far: float) -> float:
    """Score above which a fraction ``far`` of impostor scores lie (linear interpolation)."""
    return float(np.quantile(np.asarray(impostor_scores), 1.0 - far))


def recognition_from_scores(scores: np.ndarray, probe_ids: Sequence[Hashable], gallery_ids: Sequence[Hashable]) -> RecognitionResult:
    """Rank-1 and TAR@FAR (1%, 0.1%) from a probe x gallery similarity matrix."""
    gallery_ids = list(gallery_ids)
    if len(set(gallery_ids)) != len(gallery_ids):
        raise ValueError("gallery ids must be unique")
    if scores.size == 0:
        raise ValueError("empty probe or gallery set")
    probe_ids = list(probe_ids)
    same = np.array([[p == g for g in gallery_ids] for p in probe_ids])
    best = scores.argmax(axis=1)
    rank1 = 100.0 * float(np.mean([same[i, best[i]] for i in range(len(probe_ids))]))
    genuine, impostor = scores[same], scores[~same]
    tars = []
    for far in (0.01, 0.001):
        if genuine.size == 0 or impostor.size == 0:
            tars.append(float("nan"))
            continue
        thr = verification_threshold(impostor, far)
        tars.append(100.0 * float(np.mean(genuine > thr)))
    return RecognitionResult(rank1, tars[0], tars[1])


def recognition_eval(gallery: Sequence[tuple[Hashable, np.ndarray]], probe: Sequence[tuple[Hashable, np.ndarray]]) -> RecognitionResult:
    if not gallery or not probe:
        raise ValueError("gallery and probe sets must be non-empty")
    g = np.stack([np.asarray(f, dtype=np.float64) for _, f in gallery])
    p = np.stack([np.asarray(f, dtype=np.float64) for _, f in probe])
    if g.shape[1] != p.shape[1]:
        raise ValueError(f"feature dimensions differ: gallery {g.shape[1]}, probe {p.shape[1]}")
    return recognition_from_scores(cosine_similarity_matrix(p, g), [i for i, _ in probe], [i for i, _ in gallery])


def embed(net: IdentityNet, images: np.ndarray, batch: int = 64) -> np.ndarray:
    with _eval_mode(net), no_grad():
        return np.concatenate([net(Tensor(images[s : s + batch])).data for s in range(0, len(images), batch)])


# --------------------------------------------------------------- test sets


@dataclass
class PairMetrics:
    sample_id: str
    removal_ssim: float
    removal_psnr: float
    synthesis_ssim: float
    synthesis_psnr: float
    copy_removal_ssim: float
    copy_synthesis_ssim: float
    cycle_l1: float


@dataclass
class MetricReport:
    rows: list[PairMetrics] = field(default_factory=list)

    def mean(self, column: str) -> float:
        return float(np.mean([getattr(r, column) for r in self.rows]))

    def aggregates(self) -> dict[str, float]:
        return {k: self.mean(k) for k in ("removal_ssim", "removal_psnr", "synthesis_ssim", "synthesis_psnr")}

    def to_text(self) -> str:
        cols = ("removal_ssim", "removal_psnr", "synthesis_ssim", "synthesis_psnr")
        lines = ["sample_id\t" + "\t".join(cols)]
        lines += [r.sample_id + "\t" + "\t".join(repr(getattr(r, c)) for c in cols) for r in self.rows]
        lines.append("mean\t" + "\t".join(repr(self.mean(c)) for c in cols))
        return "\n".join(lines) + "\n"


def sample_key(s: Sample) -> str:
    return f"{s.subject_id}_{s.expression}_{round(s.intensity * 3)}"


def evaluate_pairs(
    g_expr: GeneratorNet,
    g_neutral: GeneratorNet,
    samples: Sequence[Sample],
    size: int = 64,
    sigma: float | None = None,
    batch: int = 16,
) -> MetricReport:
    """Synthesis and removal quality on center-cropped test pairs, with copy baselines."""
    report = MetricReport()
    inputs = [preprocess(s, "test", size=size, sigma=sigma) for s in samples]
    for start in range(0, len(inputs), batch):
        chunk = inputs[start : start + batch]
        neutral = np.stack([m.image_neutral for m in chunk])
        expr = np.stack([m.image_expr for m in chunk])
        marks = [m.landmarks_expr for m in chunk]
        fake_e = run_generator(g_expr, neutral, marks, sigma)
        fake_n = run_generator(g_neutral, expr, marks, sigma)
        rec_n = run_generator(g_neutral, fake_e, marks, sigma)
        rec_e = run_generator(g_expr, fake_n, marks, sigma)
        for i, m in enumerate(chunk):
            cyc = 0.5 * (np.abs(rec_n[i] - neutral[i]).mean() + np.abs(rec_e[i] - expr[i]).mean())
            report.rows.append(PairMetrics(
                sample_key(samples[start + i]),
                ssim(neutral[i], fake_n[i]), psnr(neutral[i], fake_n[i]),
                ssim(expr[i], fake_e[i]), psnr(expr[i], fake_e[i]),
                ssim(neutral[i], expr[i]), ssim(expr[i], neutral[i]),
                float(cyc),
            ))
    return report
