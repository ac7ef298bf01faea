"""Glue shared by the command line and the acceptance suite: identity
pretraining on a dataset, full training runs, model reloading and the
recognition protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, Sample, model_image, to_model_frame
from .networks import IdentityConfig, IdentityNet, IdentityTrainResult, pretrain_identity
from .pipeline import RecognitionResult, embed, expression_invariant_probe_transform, recognition_eval
from .training import Nets, TrainConfig, TrainResult, build_nets, train_loop

log = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
IDENTITY_FILE = "identity.g2ck"


def identity_config(cfg: RunConfig, n_identities: int, image_channels: int = 1) -> IdentityConfig:
    return IdentityConfig(
        image_channels=image_channels,
        image_size=cfg.train.image_size,
        channels=tuple(cfg.identity_channels),
        embedding_dim=cfg.embedding_dim,
        n_identities=n_identities,
    )


def identity_images(samples: list[Sample], size: int = 64) -> tuple[np.ndarray, list[str]]:
    """Distinct model-resolution images with their subject ids (each neutral once)."""
    images, ids, seen = [], [], set()
    for s in samples:
        if s.subject_id not in seen:
            seen.add(s.subject_id)
            images.append(model_image(s.image_neutral, size))
            ids.append(s.subject_id)
        images.append(model_image(s.image_expr, size))
        ids.append(s.subject_id)
    return np.stack(images), ids


def train_identity(samples: list[Sample], cfg: RunConfig, holdout_every: int = 4) -> IdentityTrainResult:
    """Pretrain F on the subjects in ``samples``; every ``holdout_every``-th
    image of each subject is held out to measure accuracy."""
    images, ids = identity_images(samples, cfg.train.image_size)
    subjects = sorted(set(ids))
    labels = np.array([subjects.index(i) for i in ids])
    rank = np.zeros(len(ids), dtype=int)
    for sid in subjects:
        where = [j for j, i in enumerate(ids) if i == sid]
        rank[where] = np.arange(len(where))
    held = rank % holdout_every == holdout_every - 1
    return pretrain_identity(
        images[~held], labels[~held], images[held], labels[held],
        config=identity_config(cfg, len(subjects), images.shape[1]),
        iterations=cfg.identity_iterations,
        batch_size=cfg.identity_batch_size,
        lr=cfg.identity_lr,
        seed=cfg.train.seed,
    )


def save_identity(path, net: IdentityNet) -> None:
    state = net.state_dict()
    state["meta/n_identities"] = np.asarray(float(net.config.n_identities))
    save_checkpoint(path, state)


def load_identity(path, cfg: RunConfig, image_channels: int = 1) -> IdentityNet:
    state, _ = load_checkpoint(path)
    net = IdentityNet(identity_config(cfg, int(state.pop("meta/n_identities")), image_channels), np.random.default_rng(0))
    net.load_state_dict(state)
    return net.eval().requires_grad_(False)


@dataclass
class RunOutputs:
    identity: IdentityTrainResult | None
    train: TrainResult


def run_training(
    cfg: RunConfig,
    dataset: Dataset,
    out_dir,
    identity: IdentityNet | None = None,
    resume_from=None,
    stop_at: int | None = None,
    progress=None,
) -> RunOutputs:
    """Write the resolved config, pretrain (or reuse) F on the training
    subjects, then run the adversarial training loop."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_FILE)
    samples = dataset.subset("train")
    ident_result = None
    if identity is None:
        ident_result = train_identity(samples, cfg)
        log.info("identity net: train %.3f, held-out %.3f", ident_result.train_accuracy, ident_result.heldout_accuracy)
        identity = ident_result.net
    save_identity(out / IDENTITY_FILE, identity)
    result = train_loop(cfg.train, samples, identity, out, resume_from=resume_from, stop_at=stop_at, progress=progress)
    return RunOutputs(ident_result, result)


def load_nets(checkpoint, cfg: RunConfig, image_channels: int = 1, n_landmarks: int = 18) -> Nets:
    """Rebuild all networks from a training checkpoint (which includes F)."""
    state, _ = load_checkpoint(checkpoint)
    n_ids = state["identity.head.weight"].shape[-1]
    identity = IdentityNet(identity_config(cfg, n_ids, image_channels), np.random.default_rng(0))
    nets = build_nets(cfg.train, identity, image_channels, n_landmarks)
    nets.load_state_dict(state)
    return nets.eval()


@dataclass
class RecognitionReport:
    original: RecognitionResult
    transformed: RecognitionResult
    n_gallery: int
    n_probe: int

    def to_text(self) -> str:
        return "\n".join([
            "setting\trank1\ttar_far1\ttar_far0.1",
            self.original.row("original"),
            self.transformed.row("expression_removed"),
        ]) + "\n"


def recognition_protocol(nets: Nets, dataset: Dataset, which: str = "test", self_match: bool = False) -> RecognitionReport:
    """Gallery: each subject's neutral image. Probes: its expressive images,
    scored as-is and after expression removal."""
    samples = dataset.subset(which)
    if not samples:
        raise ValueError(f"no samples in split {which!r}")
    size = nets.identity.config.image_size
    subjects = sorted({s.subject_id for s in samples})
    first = {sid: next(s for s in samples if s.subject_id == sid) for sid in subjects}
    gallery_images = np.stack([model_image(first[sid].image_neutral, size) for sid in subjects])
    if self_match:
        probe_images, probe_ids, probe_marks = gallery_images, subjects, [to_model_frame(first[s].landmarks_neutral, size) for s in subjects]
    else:
        probe_images = np.stack([model_image(s.image_expr, size) for s in samples])
        probe_ids = [s.subject_id for s in samples]
        probe_marks = [to_model_frame(s.landmarks_expr, size) for s in samples]
    g_feat = embed(nets.identity, gallery_images)
    gallery = list(zip(subjects, g_feat))
    original = recognition_eval(gallery, list(zip(probe_ids, embed(nets.identity, probe_images))))
    removed = np.stack(expression_invariant_probe_transform(nets.g_neutral, list(zip(probe_images, probe_marks))))
    transformed = recognition_eval(gallery, list(zip(probe_ids, embed(nets.identity, removed))))
    return RecognitionReport(original, transformed, len(gallery), len(probe_ids))

