"""Four-term generator objective, alternating GAN updates and the training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, NonFiniteError, Tape, Tensor, clip_global_norm, load_checkpoint, no_grad, ops, save_checkpoint
from .data import Sample, collate, preprocess, stream_rng
from .heatmap import default_sigma
from .networks import (
    DiscriminatorConfig,
    DiscriminatorNet,
    GeneratorConfig,
    GeneratorNet,
    IdentityNet,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha1: float = 10.0
    alpha2: float = 5.0
    alpha3_start: float = 0.1
    alpha3_end: float = 0.5
    alpha3_knee: float = 0.8
    learning_rate: float = 1e-3
    disc_lr_scale: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 5
    iterations: int = 3200
    seed: int = 0
    image_size: int = 64
    sigma: float | None = None
    heatmap_mode: str = "per-point"
    checkpoint_every: int = 800
    clip_norm: float | None = None
    gen_channels: tuple[int, ...] = (16, 32, 64, 128)
    gen_residual: bool = True
    disc_channels: tuple[int, ...] = (16, 32, 64)
    disc_strides: tuple[int, ...] = (2, 2, 1)

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3_start", "alpha3_end"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.learning_rate < 0 or self.disc_lr_scale < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if self.sigma is None:
            self.sigma = default_sigma(self.image_size)

    @property
    def depth(self) -> int:
        return int(np.log2(self.image_size))


# -------------------------------------------------------------------- losses


def generator_adv_loss(d_logits_on_fake: Tensor) -> Tensor:
    """-mean log D(fake), with D = sigmoid(logit)."""
    return ops.scalar_mul(ops.mean(ops.log(ops.sigmoid(d_logits_on_fake))), -1.0)


def discriminator_adv_loss(d_logits_real: Tensor, d_logits_fake: Tensor) -> Tensor:
    """mean log(1 - D(real)) + mean log D(fake); the discriminator minimizes it.

    ``1 - sigmoid(x)`` is evaluated as ``sigmoid(-x)``; the log floor at
    1e-12 bounds each term below by ln(1e-12).
    """
    real = ops.mean(ops.log(ops.sigmoid(ops.scalar_mul(d_logits_real, -1.0))))
    fake = ops.mean(ops.log(ops.sigmoid(d_logits_fake)))
    return ops.add(real, fake)


def _l1(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"L1 shape mismatch: {a.shape} vs {b.shape}")
    return ops.abs_mean(ops.sub(a, b))


def pixel_loss(generated: Tensor, target: Tensor) -> Tensor:
    return _l1(generated, target)


def cycle_loss(original: Tensor, reconstructed: Tensor) -> Tensor:
    return _l1(original, reconstructed)


def identity_loss(feature_net: Callable[[Tensor], Tensor], original: Tensor, generated: Tensor) -> Tensor:
    if original.shape != generated.shape:
        raise ValueError(f"identity loss shape mismatch: {original.shape} vs {generated.shape}")
    with no_grad():
        target = feature_net(original.detach())
    return _l1(feature_net(generated), target)


def total_generator_loss(g_adv, pixel, cyc, identity, alpha1: float, alpha2: float, alpha3: float):
    """``g_adv + alpha1 * pixel + alpha2 * cyc + alpha3 * identity`` for tensors or floats."""
    if min(alpha1, alpha2, alpha3) < 0:
        raise ValueError("loss weights must be non-negative")
    if isinstance(g_adv, Tensor):
        return ops.add(
            ops.add(g_adv, ops.scalar_mul(pixel, alpha1)),
            ops.add(ops.scalar_mul(cyc, alpha2), ops.scalar_mul(identity, alpha3)),
        )
    return (g_adv + alpha1 * pixel) + (alpha2 * cyc + alpha3 * identity)


def alpha3_schedule(iteration: int, total: int, start: float = 0.1, end: float = 0.5, knee: float = 0.8) -> float:
    """Linear ramp from ``start`` at 0 to ``end`` at ``knee * total``, flat after."""
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    frac = min(iteration / (knee * total), 1.0)
    return start + (end - start) * frac


# --------------------------------------------------------------------- nets


@dataclass
class Nets:
    g_expr: GeneratorNet  # neutral -> expression
    g_neutral: GeneratorNet  # expression -> neutral
    d_expr: DiscriminatorNet
    d_neutral: DiscriminatorNet
    identity: IdentityNet

    def trainable(self) -> dict[str, GeneratorNet | DiscriminatorNet]:
        return {"g_expr": self.g_expr, "g_neutral": self.g_neutral, "d_expr": self.d_expr, "d_neutral": self.d_neutral}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for name, net in self.trainable().items():
            state.update(net.state_dict(prefix=f"{name}."))
        state.update(self.identity.state_dict(prefix="identity."))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, net in self.trainable().items():
            net.load_state_dict(state, prefix=f"{name}.")
        self.identity.load_state_dict(state, prefix="identity.")

    def eval(self) -> "Nets":
        for net in self.trainable().values():
            net.eval()
        return self


def build_nets(config: TrainConfig, identity: IdentityNet, image_channels: int = 1, heatmap_channels: int = 18) -> Nets:
    k = heatmap_channels if config.heatmap_mode == "per-point" else 1
    gcfg = GeneratorConfig(image_channels, k, tuple(config.gen_channels), config.depth, config.gen_residual)
    dcfg = DiscriminatorConfig(image_channels, k, tuple(config.disc_channels), tuple(config.disc_strides))
    rng = stream_rng(config.seed, "init")
    nets = Nets(
        GeneratorNet(gcfg, rng), GeneratorNet(gcfg, rng),
        DiscriminatorNet(dcfg, rng), DiscriminatorNet(dcfg, rng),
        identity,
    )
    identity.eval().requires_grad_(False)
    return nets


# --------------------------------------------------------------------- step


@dataclass
class LossReport:
    iteration: int
    g_adv: float
    pixel: float
    cyc: float
    identity: float
    g_total: float
    d_adv_expr: float
    d_adv_neutral: float
    alpha3: float
    grad_norm_g: float = float("nan")
    grad_norm_d: float = float("nan")

    @property
    def d_adv(self) -> float:
        return self.d_adv_expr + self.d_adv_neutral

    def log_line(self) -> str:
        vals = [self.g_adv, self.pixel, self.cyc, self.identity, self.g_total, self.d_adv, self.alpha3]
        return "\t".join([str(self.iteration)] + [repr(float(v)) for v in vals])


LOG_COLUMNS = ("iteration", "g_adv", "pixel", "cyc", "identity", "g_total", "d_adv", "alpha3")


def parse_log_line(line: str) -> dict[str, float]:
    parts = line.rstrip("\n").split("\t")
    return {k: (int(v) if k == "iteration" else float(v)) for k, v in zip(LOG_COLUMNS, parts)}


@dataclass
class Trainer:
    nets: Nets
    config: TrainConfig
    opt_g: Adam = field(init=False)
    opt_d: Adam = field(init=False)

    def __post_init__(self):
        cfg = self.config
        hyper = dict(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
        self.opt_g = Adam(
            self.nets.g_expr.named_parameters("g_expr.") + self.nets.g_neutral.named_parameters("g_neutral."), **hyper
        )
        hyper["lr"] = cfg.learning_rate * cfg.disc_lr_scale
        self.opt_d = Adam(
            self.nets.d_expr.named_parameters("d_expr.") + self.nets.d_neutral.named_parameters("d_neutral."), **hyper
        )

    def _apply(self, opt: Adam, grads: list[np.ndarray]) -> float:
        norm = float("nan")
        if self.config.clip_norm is not None:
            grads, norm = clip_global_norm(grads, self.config.clip_norm)
        opt.step(grads)
        return norm

    def train_step(self, batch: dict[str, np.ndarray], iteration: int) -> LossReport:
        """One discriminator update on detached fakes, then one generator update."""
        cfg, n = self.config, self.nets
        neutral, expr, heat = Tensor(batch["neutral"]), Tensor(batch["expr"]), Tensor(batch["heatmap"])
        alpha3 = alpha3_schedule(iteration, cfg.iterations, cfg.alpha3_start, cfg.alpha3_end, cfg.alpha3_knee)
        for net in n.trainable().values():
            net.train()
        try:
            with Tape() as g_tape:
                fake_expr = n.g_expr(neutral, heat)
                fake_neutral = n.g_neutral(expr, heat)

                with Tape() as d_tape:
                    d_e = discriminator_adv_loss(n.d_expr(neutral, heat, expr), n.d_expr(neutral, heat, fake_expr.detach()))
                    d_n = discriminator_adv_loss(n.d_neutral(expr, heat, neutral), n.d_neutral(expr, heat, fake_neutral.detach()))
                    d_loss = ops.add(d_e, d_n)
                d_grads = d_tape.gradient(d_loss, self.opt_d.tensors)
                norm_d = self._apply(self.opt_d, d_grads)

                for net in (n.d_expr, n.d_neutral):
                    net.requires_grad_(False)
                try:
                    g_adv = ops.add(
                        generator_adv_loss(n.d_expr(neutral, heat, fake_expr)),
                        generator_adv_loss(n.d_neutral(expr, heat, fake_neutral)),
                    )
                finally:
                    for net in (n.d_expr, n.d_neutral):
                        net.requires_grad_(True)
                pix = ops.add(pixel_loss(fake_expr, expr), pixel_loss(fake_neutral, neutral))
                terms = [g_adv, pix]
                if cfg.alpha2 > 0:
                    cyc = ops.add(
                        cycle_loss(neutral, n.g_neutral(fake_expr, heat)),
                        cycle_loss(expr, n.g_expr(fake_neutral, heat)),
                    )
                else:
                    with no_grad():
                        cyc = ops.add(
                            cycle_loss(neutral, n.g_neutral(fake_expr, heat)),
                            cycle_loss(expr, n.g_expr(fake_neutral, heat)),
                        )
                ident = ops.add(
                    identity_loss(n.identity, neutral, fake_expr),
                    identity_loss(n.identity, expr, fake_neutral),
                )
                g_loss = total_generator_loss(g_adv, pix, cyc, ident, cfg.alpha1, cfg.alpha2, alpha3)
            g_grads = g_tape.gradient(g_loss, self.opt_g.tensors)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value at iteration {iteration}: {exc}") from exc
        norm_g = self._apply(self.opt_g, g_grads)
        return LossReport(
            iteration, g_adv.item(), pix.item(), cyc.item(), ident.item(), g_loss.item(),
            d_e.item(), d_n.item(), alpha3, norm_g, norm_d,
        )

    # ------------------------------------------------------------ checkpoints

    def save(self, path, iteration: int) -> None:
        params = self.nets.state_dict()
        params["meta/iteration"] = np.asarray(float(iteration))
        optim = self.opt_g.state_arrays("opt_g") | self.opt_d.state_arrays("opt_d")
        save_checkpoint(path, params, optim)

    def load(self, path) -> int:
        params, optim = load_checkpoint(path)
        self.nets.load_state_dict(params)
        self.opt_g.load_state_arrays("opt_g", optim)
        self.opt_d.load_state_arrays("opt_d", optim)
        return int(params["meta/iteration"])


def train_step(nets: Nets, batch: dict[str, np.ndarray], config: TrainConfig, iteration: int, trainer: Trainer | None = None) -> LossReport:
    return (trainer or Trainer(nets, config)).train_step(batch, iteration)


def batch_indices(n_samples: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Samples for ``iteration``: consecutive slices of per-epoch permutations.

    Stateless in the iteration number, so a resumed run draws the same data.
    """
    start = iteration * batch_size
    idx = []
    for pos in range(start, start + batch_size):
        epoch, offset = divmod(pos, n_samples)
        idx.append(stream_rng(seed, "data", epoch).permutation(n_samples)[offset])
    return np.asarray(idx)


def make_batch(samples: Sequence[Sample], config: TrainConfig, iteration: int) -> dict[str, np.ndarray]:
    idx = batch_indices(len(samples), config.batch_size, config.seed, iteration)
    rng = stream_rng(config.seed, "augmentation", iteration)
    inputs = [preprocess(samples[i], "train", rng, config.image_size, config.sigma, config.heatmap_mode) for i in idx]
    return collate(inputs)


@dataclass
class TrainResult:
    trainer: Trainer
    reports: list[LossReport]
    checkpoints: list[Path]
    log_path: Path | None


def train_loop(
    config: TrainConfig,
    samples: Sequence[Sample],
    identity: IdentityNet,
    out_dir=None,
    resume_from=None,
    stop_at: int | None = None,
    progress: Callable[[LossReport], None] | None = None,
) -> TrainResult:
    """Run ``config.iterations`` alternating updates.

    Writes ``loss_log.tsv`` (appended one line per iteration) and
    ``ckpt_XXXXXX.g2ck`` every ``checkpoint_every`` iterations plus at the
    end.  ``stop_at`` ends the run early (for resume tests) after writing a
    checkpoint.
    """
    if not samples:
        raise TrainingError("training dataset is empty")
    k = samples[0].landmarks_expr.K
    nets = build_nets(config, identity, samples[0].image_neutral.shape[0], k)
    trainer = Trainer(nets, config)
    start = 0
    if resume_from is not None:
        start = trainer.load(resume_from)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss_log.tsv", "a" if resume_from is not None else "w")
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    reports, ckpts = [], []
    try:
        for it in range(start, end):
            report = trainer.train_step(make_batch(samples, config, it), it)
            reports.append(report)
            if log_fh is not None:
                log_fh.write(report.log_line() + "\n")
                log_fh.flush()
            if progress is not None:
                progress(report)
            done = it + 1
            if out is not None and (done % config.checkpoint_every == 0 or done == end):
                path = out / f"ckpt_{done:06d}.g2ck"
                try:
                    trainer.save(path, done)
                except OSError as exc:
                    raise TrainingError(f"checkpoint write failed: {path} ({exc})") from exc
                ckpts.append(path)
    except TrainingError:
        if out is not None:
            dump = out / "failure_state.g2ck"
            trainer.save(dump, it)
            log.error("diagnostic state written to %s", dump)
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    nets.eval()
    return TrainResult(trainer, reports, ckpts, out / "loss_log.tsv" if out is not None else None)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
