"""Command-line entry points: dataset, shape, train, infer, evaluate."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, experiment, pipeline
from .config import ConfigError, RunConfig, load_config
from .heatmap import default_sigma, export_heatmap, heatmap_peaks, render_heatmap
from .shape_model import (
    LandmarkSet,
    ShapeModelError,
    align_landmarks,
    fit_params,
    fit_shape_basis,
    load_basis,
    read_landmarks,
    save_basis,
    transfer_shape,
    write_landmarks,
)

log = logging.getLogger("exprsynth")


class CommandError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    train_updates = {}
    if args.seed is not None:
        train_updates["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        train_updates["iterations"] = args.iterations
    if train_updates:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train_updates))
    if getattr(args, "data", None):
        cfg = dataclasses.replace(cfg, dataset=args.data)
    return cfg


def out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def dataset_dir(cfg: RunConfig) -> str:
    if not cfg.dataset:
        raise CommandError("no dataset given (use --data or set dataset in the config)")
    return cfg.dataset


def to_model(image: np.ndarray, landmarks: LandmarkSet, size: int) -> tuple[np.ndarray, LandmarkSet]:
    """Accept canvas-sized (144) or model-sized inputs."""
    side = image.shape[-1]
    if side == data.CANVAS:
        return data.model_image(image, size), data.to_model_frame(landmarks, size)
    if side == size:
        return image, landmarks
    raise CommandError(f"image is {side}x{side}; expected {data.CANVAS} (canvas) or {size} (model size)")


def model_landmarks(landmarks: LandmarkSet, image_side: int, size: int) -> LandmarkSet:
    return data.to_model_frame(landmarks, size) if image_side == data.CANVAS else landmarks


def grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile equally sized [C, H, W] images row by row on a white background."""
    c, h, w = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    out = np.ones((c, len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[:, y : y + h, x : x + w] = img
    return out


def write_lines(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


# ----------------------------------------------------------------- dataset


def cmd_dataset(args) -> int:
    cfg = resolve_config(args)
    if args.action == "gen":
        out = out_dir(args)
        manifest = data.make_dataset(
            out,
            n_subjects=args.subjects if args.subjects is not None else cfg.subjects,
            expressions_per_subject=args.expressions,
            seed=cfg.train.seed,
            n_test_subjects=args.test_subjects if args.test_subjects is not None else cfg.test_subjects,
        )
        print(f"wrote {manifest}")
        return 0
    ds = data.load_dataset(dataset_dir(cfg))
    n_fail = 0
    for s in ds.samples:
        for img, lm in ((s.image_neutral, s.landmarks_neutral), (s.image_expr, s.landmarks_expr)):
            maps = render_heatmap(lm, img.shape[1], img.shape[2], default_sigma(img.shape[1]))
            # an empty channel yields a NaN peak, which must count as a failure
            if not np.abs(heatmap_peaks(maps) - lm.points).max() <= 1.0:
                n_fail += 1
    if n_fail:
        raise CommandError(f"{n_fail} landmark sets not recovered from their heatmaps")
    train, test = set(ds.subjects("train")), set(ds.subjects("test"))
    print(f"ok: {len(ds.samples)} samples, {len(train)} train / {len(test)} test subjects, K={ds.samples[0].landmarks_expr.K}")
    return 0


# ------------------------------------------------------------------- shape


def training_shapes(ds: data.Dataset) -> list[LandmarkSet]:
    shapes = []
    seen = set()
    for s in ds.subset("train"):
        if s.subject_id not in seen:
            seen.add(s.subject_id)
            shapes.append(s.landmarks_neutral)
        shapes.append(s.landmarks_expr)
    return [align_landmarks(lm, data.LEFT_EYE, data.RIGHT_EYE)[0] for lm in shapes]


def cmd_shape(args) -> int:
    out = out_dir(args)
    if args.action == "fit":
        cfg = resolve_config(args)
        ds = data.load_dataset(dataset_dir(cfg))
        basis = fit_shape_basis(training_shapes(ds), n_components=args.components, variance_fraction=args.variance)
        path = out / "basis.g2sb"
        save_basis(path, basis)
        if load_basis(path).basis.tobytes() != basis.basis.tobytes():
            raise CommandError("basis did not round-trip")
        print(f"wrote {path} (K={basis.K}, N={basis.N})")
        return 0
    basis = load_basis(args.basis)
    if args.action == "transfer":
        target_neutral = read_landmarks(args.target_neutral)
        if args.params_zero:
            params = np.zeros(basis.N)
        else:
            if not (args.source and args.source_neutral):
                raise CommandError("transfer needs --source and --source-neutral (or --params-zero)")
            params = fit_params(basis, read_landmarks(args.source_neutral), read_landmarks(args.source))
        shape = transfer_shape(basis, target_neutral, params)
        write_landmarks(out / "transferred.lmk", shape)
        np.savetxt(out / "params.txt", params)
        print(f"wrote {out / 'transferred.lmk'}")
        return 0
    neutral = read_landmarks(args.neutral)
    params = fit_params(basis, neutral, read_landmarks(args.target))
    shapes = pipeline.interpolation_shapes(basis, neutral, params, args.steps)
    for i, lm in enumerate(shapes):
        write_landmarks(out / f"frame_{i:03d}.lmk", lm)
        if args.heatmap_size:
            export_heatmap(render_heatmap(lm, args.heatmap_size, args.heatmap_size, default_sigma(args.heatmap_size), "aggregated"), out, f"frame_{i:03d}")
    print(f"wrote {len(shapes)} landmark files to {out}")
    return 0


# ------------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = data.load_dataset(dataset_dir(cfg))
    identity = None
    if args.identity:
        identity = experiment.load_identity(args.identity, cfg, ds.samples[0].image_neutral.shape[0])
    out = out_dir(args)

    def progress(report):
        if report.iteration % max(1, cfg.train.iterations // 20) == 0:
            log.info("iter %d: G %.4f  D %.4f", report.iteration, report.g_total, report.d_adv)

    try:
        run = experiment.run_training(cfg, ds, out, identity=identity, resume_from=args.resume, progress=progress)
    except Exception as exc:
        dump = out / "failure_state.g2ck"
        if dump.exists():
            print(f"diagnostic state: {dump}", file=sys.stderr)
        raise CommandError(str(exc)) from exc
    if run.identity is not None:
        print(f"identity net held-out accuracy {run.identity.heldout_accuracy:.3f}")
    print(f"final checkpoint {run.train.checkpoints[-1]}")
    return 0


# ------------------------------------------------------------------- infer


def load_models(args, cfg: RunConfig, channels: int, k: int):
    if not Path(args.checkpoint).is_file():
        raise CommandError(f"checkpoint not found: {args.checkpoint}")
    return experiment.load_nets(args.checkpoint, cfg, channels, k)


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    size = cfg.train.image_size
    out = out_dir(args)
    image = data.read_image(args.image)
    landmarks = read_landmarks(args.landmarks)
    nets = load_models(args, cfg, image.shape[0], landmarks.K)
    img, lm = to_model(image, landmarks, size)
    sigma = cfg.train.sigma
    if args.action == "remove":
        result = pipeline.remove_expression(nets.g_neutral, img, lm, sigma)
        data.write_image(out / "removed.pgm", result)
        data.write_image(out / "grid.pgm", grid([[img, result]]))
        print(f"ssim vs input {pipeline.ssim(img, result):.4f}")
    elif args.action == "synthesize":
        target = model_landmarks(read_landmarks(args.target_landmarks), image.shape[-1], size)
        result = pipeline.synthesize_expression(nets.g_expr, img, target, sigma)
        data.write_image(out / "synthesized.pgm", result)
        data.write_image(out / "grid.pgm", grid([[img, result]]))
        print(f"ssim vs input {pipeline.ssim(img, result):.4f}")
    elif args.action == "transfer":
        basis = load_basis(args.basis)
        image_b = data.read_image(args.image_b)
        img_b, lm_b = to_model(image_b, read_landmarks(args.landmarks_b), size)
        request = pipeline.TransferRequest(
            img, lm, img_b, lm_b,
            model_landmarks(read_landmarks(args.neutral_landmarks), image.shape[-1], size),
            model_landmarks(read_landmarks(args.neutral_landmarks_b), image_b.shape[-1], size),
        )
        res = pipeline.expression_transfer(request, nets.g_neutral, nets.g_expr, basis, sigma)
        data.write_image(out / "transfer_ab.pgm", res.image_ab)
        data.write_image(out / "transfer_ba.pgm", res.image_ba)
        data.write_image(out / "grid.pgm", grid([[img, res.neutral_a, res.image_ab], [img_b, res.neutral_b, res.image_ba]]))
        print(f"wrote {out / 'transfer_ab.pgm'} and {out / 'transfer_ba.pgm'}")
    else:
        basis = load_basis(args.basis)
        target = model_landmarks(read_landmarks(args.target_landmarks), image.shape[-1], size)
        params = fit_params(basis, lm, target)
        frames = pipeline.interpolate_expression(nets.g_expr, img, basis, lm, params, args.steps, sigma)
        for i, frame in enumerate(frames):
            data.write_image(out / f"frame_{i:03d}.pgm", frame)
        data.write_image(out / "grid.pgm", grid([frames]))
        print(f"wrote {len(frames)} frames and a grid to {out}")
    return 0


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    ds = data.load_dataset(dataset_dir(cfg))
    k = ds.samples[0].landmarks_expr.K
    nets = load_models(args, cfg, ds.samples[0].image_neutral.shape[0], k)
    out = out_dir(args)
    cfg.write(out / experiment.CONFIG_FILE)
    if args.action == "metrics":
        test = ds.subset("test")
        report = pipeline.evaluate_pairs(nets.g_expr, nets.g_neutral, test, cfg.train.image_size, cfg.train.sigma)
        write_lines(out / "metrics.tsv", report.to_text())
        rows = []
        for s in test[: args.grid_rows]:
            m = data.preprocess(s, "test", size=cfg.train.image_size, sigma=cfg.train.sigma)
            rows.append([
                m.image_neutral, m.image_expr,
                pipeline.remove_expression(nets.g_neutral, m.image_expr, m.landmarks_expr, cfg.train.sigma),
                pipeline.synthesize_expression(nets.g_expr, m.image_neutral, m.landmarks_expr, cfg.train.sigma),
            ])
        if rows:
            data.write_image(out / "grid.pgm", grid(rows))
        for key, value in report.aggregates().items():
            print(f"{key}\t{value:.4f}")
        return 0
    rec = experiment.recognition_protocol(nets, ds, "test", self_match=args.self_match)
    write_lines(out / "recognition.tsv", rec.to_text())
    print(rec.to_text(), end="")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # the global flags are accepted before or after the subcommand; the
        # subcommand copy must not overwrite values given before it
        g = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
        g.add_argument("--config", help="key = value run configuration file")
        g.add_argument("--seed", type=int, help="override the configured seed")
        g.add_argument("--out", help="output directory (default: current directory)")
        g.add_argument("-v", "--verbose", action="store_true")
        return g

    parser = argparse.ArgumentParser(prog="exprsynth", description="Geometry-guided facial expression synthesis.", parents=[global_flags(False)])
    parser.set_defaults(out=".", verbose=False)
    common = global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="generate or validate a synthetic dataset")
    p.add_argument("action", choices=["gen", "validate"])
    p.add_argument("--data", help="dataset directory (validate)")
    p.add_argument("--subjects", type=int)
    p.add_argument("--expressions", type=int, default=6)
    p.add_argument("--test-subjects", type=int)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("shape", parents=[common], help="fit the shape model, transfer or interpolate shapes")
    p.add_argument("action", choices=["fit", "transfer", "interp"])
    p.add_argument("--data")
    p.add_argument("--components", type=int)
    p.add_argument("--variance", type=float)
    p.add_argument("--basis")
    p.add_argument("--source")
    p.add_argument("--source-neutral")
    p.add_argument("--target-neutral")
    p.add_argument("--params-zero", action="store_true")
    p.add_argument("--neutral")
    p.add_argument("--target")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--heatmap-size", type=int, default=0, help="also export aggregated heatmap previews at this size")
    p.set_defaults(func=cmd_shape)

    p = sub.add_parser("train", parents=[common], help="pretrain F and train both generators")
    p.add_argument("--data")
    p.add_argument("--iterations", type=int)
    p.add_argument("--identity", help="reuse a frozen identity checkpoint")
    p.add_argument("--resume", help="resume from a training checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="run trained generators")
    p.add_argument("action", choices=["remove", "synthesize", "transfer", "interpolate"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--target-landmarks")
    p.add_argument("--neutral-landmarks")
    p.add_argument("--image-b")
    p.add_argument("--landmarks-b")
    p.add_argument("--neutral-landmarks-b")
    p.add_argument("--basis")
    p.add_argument("--steps", type=int, default=7)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="image-quality or recognition evaluation on the test split")
    p.add_argument("action", choices=["metrics", "recognition"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--grid-rows", type=int, default=6)
    p.add_argument("--self-match", action="store_true", help="use gallery images as probes (smoke check)")
    p.set_defaults(func=cmd_evaluate)
    return parser


REQUIRED = {
    ("infer", "synthesize"): ("target_landmarks",),
    ("infer", "interpolate"): ("target_landmarks", "basis"),
    ("infer", "transfer"): ("basis", "neutral_landmarks", "image_b", "landmarks_b", "neutral_landmarks_b"),
    ("shape", "transfer"): ("basis", "target_neutral"),
    ("shape", "interp"): ("basis", "neutral", "target"),
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    missing = [f"--{m.replace('_', '-')}" for m in REQUIRED.get((args.command, getattr(args, "action", None)), ()) if not getattr(args, m)]
    if missing:
        parser.error(f"{args.command} {args.action} requires {', '.join(missing)}")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ShapeModelError, data.DatasetError, pipeline.PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
