"""Train both generators for a few hundred iterations at reduced size and report quality.

This is a smoke-scale run (32x32 images, 200 iterations) that finishes in a
few minutes on one core; the full desk-scale run is ``exprsynth train`` with
the default configuration.

    python demos/quick_training.py [out_dir]
"""

import sys
from pathlib import Path

from exprsynth import data, experiment
from exprsynth.config import RunConfig
from exprsynth.pipeline import evaluate_pairs
from exprsynth.training import TrainConfig


def main(out: Path) -> None:
    train_cfg = TrainConfig(image_size=32, iterations=200, checkpoint_every=100)
    cfg = RunConfig(train=train_cfg, identity_iterations=150)
    ds = data.synthesize_dataset(cfg.subjects, seed=train_cfg.seed, n_test_subjects=cfg.test_subjects)

    def progress(report):
        if report.iteration % 50 == 0:
            print(f"iter {report.iteration:4d}  pixel {report.pixel:.4f}  cycle {report.cyc:.4f}  D {report.d_adv:.2f}")

    run = experiment.run_training(cfg, ds, out, progress=progress)
    print(f"identity net held-out accuracy {run.identity.heldout_accuracy:.3f}")

    nets = run.train.trainer.nets
    report = evaluate_pairs(nets.g_expr, nets.g_neutral, ds.subset("test"), size=train_cfg.image_size)
    copy = report.mean("copy_synthesis_ssim")
    print(f"held-out SSIM  removal {report.mean('removal_ssim'):.4f}  synthesis {report.mean('synthesis_ssim'):.4f}  copy baseline {copy:.4f}")
    (out / "metrics.tsv").write_text(report.to_text())


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/train"))
