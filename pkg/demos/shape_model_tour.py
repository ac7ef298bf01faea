"""Walk through the landmark shape model on the synthetic faces.

Fits a PCA basis on aligned training shapes, moves one subject's smile onto
another subject's neutral face, and writes an interpolation strip of
aggregated heatmaps.

    python demos/shape_model_tour.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from exprsynth import data
from exprsynth.heatmap import default_sigma, export_heatmap, render_heatmap
from exprsynth.pipeline import interpolation_shapes
from exprsynth.shape_model import align_landmarks, fit_params, fit_shape_basis, transfer_shape


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ds = data.synthesize_dataset(20, seed=0)
    train = ds.subset("train")

    shapes = [align_landmarks(s.landmarks_expr, data.LEFT_EYE, data.RIGHT_EYE)[0] for s in train]
    basis = fit_shape_basis(shapes, variance_fraction=0.95)
    print(f"basis keeps {basis.N} of {2 * basis.K} directions for 95% of the variance")

    # the smile of the first training subject, re-anchored on another subject
    source = next(s for s in train if s.expression == "happy" and s.intensity == 1.0)
    target = next(s for s in train if s.subject_id != source.subject_id)
    params = fit_params(basis, source.landmarks_neutral, source.landmarks_expr)
    moved = transfer_shape(basis, target.landmarks_neutral, params)
    shift = np.abs(moved.points - target.landmarks_neutral.points).max(axis=1)
    print("largest landmark moves after transfer:", np.round(np.sort(shift)[-4:], 2))

    size = 64
    sigma = default_sigma(size)
    frames = interpolation_shapes(basis, data.to_model_frame(target.landmarks_neutral, size), params, 5)
    for i, lm in enumerate(frames):
        export_heatmap(render_heatmap(lm, size, size, sigma, "aggregated"), out, f"interp_{i}")
    print(f"wrote {len(frames)} heatmap frames to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/shape"))
