import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exprsynth.shape_model import (
    DegenerateGeometryError,
    LandmarkFormatError,
    LandmarkSet,
    ShapeBasis,
    ShapeModelError,
    SimilarityTransform,
    align_landmarks,
    fit_params,
    fit_shape_basis,
    interpolate_params,
    load_basis,
    read_landmarks,
    save_basis,
    semantic_prototypes,
    shape_from_params,
    transfer_shape,
    write_landmarks,
)

K = 6


def random_shapes(rng, m, k=K, rank=None):
    """Shapes s0 + A @ p; with ``rank`` the centered data has exactly that rank."""
    s0 = rng.uniform(20, 120, 2 * k)
    if rank is None:
        return [LandmarkSet.from_vector(s0 + rng.standard_normal(2 * k) * 3) for _ in range(m)], None
    a = np.linalg.qr(rng.standard_normal((2 * k, rank)))[0]
    p = rng.standard_normal((m, rank)) * 4
    return [LandmarkSet.from_vector(s0 + a @ pi) for pi in p], a


def projector(a):
    return a @ np.linalg.pinv(a)


# ---------------------------------------------------------------- alignment


def test_alignment_identity_case():
    pts = np.array([[45.0, 54.0], [99.0, 54.0], [72.0, 90.0]])
    out, tf = align_landmarks(LandmarkSet(pts), 0, 1)
    assert tf.scale == pytest.approx(1.0, abs=1e-15)
    assert tf.rotation == pytest.approx(0.0, abs=1e-15)
    assert tf.translation == pytest.approx((0.0, 0.0), abs=1e-12)
    np.testing.assert_allclose(out.points, pts, atol=1e-12)


def two_point_similarity(p, q, P, Q):
    """Closed-form 4-dof solve: [a -b tx; b a ty] mapping p->P, q->Q."""
    rows, rhs = [], []
    for (x, y), (u, v) in ((p, P), (q, Q)):
        rows += [[x, -y, 1, 0], [y, x, 0, 1]]
        rhs += [u, v]
    a, b, tx, ty = np.linalg.solve(np.array(rows), np.array(rhs))
    return math.hypot(a, b), math.atan2(b, a), (tx, ty)


def test_alignment_rotated_input_matches_oracle():
    rng = np.random.default_rng(0)
    pts = rng.uniform(30, 110, (5, 2))
    pts[0], pts[1] = (50, 60), (90, 60)
    mid = (pts[0] + pts[1]) / 2
    rot = np.array([[0, -1], [1, 0]])
    rotated = LandmarkSet((pts - mid) @ rot.T + mid)
    out, tf = align_landmarks(rotated, 0, 1)
    assert out.points[0, 1] == pytest.approx(out.points[1, 1], abs=1e-12)
    np.testing.assert_allclose(out.points[[0, 1]], [[45, 54], [99, 54]], atol=1e-12)
    scale, angle, trans = two_point_similarity(rotated.points[0], rotated.points[1], (45, 54), (99, 54))
    assert tf.scale == pytest.approx(scale, rel=1e-12)
    assert tf.rotation == pytest.approx(angle, abs=1e-12)
    np.testing.assert_allclose(tf.translation, trans, atol=1e-9)


def test_alignment_scale_half_for_doubled_input():
    pts = np.array([[45.0, 54.0], [99.0, 54.0], [70.0, 80.0]])
    mid = pts[:2].mean(axis=0)
    _, tf = align_landmarks(LandmarkSet((pts - mid) * 2 + mid), 0, 1)
    assert tf.scale == pytest.approx(0.5, rel=1e-14)


def test_alignment_eye_centroids_and_degenerate():
    pts = np.array([[40.0, 50], [50, 50], [94, 58], [104, 58], [70, 90]])
    out, _ = align_landmarks(LandmarkSet(pts), (0, 1), (2, 3))
    np.testing.assert_allclose(out.points[:2].mean(axis=0), (45, 54), atol=1e-12)
    with pytest.raises(DegenerateGeometryError):
        align_landmarks(LandmarkSet(np.array([[1.0, 1.0], [1.0, 1.0]])), 0, 1)


@settings(max_examples=50, deadline=None)
@given(
    scale=st.floats(0.1, 10),
    rot=st.floats(-math.pi, math.pi),
    tx=st.floats(-100, 100),
    ty=st.floats(-100, 100),
)
def test_similarity_inverse_round_trip(scale, rot, tx, ty):
    lm = LandmarkSet(np.random.default_rng(1).uniform(0, 144, (7, 2)))
    tf = SimilarityTransform(scale, rot, (tx, ty))
    back = tf.inverse().apply(tf.apply(lm))
    np.testing.assert_allclose(back.points, lm.points, atol=1e-9)


def test_similarity_rejects_nonpositive_scale():
    with pytest.raises(ShapeModelError):
        SimilarityTransform(0.0)


# ---------------------------------------------------------------------- PCA


def test_identical_shapes_give_zero_variance():
    s = LandmarkSet(np.arange(2 * K, dtype=float).reshape(K, 2))
    basis = fit_shape_basis([s, s, s])
    assert basis.N == 0
    np.testing.assert_array_equal(basis.mean_shape, s.vector())


def test_rank2_subspace_matches_svd_oracle():
    rng = np.random.default_rng(2)
    shapes, a = random_shapes(rng, 30, rank=2)
    basis = fit_shape_basis(shapes, n_components=2)
    data = np.stack([s.vector() for s in shapes])
    _, _, vt = np.linalg.svd(data - data.mean(axis=0))
    oracle = projector(vt[:2].T)
    np.testing.assert_allclose(projector(basis.basis), oracle, atol=1e-8)
    np.testing.assert_allclose(projector(basis.basis), projector(a), atol=1e-8)
    # variance mode picks exactly the two informative directions
    assert fit_shape_basis(shapes).N == 2


def test_two_shapes_single_direction():
    rng = np.random.default_rng(3)
    (s1, s2), _ = random_shapes(rng, 2)
    basis = fit_shape_basis([s1, s2], variance_fraction=1.0)
    assert basis.N == 1
    d = s2.vector() - s1.vector()
    assert abs(abs(basis.basis[:, 0] @ d) - np.linalg.norm(d)) < 1e-10
    assert basis.eigenvalues[0] == pytest.approx(d @ d / 2, rel=1e-12)


def test_basis_invariants():
    rng = np.random.default_rng(4)
    shapes, _ = random_shapes(rng, 9)
    basis = fit_shape_basis(shapes, variance_fraction=1.0)
    assert basis.N <= min(2 * K, len(shapes) - 1)
    assert basis.orthonormality_error() <= 1e-8
    assert np.all(np.diff(basis.eigenvalues) <= 0) and np.all(basis.eigenvalues >= 0)
    for j in range(basis.N):
        first = basis.basis[np.flatnonzero(np.abs(basis.basis[:, j]) > 1e-12)[0], j]
        assert first > 0


def test_variance_fraction_selects_smallest_count():
    rng = np.random.default_rng(5)
    shapes, _ = random_shapes(rng, 40)
    full = fit_shape_basis(shapes, variance_fraction=1.0)
    cum = np.cumsum(full.eigenvalues) / full.eigenvalues.sum()
    for frac in (0.5, 0.8, 0.95):
        n = fit_shape_basis(shapes, variance_fraction=frac).N
        assert cum[n - 1] >= frac and (n == 1 or cum[n - 2] < frac)


def test_fit_errors():
    s = LandmarkSet(np.zeros((K, 2)))
    with pytest.raises(ShapeModelError):
        fit_shape_basis([s])
    with pytest.raises(ShapeModelError, match="mismatched"):
        fit_shape_basis([s, LandmarkSet(np.zeros((K + 1, 2)))])
    with pytest.raises(ShapeModelError):
        fit_shape_basis([s, s], n_components=1, variance_fraction=0.9)


def test_full_rank_reconstruction():
    rng = np.random.default_rng(6)
    shapes, _ = random_shapes(rng, 8)
    basis = fit_shape_basis(shapes, variance_fraction=1.0)
    assert basis.N == 7
    for s in shapes:
        rec = shape_from_params(basis, basis.mean, fit_params(basis, basis.mean, s))
        np.testing.assert_allclose(rec.points, s.points, atol=1e-8)


def test_fitted_params_are_centered():
    rng = np.random.default_rng(7)
    shapes, _ = random_shapes(rng, 25)
    basis = fit_shape_basis(shapes)
    p = np.stack([fit_params(basis, basis.mean, s) for s in shapes])
    np.testing.assert_allclose(p.mean(axis=0), 0, atol=1e-8)


# ---------------------------------------------------------- params & shapes


@pytest.fixture
def basis():
    shapes, _ = random_shapes(np.random.default_rng(8), 20)
    return fit_shape_basis(shapes, n_components=4)


def test_shape_from_params_cases(basis):
    base = basis.mean
    assert shape_from_params(basis, base, np.zeros(4)) == base
    unit = ShapeBasis(np.zeros(2 * K), np.eye(2 * K)[:, :3], np.ones(3))
    out = shape_from_params(unit, base, [1.0, 0.0, 0.0])
    expected = base.vector()
    expected[0] += 1
    np.testing.assert_array_equal(out.vector(), expected)


def test_shape_from_params_matches_matvec(basis):
    rng = np.random.default_rng(9)
    base = LandmarkSet(rng.uniform(0, 100, (K, 2)))
    p = rng.standard_normal(4)
    naive = [base.vector()[i] + sum(basis.basis[i, j] * p[j] for j in range(4)) for i in range(2 * K)]
    np.testing.assert_allclose(shape_from_params(basis, base, p).vector(), naive, atol=1e-12)


def test_fit_params_cases(basis):
    rng = np.random.default_rng(10)
    base = LandmarkSet(rng.uniform(0, 100, (K, 2)))
    np.testing.assert_array_equal(fit_params(basis, base, base), np.zeros(4))
    p_true = rng.standard_normal(4)
    np.testing.assert_allclose(fit_params(basis, base, shape_from_params(basis, base, p_true)), p_true, atol=1e-10)


def test_fit_params_normal_equations_oracle(basis):
    rng = np.random.default_rng(11)
    base = LandmarkSet(rng.uniform(0, 100, (K, 2)))
    observed = LandmarkSet(base.points + rng.standard_normal((K, 2)) * 5)
    s = basis.basis
    d = observed.vector() - base.vector()
    oracle = np.linalg.solve(s.T @ s, s.T @ d)
    for method in ("projection", "lstsq"):
        p = fit_params(basis, base, observed, method=method)
        np.testing.assert_allclose(p, oracle, atol=1e-8)
        np.testing.assert_allclose(s.T @ (d - s @ p), 0, atol=1e-8)


def test_projection_idempotence(basis):
    rng = np.random.default_rng(12)
    base = LandmarkSet(rng.uniform(0, 100, (K, 2)))
    x = LandmarkSet(rng.uniform(0, 100, (K, 2)))
    p1 = fit_params(basis, base, x)
    p2 = fit_params(basis, base, shape_from_params(basis, base, p1))
    np.testing.assert_allclose(p2, p1, atol=1e-10)


def test_dimension_mismatch(basis):
    with pytest.raises(ShapeModelError):
        shape_from_params(basis, basis.mean, np.zeros(3))
    with pytest.raises(ShapeModelError):
        fit_params(basis, basis.mean, LandmarkSet(np.zeros((K + 1, 2))))


def test_transfer_cases(basis):
    rng = np.random.default_rng(13)
    neutral_a = LandmarkSet(rng.uniform(0, 100, (K, 2)))
    assert transfer_shape(basis, neutral_a, np.zeros(basis.N)) == neutral_a
    expressed = LandmarkSet(neutral_a.points + rng.standard_normal((K, 2)) * 3)
    own = transfer_shape(basis, neutral_a, fit_params(basis, neutral_a, expressed))
    # independent oracle: orthogonal projection of the displacement onto span(S)
    d = expressed.vector() - neutral_a.vector()
    proj = neutral_a.vector() + projector(basis.basis) @ d
    np.testing.assert_allclose(own.vector(), proj, atol=1e-10)
    p = rng.standard_normal(basis.N)
    twin = LandmarkSet(neutral_a.points.copy())
    assert transfer_shape(basis, neutral_a, p) == transfer_shape(basis, twin, p)


def test_interpolate_params():
    p_from, p_to = np.array([1.0, -2.0]), np.array([3.0, 5.0])
    np.testing.assert_array_equal(interpolate_params(p_from, p_to, 0.0), p_from)
    np.testing.assert_array_equal(interpolate_params(p_from, p_to, 1.0), p_to)
    np.testing.assert_array_equal(interpolate_params(np.zeros(2), p_to, 0.5), 0.5 * p_to)
    np.testing.assert_array_equal(interpolate_params(np.zeros(2), p_to, 2.0), 2 * p_to)
    with pytest.raises(ShapeModelError):
        interpolate_params(np.zeros(2), np.zeros(3), 0.5)


def test_semantic_prototypes(basis):
    rng = np.random.default_rng(14)
    base = LandmarkSet(rng.uniform(0, 100, (K, 2)))
    p = rng.standard_normal(basis.N)
    single = semantic_prototypes(basis, [(base, shape_from_params(basis, base, p), "happy")])
    np.testing.assert_allclose(single["happy"], p, atol=1e-12)
    cancel = semantic_prototypes(
        basis, [(base, shape_from_params(basis, base, p), "x"), (base, shape_from_params(basis, base, -p), "x")]
    )
    np.testing.assert_allclose(cancel["x"], 0, atol=1e-12)
    groups = {}
    samples = []
    for label in "abc":
        for _ in range(int(rng.integers(1, 5))):
            neutral = LandmarkSet(rng.uniform(0, 100, (K, 2)))
            expr = LandmarkSet(neutral.points + rng.standard_normal((K, 2)))
            samples.append((neutral, expr, label))
            groups.setdefault(label, []).append(basis.basis.T @ (expr.vector() - neutral.vector()))
    protos = semantic_prototypes(basis, samples)
    for label, ps in groups.items():
        np.testing.assert_allclose(protos[label], sum(ps) / len(ps), atol=1e-12)
    with pytest.raises(ShapeModelError):
        semantic_prototypes(basis, samples, labels=["a", "missing"])


# --------------------------------------------------------------------- files


def test_landmark_file_round_trip(tmp_path):
    lm = LandmarkSet(np.random.default_rng(15).uniform(0, 144, (K, 2)))
    path = tmp_path / "a.lmk"
    write_landmarks(path, lm)
    text = path.read_text()
    assert text.splitlines()[0] == str(K) and text.endswith("\n")
    assert read_landmarks(path) == lm


@pytest.mark.parametrize(
    "text",
    ["2\n1 2\n", "2\n1 2\n3 4", "x\n1 2\n", "1\n1,2\n", "1\n1  2\n", "1\nnan 2\n", "2\n1 2\n3\n"],
)
def test_landmark_file_rejects_malformed(tmp_path, text):
    path = tmp_path / "bad.lmk"
    path.write_text(text)
    with pytest.raises(LandmarkFormatError):
        read_landmarks(path)


def test_basis_file_round_trip(tmp_path, basis):
    path = tmp_path / "b.g2sb"
    save_basis(path, basis)
    raw = path.read_bytes()
    assert raw[:4] == b"G2SB"
    assert int.from_bytes(raw[4:8], "little") == K and int.from_bytes(raw[8:12], "little") == 4
    assert load_basis(path) == basis
    path.write_bytes(raw[:-8])
    with pytest.raises(ShapeModelError):
        load_basis(path)
