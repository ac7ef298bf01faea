import numpy as np
import pytest

from exprsynth.data import to_model_frame
from exprsynth.networks import GeneratorConfig, GeneratorNet
from exprsynth.pipeline import (
    PSNR_CAP,
    MetricReport,
    PairMetrics,
    PipelineError,
    TransferRequest,
    cosine_similarity_matrix,
    evaluate_pairs,
    expression_invariant_probe_transform,
    expression_transfer,
    interpolate_expression,
    interpolation_shapes,
    psnr,
    recognition_eval,
    recognition_from_scores,
    remove_expression,
    run_generator,
    ssim,
    synthesize_expression,
)
from exprsynth.shape_model import LandmarkSet, fit_params, fit_shape_basis, shape_from_params, transfer_shape
from oracles import brute_force_recognition, psnr_oracle, random_pairs, ssim_oracle


def test_psnr_matches_oracle():
    for a, b in random_pairs(100):
        assert abs(psnr(a, b) - psnr_oracle(a, b)) <= 1e-9


def test_ssim_matches_oracle():
    for a, b in random_pairs(100, seed=1):
        assert abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-9


def test_metric_edge_cases(rng):
    a = rng.uniform(0, 1, (1, 16, 16))
    assert psnr(a, a) == PSNR_CAP
    assert abs(ssim(a, a) - 1.0) <= 1e-12
    assert abs(psnr(np.zeros((8, 8)), np.full((8, 8), 0.1)) - 20.0) <= 1e-9
    with pytest.raises(ValueError, match="shapes differ"):
        ssim(a, a[:, :15])
    with pytest.raises(ValueError, match="\\[0, 1\\]"):
        psnr(a, a + 1)
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError, match="C in"):
        psnr(np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))


def test_ssim_symmetric_and_bounded():
    for a, b in random_pairs(10, seed=2):
        s = ssim(a, b)
        assert abs(s - ssim(b, a)) <= 1e-12 and -1 <= s <= 1


# -------------------------------------------------------------- recognition


def test_recognition_matches_brute_force():
    rng = np.random.default_rng(7)
    gallery_ids = ["a", "b", "c"]
    probe_ids = ["a", "a", "b", "b", "c", "c"]
    for _ in range(50):
        gallery = rng.normal(size=(3, 5))
        probes = gallery[[0, 0, 1, 1, 2, 2]] + rng.normal(0, rng.uniform(0.2, 2.0), (6, 5))
        res = recognition_eval(list(zip(gallery_ids, gallery)), list(zip(probe_ids, probes)))
        scores = np.array([[float(p @ g / (np.linalg.norm(p) * np.linalg.norm(g))) for g in gallery] for p in probes])
        rank1, tar1, tar01 = brute_force_recognition(scores, probe_ids, gallery_ids)
        assert abs(res.rank1 - rank1) <= 1e-9
        assert abs(res.tar_at_far1 - tar1) <= 1e-9
        assert abs(res.tar_at_far01 - tar01) <= 1e-9


def test_recognition_perfect_and_errors():
    g = np.eye(3)
    res = recognition_eval([(i, g[i]) for i in range(3)], [(i, 2 * g[i]) for i in range(3)])
    assert res.rank1 == 100.0 and res.tar_at_far1 == 100.0
    assert res.row("original").split("\t") == ["original", "100.00", "100.00", "100.00"]
    with pytest.raises(ValueError, match="unique"):
        recognition_from_scores(np.zeros((1, 2)), [0], [0, 0])
    with pytest.raises(ValueError, match="non-empty"):
        recognition_eval([], [(0, g[0])])
    with pytest.raises(ValueError, match="dimensions"):
        recognition_eval([(0, g[0])], [(0, np.ones(2))])
    np.testing.assert_allclose(np.diag(cosine_similarity_matrix(g, g)), 1.0)


# --------------------------------------------------------------- inference


@pytest.fixture(scope="module")
def nets():
    rng = np.random.default_rng(5)
    cfg = GeneratorConfig(1, 18, (4, 6), 4, residual=True)
    return GeneratorNet(cfg, rng), GeneratorNet(cfg, rng)


@pytest.fixture(scope="module")
def basis(synthetic):
    train = synthetic.subset("train")
    shapes = [to_model_frame(s.landmarks_expr, 16) for s in train]
    shapes += [to_model_frame(s.landmarks_neutral, 16) for s in train[::18]]
    return fit_shape_basis(shapes, n_components=5)


def model_pair(sample, size=16):
    from exprsynth.data import model_image

    return (
        model_image(sample.image_neutral, size), model_image(sample.image_expr, size),
        to_model_frame(sample.landmarks_neutral, size), to_model_frame(sample.landmarks_expr, size),
    )


def test_remove_and_synthesize_contracts(nets, synthetic):
    g_e, g_n = nets
    n_img, e_img, n_lm, e_lm = model_pair(synthetic.samples[0])
    out = remove_expression(g_n, e_img, e_lm)
    assert out.shape == e_img.shape and out.min() > 0 and out.max() < 1
    assert g_n.training  # mode restored
    syn = synthesize_expression(g_e, n_img, e_lm)
    assert syn.shape == n_img.shape
    with pytest.raises(ValueError):
        run_generator(g_e, n_img, [e_lm])


def transfer_request(synthetic, i, j):
    a, b = synthetic.samples[i], synthetic.samples[j]
    na, ea, nla, ela = model_pair(a)
    nb, eb, nlb, elb = model_pair(b)
    return TransferRequest(ea, ela, eb, elb, nla, nlb)


def test_zero_parameter_transfer_returns_target_neutral(nets, basis, synthetic):
    g_e, g_n = nets
    req = transfer_request(synthetic, 0, 40)
    # source B shows its own neutral shape -> zero parameters
    req.landmarks_b = req.neutral_landmarks_b
    res = expression_transfer(req, g_n, g_e, basis)
    assert not res.params_b.any()
    assert np.array_equal(res.shape_ab.points, req.neutral_landmarks_a.points)


def test_transfer_stage_composition_bitwise(nets, basis, synthetic):
    g_e, g_n = nets
    req = transfer_request(synthetic, 3, 57)
    res = expression_transfer(req, g_n, g_e, basis)
    neutral_a = remove_expression(g_n, req.image_a, req.landmarks_a)
    neutral_b = remove_expression(g_n, req.image_b, req.landmarks_b)
    p_a = fit_params(basis, req.neutral_landmarks_a, req.landmarks_a)
    p_b = fit_params(basis, req.neutral_landmarks_b, req.landmarks_b)
    s_ab = transfer_shape(basis, req.neutral_landmarks_a, p_b)
    s_ba = transfer_shape(basis, req.neutral_landmarks_b, p_a)
    assert np.array_equal(res.neutral_a, neutral_a) and np.array_equal(res.neutral_b, neutral_b)
    assert np.array_equal(res.params_a, p_a) and np.array_equal(res.params_b, p_b)
    assert np.array_equal(res.image_ab, synthesize_expression(g_e, neutral_a, s_ab))
    assert np.array_equal(res.image_ba, synthesize_expression(g_e, neutral_b, s_ba))


def test_self_transfer_is_projection(nets, basis, synthetic):
    g_e, g_n = nets
    req = transfer_request(synthetic, 5, 5)
    res = expression_transfer(req, g_n, g_e, basis)
    d = req.landmarks_a.vector() - req.neutral_landmarks_a.vector()
    projected = req.neutral_landmarks_a.vector() + basis.basis @ (basis.basis.T @ d)
    np.testing.assert_allclose(res.shape_ab.vector(), projected, atol=1e-10)
    assert np.array_equal(res.image_ab, res.image_ba)


def test_transfer_k_mismatch_names_stage(nets, basis, synthetic):
    g_e, g_n = nets
    req = transfer_request(synthetic, 0, 1)
    req.landmarks_a = LandmarkSet(req.landmarks_a.points[:10])
    with pytest.raises(PipelineError, match="request") as info:
        expression_transfer(req, g_n, g_e, basis)
    assert info.value.stage == "request"


def test_transfer_generator_failure_names_stage(basis, synthetic):
    rng = np.random.default_rng(0)
    wrong = GeneratorNet(GeneratorConfig(1, 4, (2,), 2), rng)
    req = transfer_request(synthetic, 0, 1)
    with pytest.raises(PipelineError) as info:
        expression_transfer(req, wrong, wrong, basis)
    assert info.value.stage == "remove"


def test_interpolation_endpoints(nets, basis, synthetic):
    g_e, _ = nets
    n_img, _, n_lm, e_lm = model_pair(synthetic.samples[9])
    target = fit_params(basis, n_lm, e_lm)
    shapes = interpolation_shapes(basis, n_lm, target, 5)
    assert shapes[0] is n_lm or np.array_equal(shapes[0].points, n_lm.points)
    assert np.array_equal(shapes[-1].points, shape_from_params(basis, n_lm, target).points)
    mid = shape_from_params(basis, n_lm, 0.5 * target)
    np.testing.assert_allclose(shapes[2].points, mid.points, atol=1e-12)
    frames = interpolate_expression(g_e, n_img, basis, n_lm, target, 5)
    assert len(frames) == 5
    assert np.array_equal(frames[-1], synthesize_expression(g_e, n_img, shapes[-1]))
    with pytest.raises(ValueError):
        interpolation_shapes(basis, n_lm, target, 1)


def test_probe_transform_matches_removal(nets, synthetic):
    _, g_n = nets
    probes = []
    for s in synthetic.samples[:3]:
        _, e_img, _, e_lm = model_pair(s)
        probes.append((e_img, e_lm))
    out = expression_invariant_probe_transform(g_n, probes, batch=2)
    for (img, lm), o in zip(probes, out):
        np.testing.assert_allclose(o, remove_expression(g_n, img, lm), atol=1e-12)


# -------------------------------------------------------------- evaluation


def test_evaluate_pairs_and_report(nets, synthetic):
    g_e, g_n = nets
    samples = synthetic.subset("test")[:4]
    rep = evaluate_pairs(g_e, g_n, samples, size=16, batch=3)
    assert len(rep.rows) == 4
    r = rep.rows[0]
    assert r.copy_removal_ssim == r.copy_synthesis_ssim
    text = rep.to_text().splitlines()
    assert text[0].split("\t")[0] == "sample_id" and text[-1].startswith("mean\t")
    assert len(text) == 6
    assert set(rep.aggregates()) == {"removal_ssim", "removal_psnr", "synthesis_ssim", "synthesis_psnr"}


def test_report_mean():
    rows = [PairMetrics(str(i), i, 0, 0, 0, 0, 0, 0) for i in range(4)]
    assert MetricReport(rows).mean("removal_ssim") == 1.5
