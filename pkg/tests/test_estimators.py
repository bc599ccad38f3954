import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pmslam.errors import ShapeError
from pmslam.estimators import Reconstructor, SimilarityAligner
from pmslam.eval import build_gt_cloud
from pmslam.geometry import Sim3, so3_exp
from pmslam.oracle import GroundTruth, OracleI2P, OracleL2W, oracle_scorer
from pmslam.pipeline import PipelineConfig
from pmslam.synth import gen_scene


def test_aligner_recovers_similarity():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    T = Sim3(so3_exp([0.2, -0.5, 0.9]), [1.0, -2.0, 0.5], 1.7)
    est = SimilarityAligner().fit(X, T.apply(X))
    assert est.scale_ == pytest.approx(1.7, rel=1e-12)
    np.testing.assert_allclose(est.transform(X), T.apply(X), atol=1e-12)
    np.testing.assert_allclose(est.inverse_transform(T.apply(X)), X, atol=1e-12)
    np.testing.assert_allclose(est.fit_transform(X, T.apply(X)), T.apply(X), atol=1e-12)


def test_aligner_params_and_clone():
    est = SimilarityAligner(with_scale=False, max_iter=5)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    with pytest.raises(NotFittedError):
        twin.transform(np.zeros((3, 3)))


def test_aligner_validation():
    with pytest.raises(ShapeError):
        SimilarityAligner().fit(np.zeros((5, 2)), np.zeros((5, 2)))
    with pytest.raises(ShapeError):
        SimilarityAligner().fit(np.ones((5, 3)), np.ones((4, 3)))
    bad = np.ones((5, 3))
    bad[1, 1] = np.nan
    with pytest.raises(ShapeError):
        SimilarityAligner().fit(bad, bad)


def test_aligner_refine_unpaired():
    rng = np.random.default_rng(1)
    y = np.concatenate([rng.uniform([0, 0, 0], [2, 1, 0], (600, 3)), rng.uniform([0, 0, 0], [0, 1, 1.5], (600, 3))])
    T = Sim3(so3_exp([0.0, 0.05, 0.03]), [0.02, 0.0, 0.01])
    X = T.inverse().apply(y)[rng.permutation(len(y))]
    est = SimilarityAligner(with_scale=False, paired=False, max_iter=100).fit(X, y)
    np.testing.assert_allclose(est.rotation_, T.rotation, atol=1e-6)
    paired = SimilarityAligner(refine=True).fit(X, T.apply(X))
    np.testing.assert_allclose(paired.rotation_, T.rotation, atol=1e-9)


@pytest.fixture(scope="module")
def scene():
    return gen_scene(9, n_frames=16)


def test_reconstructor_fit_predict_score(scene):
    gt = GroundTruth.from_scene(scene)
    sigma = 0.01 * scene.diameter
    est = Reconstructor(OracleI2P(gt, sigma), OracleL2W(gt, sigma), oracle_scorer(gt),
                        PipelineConfig(conf_threshold=0), scene.intrinsics)
    est.fit(scene.images)
    assert est.points_.shape == (16 * 64 * 64, 3)
    assert np.array_equal(np.unique(est.frame_ids_), np.arange(16))
    assert est.predict() is est.points_ and est.fps_ > 0
    cloud = build_gt_cloud(scene.depth, scene.intrinsics, scene.poses)
    score = est.score(scene.images, cloud)
    assert -2 * sigma <= score < 0


def test_reconstructor_accepts_uint8_and_tuple_intrinsics(scene):
    gt = GroundTruth.from_scene(scene)
    intr = scene.intrinsics
    est = Reconstructor(OracleI2P(gt), OracleL2W(gt), oracle_scorer(gt), PipelineConfig(conf_threshold=0),
                        (intr.fx, intr.fy, intr.cx, intr.cy))
    est.fit((scene.images[:8] * 255).astype(np.uint8))
    assert est.result_.scene.intrinsics == intr


def test_reconstructor_errors():
    with pytest.raises(ValueError):
        Reconstructor().fit(np.zeros((4, 8, 8, 3)))
    with pytest.raises(ShapeError):
        Reconstructor().fit(np.zeros((4, 8, 8)))
    with pytest.raises(NotFittedError):
        Reconstructor().predict()
