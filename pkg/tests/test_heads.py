import numpy as np
import pytest
import torch

from vnafford.errors import DegenerateFrameError, InvalidRotationError, NoValidProposalError
from vnafford.geometry import apply_transform, geodesic_distance, random_rigid_transform, random_rotation
from vnafford.heads import (build_model, encode_cloud, infer_best_action, is_positive, point_features,
                            predict_affordance, propose_action, proposals_at, score_action)
from vnafford.simenv import PrimitiveType, initial_state, render_cloud, sample_object
from vnafford.vn_core import ModelConfig


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(seed=3))


def cloud(seed, family="drawer"):
    rng = np.random.default_rng(seed)
    return render_cloud(initial_state(sample_object(family, rng, "so3"), rng), 256, rng)


def test_six_primitives():
    assert len(PrimitiveType) == 6


def test_affordance_zero_feature_is_fixed(model):
    a = predict_affordance(model, np.zeros(64))
    assert 0 < a < 1
    assert predict_affordance(model, np.zeros(64)) == a


def test_affordance_range(model):
    x = np.random.default_rng(0).standard_normal((10_000, 64)) * 10
    a = predict_affordance(model, x)
    assert a.shape == (10_000,) and np.all((a >= 0) & (a <= 1))


@pytest.mark.parametrize("seed", range(5))
def test_affordance_invariant(model, seed):
    c = cloud(seed)
    t = random_rigid_transform(np.random.default_rng(seed))
    a = predict_affordance(model, encode_cloud(model, c).inv)
    b = predict_affordance(model, encode_cloud(model, apply_transform(t, c)).inv)
    assert np.max(np.abs(a - b)) < 1e-4
    assert np.argmax(a) == np.argmax(b)


def test_proposal_equivariant(model):
    rng = np.random.default_rng(1)
    devs = []
    for trial in range(20):
        c = cloud(50 + trial)
        t = random_rigid_transform(rng)
        fa, fb = encode_cloud(model, c), encode_cloud(model, apply_transform(t, c))
        p = int(rng.integers(256))
        z = rng.standard_normal(8)
        try:
            ra = propose_action(model, point_features(fa, slice(p, p + 1)), z[None])
            rb = propose_action(model, point_features(fb, slice(p, p + 1)), z[None])
        except DegenerateFrameError:
            continue
        devs.append(geodesic_distance(rb, t.rotation @ ra))
    assert np.mean(devs) < 1e-3


def test_proposal_deterministic_and_diverse(model):
    f = point_features(encode_cloud(model, cloud(2)), slice(7, 8))
    z = np.random.default_rng(2).standard_normal((100, 8))
    r1, k1 = proposals_at(model, f, z)
    r2, _ = proposals_at(model, f, z)
    assert np.array_equal(r1, r2)
    spread = [geodesic_distance(r1[0], r) for r in r1[1:]]
    assert max(spread) > 0


def test_score_joint_invariance(model):
    rng = np.random.default_rng(3)
    for trial in range(25):
        c = cloud(100 + trial)
        t = random_rigid_transform(rng)
        fa, fb = encode_cloud(model, c), encode_cloud(model, apply_transform(t, c))
        for p in rng.integers(256, size=4):
            r = random_rotation(rng)
            sa = score_action(model, point_features(fa, slice(p, p + 1)), r)
            sb = score_action(model, point_features(fb, slice(p, p + 1)), t.rotation @ r)
            assert 0 <= sa <= 1
            assert abs(sa - sb) < 1e-4


def test_score_rejects_invalid_rotation(model):
    f = point_features(encode_cloud(model, cloud(4)), slice(0, 1))
    with pytest.raises(InvalidRotationError):
        score_action(model, f, np.eye(3) * 2)


def test_decision_threshold():
    assert is_positive(0.6) and not is_positive(0.4) and not is_positive(0.5)


def test_infer_equivariance(model):
    for seed in range(5):
        c = cloud(200 + seed)
        t = random_rigid_transform(np.random.default_rng(seed))
        a = infer_best_action(model, c, 20, np.random.default_rng(seed))
        b = infer_best_action(model, apply_transform(t, c), 20, np.random.default_rng(seed))
        assert a.point_index == b.point_index
        assert geodesic_distance(b.rotation, t.rotation @ a.rotation) < 1e-3
        assert abs(a.score - b.score) < 1e-4


def test_infer_k1_returns_the_single_proposal(model):
    c = cloud(5)
    pred = infer_best_action(model, c, 1, np.random.default_rng(0))
    feats = encode_cloud(model, c)
    z = np.random.default_rng(0).standard_normal((1, 8))
    direct = propose_action(model, point_features(feats, slice(pred.point_index, pred.point_index + 1)), z)
    assert np.allclose(pred.rotation, direct)
    assert pred.n_valid == 1


def test_infer_smoke_finite(model):
    pred = infer_best_action(model, cloud(6, "door"), 20, np.random.default_rng(1))
    assert np.all(np.isfinite(pred.rotation)) and 0 <= pred.score <= 1
    assert pred.affordance.shape == (256,)
    d = pred.to_dict()
    assert set(d) == {"point_index", "rotation", "score", "n_valid"}


def test_infer_argument_errors(model):
    with pytest.raises(ValueError):
        infer_best_action(model, cloud(7), 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        infer_best_action(model, cloud(7), 5, np.random.default_rng(0), prim="push")


def test_infer_all_degenerate():
    m = build_model(ModelConfig())
    with torch.no_grad():
        m.proposal.out.weight.zero_()
    with pytest.raises(NoValidProposalError):
        infer_best_action(m, cloud(8), 5, np.random.default_rng(0))


def test_baseline_is_not_invariant():
    m = build_model(ModelConfig(kind="baseline"))
    c = cloud(9)
    t = random_rigid_transform(np.random.default_rng(9))
    a = predict_affordance(m, encode_cloud(m, c).inv)
    b = predict_affordance(m, encode_cloud(m, apply_transform(t, c)).inv)
    assert np.max(np.abs(a - b)) > 1e-4
    assert encode_cloud(m, c).eqv is None


def test_unknown_model_kind():
    with pytest.raises(ValueError):
        build_model(ModelConfig(kind="mlp"))
