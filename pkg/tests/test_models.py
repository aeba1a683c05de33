import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advshift import autodiff as ad
from advshift.autodiff import ShapeError, Tensor
from advshift.meta import BaseLearner, InnerConfig, inner_adapt, predict
from advshift.models import (
    EncoderSpec,
    FiSLParams,
    HeadSpec,
    encode,
    features,
    fisl_apply,
    fisl_transform_task,
    head_forward,
    init_params,
    ridge_solve,
)
from advshift.tasks import SINE_SOURCE, Task, sample_sine_task


def test_param_count_matches_layer_dims():
    spec = EncoderSpec(1, [40, 40])
    params = init_params(spec, HeadSpec("ridge-closed-form"), np.random.default_rng(0))
    assert sum(p.size for p in params.values()) == spec.n_params() == 2 * 40 + 41 * 40


def test_prototype_head_has_no_parameters():
    params = init_params(EncoderSpec(2, [8]), HeadSpec("prototype-metric", 5), np.random.default_rng(0))
    assert not any(k.startswith("head.") for k in params)


def test_encode_zero_weights_gives_zero_features():
    params = {"enc.0.weight": Tensor(np.zeros((3, 4))), "enc.0.bias": Tensor(np.zeros(4))}
    z = encode(params, np.random.default_rng(0).normal(size=(5, 3)))
    assert z.shape == (5, 4) and np.all(z.data == 0.0)


def test_encode_identity_layer():
    params = {"enc.0.weight": Tensor(np.eye(2)), "enc.0.bias": Tensor(np.zeros(2))}
    assert encode(params, np.array([[1.5, 2.0]])).data.tolist() == [[1.5, 2.0]]


def test_encode_rejects_wrong_input_dim():
    params = {"enc.0.weight": Tensor(np.eye(2)), "enc.0.bias": Tensor(np.zeros(2))}
    with pytest.raises(ShapeError):
        encode(params, np.ones((1, 3)))


def test_encoder_gradient_check():
    rng = np.random.default_rng(2)
    params = init_params(EncoderSpec(2, [6, 5]), HeadSpec("linear-regression", 1), rng)
    x = rng.normal(size=(7, 2))
    enc = {k: v for k, v in params.items() if k.startswith("enc.")}
    assert ad.check_grad(lambda ps: ad.tsum(ad.square(encode(ps, x))), enc) < 1e-6


def test_fisl_examples():
    z0 = Tensor(np.array([[0.5, -1.0]]))
    assert fisl_apply(FiSLParams(Tensor([2.0, 2.0]), Tensor([1.0, -1.0])), z0).data.tolist() == [[2.0, -3.0]]
    out = fisl_apply(FiSLParams(Tensor(np.zeros(2)), Tensor([3.0, 4.0])), Tensor(np.ones((3, 2))))
    assert out.data.tolist() == [[3.0, 4.0]] * 3
    with pytest.raises(ShapeError):
        fisl_apply(FiSLParams.identity(3), z0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_fisl_identity_and_affine(seed, a, b):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    ident = FiSLParams.identity(3)
    assert np.array_equal(fisl_apply(ident, Tensor(z1)).data, z1)
    phi = FiSLParams(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)))
    lhs = fisl_apply(phi, Tensor(a * z1 + b * z2)).data
    rhs = a * fisl_apply(phi, Tensor(z1)).data + b * fisl_apply(phi, Tensor(z2)).data - (a + b - 1) * phi.shift.data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * (1 + abs(a) + abs(b)) * 10)


def test_linear_head_examples():
    z = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]))
    zero = {"head.weight": Tensor(np.zeros((2, 2))), "head.bias": Tensor(np.zeros(2))}
    assert np.all(head_forward(HeadSpec("linear-regression", 2), zero, z).data == 0.0)
    ident = {"head.weight": Tensor(np.eye(2)), "head.bias": Tensor(np.zeros(2))}
    assert np.array_equal(head_forward(HeadSpec("linear-regression", 2), ident, z).data, z.data)
    with pytest.raises(ValueError):
        head_forward(HeadSpec("linear-regression", 2), {}, z)


def test_ridge_exact_fit_two_points():
    # hand oracle: y = 2z + 1 through (1, 3) and (2, 5)
    z, y = Tensor(np.array([[1.0], [2.0]])), Tensor(np.array([[3.0], [5.0]]))
    w = ridge_solve(z, y, 1e-8)
    pred = z.data @ w["head.weight"].data + w["head.bias"].data
    assert np.max(np.abs(pred - y.data)) < 1e-6
    assert abs(w["head.weight"].data[0, 0] - 2.0) < 1e-6 and abs(w["head.bias"].data[0] - 1.0) < 1e-6


def test_ridge_singular_without_regularisation():
    z = Tensor(np.array([[1.0, 1.0], [2.0, 2.0]]))
    with pytest.raises(np.linalg.LinAlgError):
        ridge_solve(z, Tensor(np.ones((2, 1))), 0.0)


def _sine_setup(seed=0):
    rng = np.random.default_rng(seed)
    theta = init_params(EncoderSpec(1, [10, 10]), HeadSpec("linear-regression", 1), rng)
    return theta, sample_sine_task(SINE_SOURCE, 5, 10, rng)


def test_identity_pseudo_task_matches_source_forward():
    theta, task = _sine_setup()
    pseudo = fisl_transform_task(FiSLParams.identity(10), task)
    learner = BaseLearner(theta, ())
    np.testing.assert_allclose(predict(learner, pseudo).data, predict(learner, task).data, rtol=0, atol=1e-15)
    cfg = InnerConfig("maml", 0.01, 1)
    a = inner_adapt(theta, pseudo, cfg, differentiable=False)
    b = inner_adapt(theta, task, cfg, differentiable=False)
    assert all(np.allclose(a.w[k].data, b.w[k].data, rtol=0, atol=1e-15) for k in theta)


def test_pseudo_task_keeps_labels_exactly():
    _, task = _sine_setup()
    phi = FiSLParams(Tensor(np.full(10, 3.0)), Tensor(np.full(10, -2.0)))
    pseudo = fisl_transform_task(phi, task)
    assert pseudo.task.y_support is task.y_support and pseudo.task.y_query is task.y_query
    cls = Task(np.zeros((4, 2)), np.array([0, 1, 1, 0]), np.zeros((2, 2)), np.array([1, 0]), n_classes=2)
    p = fisl_transform_task(FiSLParams.identity(2), cls)
    assert sorted(p.task.y_support.tolist()) == sorted(cls.y_support.tolist())


def test_large_shift_moves_feature_mean_by_beta():
    theta, task = _sine_setup()
    beta = np.linspace(10.0, 50.0, 10)
    phi = FiSLParams(Tensor(np.ones(10)), Tensor(beta))
    z0 = features(theta, task.x_query)
    z = features(theta, task.x_query, phi)
    np.testing.assert_allclose(z.data.mean(axis=0) - z0.data.mean(axis=0), beta, rtol=0, atol=1e-12)
