import math

import numpy as np
import pytest

from advshift import autodiff as ad
from advshift.autodiff import Tensor
from advshift.meta import (
    Adam,
    BaseLearner,
    InnerConfig,
    NonFiniteLossError,
    baseline_meta_step,
    inner_adapt,
    proto_loss,
    query_loss,
    task_loss,
)
from advshift.models import EncoderSpec, FiSLParams, HeadSpec, fisl_transform_task, init_params, proto_logits
from advshift.tasks import BLOB_SOURCE, SINE_SOURCE, SineSampler, Task, sample_blob_task, sample_sine_task


def sine_setup(seed=0, hidden=(10, 10), k=5, q=10):
    rng = np.random.default_rng(seed)
    theta = init_params(EncoderSpec(1, list(hidden)), HeadSpec("linear-regression", 1), rng)
    return theta, sample_sine_task(SINE_SOURCE, k, q, rng)


def scalar_task(x, y):
    x, y = np.array([[x]]), np.array([[y]])
    return Task(x, y, x, y)


def test_quadratic_single_step():
    # identity encoder, x=1, y=3: loss (w + b - 3)^2 has gradient -6 in w and b
    theta = {"head.weight": Tensor(np.zeros((1, 1)), True), "head.bias": Tensor(np.zeros(1), True)}
    learner = inner_adapt(theta, scalar_task(1.0, 3.0), InnerConfig("anil", 0.1, 1))
    assert learner.w["head.weight"].item() == pytest.approx(0.6, abs=1e-15)
    assert learner.w["head.bias"].item() == pytest.approx(0.6, abs=1e-15)


def test_stationary_point_is_fixed():
    theta = {"head.weight": Tensor(np.array([[2.0]]), True), "head.bias": Tensor(np.array([1.0]), True)}
    learner = inner_adapt(theta, scalar_task(1.0, 3.0), InnerConfig("maml", 0.5, 3))
    for k in theta:
        assert np.array_equal(learner.w[k].data, theta[k].data)


@pytest.mark.parametrize("differentiable", [True, False])
def test_anil_leaves_encoder_bitwise_unchanged(differentiable):
    theta, task = sine_setup()
    learner = inner_adapt(theta, task, InnerConfig("anil", 0.1, 5), differentiable)
    for k in theta:
        if k.startswith("enc."):
            assert learner.w[k] is theta[k]
    assert not np.array_equal(learner.w["head.weight"].data, theta["head.weight"].data)


def test_ridge_satisfies_normal_equations():
    rng = np.random.default_rng(4)
    theta = init_params(EncoderSpec(2, [6]), HeadSpec("ridge-closed-form", 3), rng)
    task = sample_blob_task(BLOB_SOURCE, 3, 4, 2, rng)
    lam = 0.7
    learner = inner_adapt(theta, task, InnerConfig("ridge", ridge_lambda=lam))
    z = np.maximum(task.x_support @ theta["enc.0.weight"].data + theta["enc.0.bias"].data, 0)
    za = np.hstack([z, np.ones((len(z), 1))])
    y = np.eye(3)[task.y_support]
    w = np.vstack([learner.w["head.weight"].data, learner.w["head.bias"].data[None]])
    residual = (za.T @ za + lam * np.eye(za.shape[1])) @ w - za.T @ y
    assert np.abs(residual).max() < 1e-8


@pytest.mark.parametrize("kind,lr,steps", [("maml", 0.01, 1), ("maml", 0.05, 2), ("anil", 0.1, 3), ("ridge", 0.0, 1)])
def test_meta_gradient_matches_finite_differences(kind, lr, steps):
    theta, task = sine_setup(1, hidden=(6, 5))
    cfg = InnerConfig(kind, lr, steps, ridge_lambda=0.5)
    err = ad.check_grad(lambda ps: task_loss(ps, task, cfg), theta, eps=1e-5)
    assert err < 1e-4


def test_first_order_ignores_second_derivatives():
    theta, task = sine_setup(2, hidden=(6,))
    fo = ad.grad(task_loss(theta, task, InnerConfig("maml", 0.1, 1, first_order=True)), theta)
    so = ad.grad(task_loss(theta, task, InnerConfig("maml", 0.1, 1)), theta)
    learner = inner_adapt(theta, task, InnerConfig("maml", 0.1, 1), differentiable=False)
    w = {k: Tensor(v.data, True) for k, v in learner.w.items()}
    at_w = ad.grad(query_loss(BaseLearner(w, ()), task), w)
    assert all(np.allclose(fo[k].data, at_w[k].data, rtol=1e-12, atol=1e-14) for k in theta)
    assert any(not np.allclose(fo[k].data, so[k].data) for k in theta)


def test_zero_inner_lr_gives_plain_gradient_exactly():
    theta, task = sine_setup(3)
    adapted = ad.grad(task_loss(theta, task, InnerConfig("maml", 0.0, 1)), theta)
    plain = ad.grad(query_loss(BaseLearner(theta, ()), task), theta)
    assert all(np.array_equal(adapted[k].data, plain[k].data) for k in theta)


def test_query_loss_examples():
    w = {"head.weight": Tensor(np.zeros((1, 1))), "head.bias": Tensor(np.zeros(1))}
    t = Task(np.ones((1, 1)), np.ones((1, 1)), np.array([[0.0], [1.0]]), np.array([[1.0], [-1.0]]))
    assert query_loss(BaseLearner(w, ()), t).item() == 1.0
    exact = Task(np.ones((1, 1)), np.ones((1, 1)), np.ones((2, 1)), np.zeros((2, 1)))
    assert query_loss(BaseLearner(w, ()), exact).item() == 0.0
    c = {"head.weight": Tensor(np.zeros((2, 5))), "head.bias": Tensor(np.zeros(5))}
    cls = Task(np.zeros((5, 2)), np.arange(5), np.zeros((3, 2)), np.array([0, 3, 4]), n_classes=5)
    assert query_loss(BaseLearner(c, ()), cls).item() == pytest.approx(math.log(5), abs=1e-12)


def two_way(xs, ys, xq, yq):
    return Task(np.array(xs, float), np.array(ys), np.array(xq, float), np.array(yq), n_classes=2)


def test_proto_examples():
    # identity encoder: theta has no encoder layers
    far = two_way([[0, 0], [30, 0]], [0, 1], [[0, 0]], [0])
    assert proto_loss({}, far).item() < 1e-6
    sym = two_way([[-1, 0], [1, 0]], [0, 1], [[0, 3]], [1])
    assert proto_loss({}, sym).item() == pytest.approx(math.log(2), abs=1e-15)
    # hand oracle: distances 0.5 and 2.5 -> loss log(1 + e^-2)
    toy = two_way([[0, 0], [2, 0]], [0, 1], [[0.5, 0.5]], [0])
    assert abs(proto_loss({}, toy).item() - math.log1p(math.exp(-2.0))) < 1e-9


def test_proto_permutation_invariance_exact():
    rng = np.random.default_rng(5)
    theta = init_params(EncoderSpec(2, [16, 16]), HeadSpec("prototype-metric", 5), rng)
    task = sample_blob_task(BLOB_SOURCE, 5, 5, 15, rng)
    base = proto_loss(theta, task).item()
    for _ in range(10):
        perm = rng.permutation(len(task.y_support))
        shuffled = Task(task.x_support[perm], task.y_support[perm], task.x_query, task.y_query, n_classes=5)
        assert proto_loss(theta, shuffled).item() == base
        phi = FiSLParams(Tensor(np.linspace(0.5, 2, 16)), Tensor(np.linspace(-1, 1, 16)))
        assert proto_loss(theta, fisl_transform_task(phi, shuffled)).item() == proto_loss(theta, fisl_transform_task(phi, task)).item()


def test_proto_rejects_missing_class():
    with pytest.raises(ValueError):
        proto_logits(Tensor(np.zeros((2, 2))), [0, 0], Tensor(np.zeros((1, 2))), 2)


def test_proto_has_no_inner_step():
    with pytest.raises(ValueError):
        inner_adapt({}, two_way([[0, 0], [1, 1]], [0, 1], [[0, 0]], [0]), InnerConfig("proto"))


def test_baseline_step_zero_lr_keeps_theta():
    theta, task = sine_setup(6)
    new, loss = baseline_meta_step(theta, [task, task], InnerConfig(), Adam(lr=0.0))
    assert np.isfinite(loss)
    assert all(np.array_equal(new[k].data, theta[k].data) for k in theta)


def test_baseline_step_at_optimum_moves_within_eps():
    theta = {"head.weight": Tensor(np.array([[2.0]]), True), "head.bias": Tensor(np.array([1.0]), True)}
    new, loss = baseline_meta_step(theta, [scalar_task(1.0, 3.0)], InnerConfig("maml", 0.1, 1), Adam())
    assert loss == 0.0
    assert all(np.array_equal(new[k].data, theta[k].data) for k in theta)


def test_baseline_step_reduces_loss_and_mean_vs_sum():
    theta, task = sine_setup(7)
    opt = Adam(lr=0.01)
    losses = []
    for _ in range(30):
        theta, loss = baseline_meta_step(theta, [task], InnerConfig(), opt)
        losses.append(loss)
    assert losses[-1] < losses[0]
    with pytest.raises(ValueError):
        baseline_meta_step(theta, [], InnerConfig(), opt)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_baseline_step_rejects_non_finite():
    theta = {"head.weight": Tensor(np.array([[np.inf]]), True), "head.bias": Tensor(np.zeros(1), True)}
    with pytest.raises(NonFiniteLossError):
        baseline_meta_step(theta, [scalar_task(1.0, 3.0)], InnerConfig("anil", 0.1, 1), Adam())


def test_adam_state_roundtrip():
    theta, task = sine_setup(8)
    opt = Adam()
    theta, _ = baseline_meta_step(theta, [task], InnerConfig(), opt)
    clone = Adam.from_state_dict(opt.state_dict())
    a, _ = baseline_meta_step(theta, [task], InnerConfig(), opt)
    b, _ = baseline_meta_step(theta, [task], InnerConfig(), clone)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_inner_config_validation():
    with pytest.raises(ValueError):
        InnerConfig("sgd")
    with pytest.raises(ValueError):
        InnerConfig(inner_steps=0)


def test_training_replay_is_bitwise_identical_for_100_iterations():
    def run():
        theta, _ = sine_setup(9, hidden=(10,))
        rng, opt, smp, losses = np.random.default_rng(9), Adam(), SineSampler(SINE_SOURCE), []
        for _ in range(100):
            theta, loss = baseline_meta_step(theta, [smp(rng), smp(rng)], InnerConfig(), opt)
            losses.append(loss)
        return losses

    assert run() == run()
