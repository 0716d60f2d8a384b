"""Loss, optimizer, evaluation, training-loop, and gradient-check tests.

Loss values are checked against closed-form cases (uniform logits, a
dominant correct logit) and an independent float64 log-sum-exp
recomputation.  Optimizer updates are checked against hand-applied update
rules.  The training loop is checked for determinism and for actually
reducing the loss on a small task.
"""

import numpy as np
import pytest

from cvvt import nn
from cvvt.data import SynthTaskSpec, make_dataset, Clip
from cvvt.model import ModelConfig, build_model
from cvvt.tensor import Tensor, compose, accumulate_grad
from cvvt.train import (Adam, EvalResult, NumericalError, SGD, TrainConfig,
                        clips_to_batch, cross_entropy, evaluate, fit_epoch,
                        global_grad_norm, grad_check_function,
                        grad_check_model, make_optimizer, train_loop)

# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits_gives_log_k():
    for k in (2, 4, 7):
        logits = Tensor(np.zeros((3, k), np.float32))
        loss = cross_entropy(logits, np.array([0, k - 1, k // 2]))
        assert abs(float(loss.data) - np.log(k)) < 1e-6


def test_cross_entropy_confident_correct_goes_to_zero():
    logits = np.zeros((1, 3), np.float32)
    logits[0, 1] = 1e4
    loss = cross_entropy(Tensor(logits), np.array([1]))
    assert 0.0 <= float(loss.data) < 1e-6


def test_cross_entropy_matches_float64_formula():
    rng = np.random.default_rng(7)
    z = (rng.standard_normal((6, 5)) * 3).astype(np.float32)
    labels = rng.integers(0, 5, size=6)
    z64 = z.astype(np.float64)
    m = z64.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z64 - m).sum(axis=1))
    expected = (lse - z64[np.arange(6), labels]).mean()
    got = float(cross_entropy(Tensor(z), labels).data)
    assert abs(got - expected) < 1e-6


def test_cross_entropy_gradient_is_softmax_minus_onehot_over_batch():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 3)).astype(np.float32)
    labels = np.array([2, 0, 1, 1])
    logits = Tensor(z, requires_grad=True)
    cross_entropy(logits, labels).backward()
    z64 = z.astype(np.float64)
    p = np.exp(z64 - z64.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(4), labels] -= 1.0
    assert np.allclose(logits.grad, p / 4, atol=1e-6)


def test_cross_entropy_is_stable_for_large_magnitude_logits():
    z = np.array([[3e4, -3e4, 0.0]], np.float32)
    loss = cross_entropy(Tensor(z), np.array([1]))
    assert np.isfinite(float(loss.data))


def test_cross_entropy_rejects_bad_labels_and_shapes():
    logits = Tensor(np.zeros((2, 3), np.float32))
    with pytest.raises(ValueError):
        cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(logits, np.array([-1, 0]))
    with pytest.raises(ValueError):
        cross_entropy(logits, np.array([0]))
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros(3, np.float32)), np.array([0]))


# ---------------------------------------------------------------------------
# config and optimizers


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=-1.0)


def _param(value):
    t = Tensor(np.array(value, np.float32), requires_grad=True)
    return t


def test_sgd_momentum_matches_hand_computation():
    p = _param([1.0])
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = np.array([0.5], np.float32)
    opt.step()                       # v = 0.5, p = 1 - 0.05
    assert np.allclose(p.data, [0.95])
    p.grad = np.array([0.5], np.float32)
    opt.step()                       # v = 0.9*0.5 + 0.5 = 0.95
    assert np.allclose(p.data, [0.95 - 0.1 * 0.95])


def test_sgd_zero_momentum_is_plain_descent():
    p = _param([2.0])
    opt = SGD([p], lr=0.5, momentum=0.0)
    p.grad = np.array([1.0], np.float32)
    opt.step()
    assert np.allclose(p.data, [1.5])


def test_adam_first_step_is_signed_lr():
    # After bias correction the first update is lr * g / (|g| + eps).
    p = _param([1.0, -1.0])
    opt = Adam([p], lr=0.01)
    p.grad = np.array([100.0, -0.5], np.float32)
    opt.step()
    assert np.allclose(p.data, [1.0 - 0.01, -1.0 + 0.01], atol=1e-6)


def test_adam_matches_hand_computed_second_step():
    p = _param([0.0])
    opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999)
    g1, g2 = 1.0, 2.0
    p.grad = np.array([g1], np.float32)
    opt.step()
    p.grad = np.array([g2], np.float32)
    opt.step()
    m2 = 0.9 * (0.1 * g1) + 0.1 * g2
    v2 = 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2
    mhat = m2 / (1 - 0.9 ** 2)
    vhat = v2 / (1 - 0.999 ** 2)
    step1 = 0.1 * (0.1 * g1 / (1 - 0.9)) / (
        np.sqrt(0.001 * g1 ** 2 / (1 - 0.999)) + 1e-8)
    expected = -step1 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.allclose(p.data, [expected], atol=1e-6)


def test_optimizer_step_requires_gradients():
    p = _param([1.0])
    for opt in (SGD([p], lr=0.1), Adam([p], lr=0.1)):
        p.grad = None
        with pytest.raises(RuntimeError, match="missing gradients"):
            opt.step()


def test_gradient_clipping_rescales_to_the_threshold():
    p1, p2 = _param([3.0]), _param([4.0])
    p1.grad = np.array([3.0], np.float32)
    p2.grad = np.array([4.0], np.float32)
    assert abs(global_grad_norm([p1, p2]) - 5.0) < 1e-6
    opt = SGD([p1, p2], lr=0.0, momentum=0.0, clip_norm=1.0)
    opt.step()
    assert abs(global_grad_norm([p1, p2]) - 1.0) < 1e-6
    assert np.allclose(p1.grad, [0.6])


def test_gradient_clipping_leaves_small_gradients_alone():
    p = _param([1.0])
    p.grad = np.array([0.25], np.float32)
    opt = Adam([p], lr=0.0, clip_norm=10.0)
    opt.step()
    assert np.allclose(p.grad, [0.25])


def test_make_optimizer_dispatches_on_config():
    p = _param([1.0])
    assert isinstance(make_optimizer([p], TrainConfig(optimizer="sgd",
                                                      lr=0.1)), SGD)
    assert isinstance(make_optimizer([p], TrainConfig(optimizer="adam",
                                                      lr=0.1)), Adam)


# ---------------------------------------------------------------------------
# evaluation


class _ScriptedNet:
    """Predicts the class stored in each clip's first voxel."""

    def __init__(self, num_classes):
        self.config = ModelConfig(num_classes=num_classes)
        self.training = True

    def train(self, mode=True):
        self.training = mode

    def eval(self):
        self.training = False

    def __call__(self, x):
        encoded = x.data[:, 0, 0, 0, 0].astype(np.int64)
        logits = np.zeros((x.shape[0], self.config.num_classes), np.float32)
        logits[np.arange(x.shape[0]), encoded] = 10.0
        return Tensor(logits)


def _scripted_clip(label, predicted):
    video = np.zeros((3, 2, 4, 4), np.float32)
    video[0, 0, 0, 0] = predicted
    return Clip(video=video, label=label, seed=0)


def test_evaluate_builds_the_confusion_matrix():
    net = _ScriptedNet(num_classes=4)
    clips = [_scripted_clip(0, 0), _scripted_clip(0, 1),
             _scripted_clip(1, 1), _scripted_clip(2, 2),
             _scripted_clip(3, 2), _scripted_clip(3, 3)]
    result = evaluate(net, clips, batch_size=4)
    assert isinstance(result, EvalResult)
    assert result.count == 6
    assert abs(result.accuracy - 4 / 6) < 1e-9
    expected = np.zeros((4, 4), np.int64)
    for true, pred in [(0, 0), (0, 1), (1, 1), (2, 2), (3, 2), (3, 3)]:
        expected[true, pred] += 1
    assert np.array_equal(result.confusion, expected)
    assert result.confusion.sum() == result.count


def test_evaluate_restores_training_mode_and_rejects_empty():
    net = _ScriptedNet(num_classes=2)
    net.train()
    evaluate(net, [_scripted_clip(0, 0)])
    assert net.training
    with pytest.raises(ValueError, match="empty"):
        evaluate(net, [])


def test_clips_to_batch_stacks_videos_and_labels():
    clips = [_scripted_clip(1, 0), _scripted_clip(3, 2)]
    x, labels = clips_to_batch(clips)
    assert x.shape == (2, 3, 2, 4, 4)
    assert x.data.dtype == np.float32
    assert labels.tolist() == [1, 3]


# ---------------------------------------------------------------------------
# training loop

_TINY_TASK = SynthTaskSpec(num_classes=2, frames=2, height=16, width=16,
                           blob_radius=2.0, speed=1.0, noise_std=0.02,
                           distractors=1)
_TINY_MODEL = ModelConfig(stem_channels=(64, 128), cnn_blocks=1,
                          patch=(1, 2, 2), embed_dim=16, depth=1, heads=2,
                          num_classes=2)


def _tiny_setup(n_train=24, seed=0):
    net = build_model(_TINY_MODEL, seed=seed)
    clips = make_dataset(_TINY_TASK, n_train, master_seed=seed)
    return net, clips


def test_fit_epoch_returns_finite_mean_loss():
    net, clips = _tiny_setup()
    opt = make_optimizer(net.parameters(), TrainConfig(lr=1e-3))
    rng = np.random.default_rng(0)
    loss = fit_epoch(net, opt, clips, rng, batch_size=8)
    assert np.isfinite(loss)
    assert loss > 0


def test_fit_epoch_raises_on_non_finite_loss():
    net, clips = _tiny_setup()
    head_weight = dict(net.named_parameters())["head.weight"]
    head_weight.data[0, 0] = np.nan
    opt = make_optimizer(net.parameters(), TrainConfig(lr=1e-3))
    with pytest.raises(NumericalError, match="non-finite"):
        fit_epoch(net, opt, clips, np.random.default_rng(0), batch_size=8)


def test_train_loop_reduces_loss_over_five_epochs():
    net, clips = _tiny_setup(n_train=32)
    config = TrainConfig(optimizer="adam", lr=3e-3, batch_size=8, epochs=5,
                         seed=0)
    history = train_loop(net, clips, [], config)
    losses = [h["train_loss"] for h in history]
    assert len(losses) == 5
    assert losses[-1] < losses[0]


def test_train_loop_reports_test_accuracy_and_emits_records():
    net, clips = _tiny_setup(n_train=16)
    test_clips = make_dataset(_TINY_TASK, 8, master_seed=99)
    seen = []
    config = TrainConfig(lr=1e-3, batch_size=8, epochs=2, seed=0)
    history = train_loop(net, clips, test_clips, config, emit=seen.append)
    assert seen == history
    for epoch, record in enumerate(history, start=1):
        assert record["epoch"] == epoch
        assert 0.0 <= record["test_accuracy"] <= 1.0


def test_train_loop_is_bitwise_deterministic():
    runs = []
    for _ in range(2):
        net, clips = _tiny_setup(n_train=16)
        config = TrainConfig(lr=1e-3, batch_size=4, epochs=2, seed=5)
        history = train_loop(net, clips, [], config)
        state = {k: v.data.copy() for k, v in net.named_states()}
        runs.append((history, state))
    assert runs[0][0] == runs[1][0]
    for key in runs[0][1]:
        assert np.array_equal(runs[0][1][key], runs[1][1][key]), key


def test_sgd_training_also_learns():
    net, clips = _tiny_setup(n_train=32)
    config = TrainConfig(optimizer="sgd", lr=0.02, momentum=0.9,
                         batch_size=8, epochs=5, seed=0)
    history = train_loop(net, clips, [], config)
    assert history[-1]["train_loss"] < history[0]["train_loss"]


# ---------------------------------------------------------------------------
# gradient checking


def test_grad_check_function_linear_is_extremely_accurate():
    rng = np.random.default_rng(0)
    report = grad_check_function(
        lambda x, w, b: nn.linear(x, w, b),
        [rng.standard_normal((4, 6)), rng.standard_normal((6, 3)),
         rng.standard_normal(3)])
    assert report.ok
    assert report.worst < 1e-4
    assert set(report.groups) == {"arg0", "arg1", "arg2"}


def test_grad_check_function_flags_a_wrong_backward_rule():
    def broken_square(x):
        def backward(g):
            accumulate_grad(x, 3.0 * x.data * g)  # should be 2x
        return compose(x.data * x.data, (x,), backward)

    report = grad_check_function(broken_square,
                                 [np.array([1.0, 2.0, -0.5])])
    assert not report.ok
    assert report.failures == ["arg0"]
    text = report.to_text()
    assert "FAIL" in text and "OVER" in text


def test_grad_check_report_text_lists_groups():
    rng = np.random.default_rng(1)
    report = grad_check_function(lambda x: nn.gelu(x),
                                 [rng.standard_normal((3, 3))])
    text = report.to_text()
    assert "PASS" in text
    assert "arg0" in text


@pytest.mark.parametrize("variant", ["factorized_self",
                                     "factorized_dot_product"])
def test_grad_check_model_passes_for_both_variants(variant):
    config = ModelConfig(stem_channels=(64, 128), cnn_blocks=1,
                         patch=(1, 2, 2), embed_dim=16, depth=1, heads=2,
                         num_classes=3, variant=variant)
    net = build_model(config, seed=0)
    x = np.random.default_rng(1).standard_normal((2, 3, 2, 8, 8))
    report = grad_check_model(net, x, np.array([0, 2]), seed=3)
    assert report.ok, report.to_text()
    assert report.worst < 1e-2
    assert len(report.groups) >= 30


def test_grad_check_model_leaves_the_original_model_untouched():
    net = build_model(_TINY_MODEL, seed=0)
    before = {k: v.data.copy() for k, v in net.named_states()}
    x = np.random.default_rng(2).standard_normal((1, 3, 2, 8, 8))
    grad_check_model(net, x, np.array([1]), seed=0)
    for key, value in net.named_states():
        assert np.array_equal(before[key], value.data), key
        assert value.data.dtype == np.float32
