import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from histpetl import tensor as T
from histpetl.data import DatasetBundle, Split, SyntheticSpec, gen_synthetic
from histpetl.errors import ConfigError, ContractError, DimensionError
from histpetl.layers import Parameter
from histpetl.model import EncoderModel, ModelConfig, head_forward, trunk_forward
from histpetl.petl import PetlConfig
from histpetl.tensor import Tensor
from histpetl.training import (FULL_FINETUNE_LR, PETL_LR, AdamW, EarlyStopping, RunReport, TrainConfig,
                               adamw_step, cross_entropy, evaluate, train)

TOY = ModelConfig(dim=8, heads=2, blocks=2, in_features=4, max_len=6, classes=3)
TOY_DATA = SyntheticSpec(classes=3, train_per_class=8, val_per_class=4, test_per_class=4,
                         seq_len=6, features=4, seed=1)


# -- cross-entropy ----------------------------------------------------------


def test_cross_entropy_uniform_logits():
    assert abs(cross_entropy(Tensor([0.0, 0.0]), 0).item() - math.log(2)) < 1e-15
    assert abs(cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4]).item() - math.log(5)) < 1e-15


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 3)) * 5
    labels = [2, 0, 1, 1]
    ref = sum(-math.log(oracles.softmax_row(list(row))[y]) for row, y in zip(logits, labels)) / 4
    assert abs(cross_entropy(Tensor(logits), labels).item() - ref) < 1e-13


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    labels = [3, 0, 2]
    T.backward(cross_entropy(x, labels))
    expected = np.array([oracles.softmax_row(list(r)) for r in x.data])
    expected[np.arange(3), labels] -= 1.0
    np.testing.assert_allclose(x.grad, expected / 3, rtol=0, atol=1e-15)


def test_cross_entropy_large_logits_stay_finite():
    loss = cross_entropy(Tensor([[1000.0, -1000.0]]), [1]).item()
    assert loss == 2000.0


def test_cross_entropy_label_errors():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])
    with pytest.raises(DimensionError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 1, 2])


# -- AdamW ------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(grads=st.lists(st.floats(-10, 10), min_size=1, max_size=20), theta=st.floats(-5, 5),
       wd=st.sampled_from([0.0, 0.01, 0.1]))
def test_adamw_matches_scalar_trace(grads, theta, wd):
    p = Parameter(np.array([theta]))
    opt = AdamW([p], TrainConfig(weight_decay=wd))
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    assert abs(p.data[0] - oracles.adamw_scalar(theta, grads, wd=wd)) < 1e-12


def test_adamw_first_step_moves_by_lr():
    # bias correction makes the first update lr * sign(g) (up to eps)
    p = Parameter(np.array([0.0, 0.0]))
    opt = AdamW([p], TrainConfig(weight_decay=0.0))
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [-PETL_LR, PETL_LR], rtol=1e-7)


def test_adamw_skips_frozen_parameters():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    b.trainable = False
    opt = AdamW([a, b], TrainConfig())
    assert opt.params == [a]
    a.grad = np.ones(2)
    opt.step()
    assert np.all(b.data == 1.0) and np.all(a.data < 1.0)


def test_adamw_step_contracts():
    p = Parameter(np.ones(2))
    state = ([np.zeros(2)], [np.zeros(2)])
    with pytest.raises(ContractError):
        adamw_step([p], [np.ones(2)], state, TrainConfig(), 0)
    with pytest.raises(DimensionError):
        adamw_step([p], [np.ones(3)], state, TrainConfig(), 1)


def test_train_config_validation_and_method_lr():
    assert TrainConfig.for_method("hpt").lr == PETL_LR == 1e-3
    assert TrainConfig.for_method("full_finetune").lr == FULL_FINETUNE_LR == 1e-5
    assert TrainConfig.for_method("hpt", lr=0.5).lr == 0.5
    for kw in ({"lr": 0}, {"patience": 0}, {"batch_size": 0}, {"max_epochs": 0},
               {"weight_decay": -1}, {"betas": (1.0, 0.9)}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


# -- early stopping ---------------------------------------------------------


def run_stopper(losses, patience):
    s = EarlyStopping(patience)
    for loss in losses:
        if s.update(loss):
            break
    return s.epoch, s.best_epoch


def test_early_stopping_hand_trace():
    # ties never count as improvement
    assert run_stopper([3, 2, 2, 2], 2) == (4, 2)
    assert run_stopper([3, 2, 1], 5) == (3, 3)
    assert run_stopper([1] + [1] * 20, 20) == (21, 1)


@settings(max_examples=300, deadline=None)
@given(losses=st.lists(st.integers(0, 6).map(float), min_size=1, max_size=60),
       patience=st.integers(1, 25))
def test_early_stopping_matches_reference(losses, patience):
    assert run_stopper(losses, patience) == oracles.early_stop_trace(losses, patience)


def test_early_stopping_rejects_bad_patience():
    with pytest.raises(ConfigError):
        EarlyStopping(0)


# -- evaluate ---------------------------------------------------------------


def test_evaluate_fixed_logits():
    split = Split(np.zeros((4, 1, 1)), [0, 1, 1, 0], 2)
    logits = np.array([[2.0, 0.0], [0.0, 2.0], [2.0, 0.0], [0.0, 0.0]])
    loss, acc = evaluate(lambda frames: Tensor(logits[: frames.shape[0]]), split)
    ref = -sum(math.log(oracles.softmax_row(list(r))[y]) for r, y in zip(logits, [0, 1, 1, 0])) / 4
    # argmax ties resolve to the first class
    assert acc == 0.75 and abs(loss - ref) < 1e-14


def test_evaluate_is_batch_size_independent():
    data = gen_synthetic(TOY_DATA)
    m = EncoderModel(TOY, PetlConfig(kind="hpt", bins=4), seed=0)
    a = evaluate(m, data.test, batch_size=5)
    b = evaluate(m, data.test, batch_size=256)
    assert a[1] == b[1] and abs(a[0] - b[0]) < 1e-12


def test_evaluate_empty_split():
    with pytest.raises(ContractError):
        evaluate(lambda f: f, Split(np.zeros((0, 1, 1)), np.zeros(0), 2))


# -- training loop ----------------------------------------------------------


def small_train(cfg=PetlConfig(kind="hpt", bins=4), seed=0, **kw):
    data = gen_synthetic(TOY_DATA)
    model = EncoderModel(TOY, cfg, seed=seed)
    report = train(model, data, TrainConfig(batch_size=4, max_epochs=3, seed=seed, **kw))
    return model, data, report


def test_training_is_deterministic():
    _, _, a = small_train()
    _, _, b = small_train()
    assert a.loss_csv() == b.loss_csv() and a.test_accuracy == b.test_accuracy


def test_frozen_parameters_bit_identical_after_training():
    data = gen_synthetic(TOY_DATA)
    model = EncoderModel(TOY, PetlConfig(kind="hpt", bins=4), seed=0)
    before = {n: p.data.tobytes() for n, p in model.named_parameters()}
    train(model, data, TrainConfig(batch_size=4, max_epochs=2))
    for n, p in model.named_parameters():
        assert (p.data.tobytes() == before[n]) == (not p.trainable), n


def test_report_fields_and_best_state_restored():
    model, data, r = small_train()
    assert r.stop_epoch == 3 == len(r.train_loss) == len(r.val_loss) == len(r.val_acc)
    assert r.best_val_loss == min(r.val_loss) and r.val_loss[r.best_epoch - 1] == r.best_val_loss
    assert r.trainable_params == model.num_parameters(trainable_only=True)
    # the restored parameters are the best-validation ones
    assert evaluate(model, data.val)[0] == r.best_val_loss
    assert evaluate(model, data.test) == (r.test_loss, r.test_accuracy)
    csv = r.loss_csv().splitlines()
    assert csv[0] == "epoch,train_loss,val_loss,val_acc" and len(csv) == 4
    assert isinstance(RunReport.to_json(r), str)


def test_patience_stops_early():
    _, _, r = small_train(patience=1, lr=10.0)
    assert r.stop_epoch <= 3
    assert r.stop_epoch == oracles.early_stop_trace(r.val_loss, 1)[0]


def test_linear_probe_cached_trunk_matches_full_forward():
    data = gen_synthetic(TOY_DATA)
    m = EncoderModel(TOY, PetlConfig(kind="linear_probe"), seed=0)
    frames = Tensor(data.test.frames)
    cached = head_forward(m, Tensor(trunk_forward(m, frames).data)).data
    np.testing.assert_allclose(cached, m(frames).data, rtol=0, atol=1e-13)
    model, _, r = small_train(PetlConfig(kind="linear_probe"))
    loss, acc = evaluate(model, data.test)
    assert acc == r.test_accuracy and abs(loss - r.test_loss) < 1e-12


def test_train_rejects_empty_split():
    data = gen_synthetic(TOY_DATA)
    empty = Split(np.zeros((0, 6, 4)), np.zeros(0), 3)
    bad = DatasetBundle(data.train, empty, data.test, 3)
    with pytest.raises(ContractError):
        train(EncoderModel(TOY, seed=0), bad, TrainConfig(max_epochs=1))
