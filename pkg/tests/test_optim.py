import numpy as np
import pytest

from transferlab.optim import LrSchedule, OptimizerState, lr_at, optimizer_step


def chexpert_style():
    # warmup over the first epoch to 0.0125, then divide by 10 at epochs 10 and 15
    return LrSchedule(kind="warmup_step", base_lr=0.0125, warmup_epochs=1.0,
                      decay_epochs=(10.0, 15.0), decay_factor=10.0,
                      steps_per_epoch=100)


def test_schedule_exact_at_warmup_end():
    s = chexpert_style()
    assert lr_at(s, 100) == 0.0125


def test_schedule_exact_after_first_decay():
    s = chexpert_style()
    assert lr_at(s, 1000) == 0.00125
    assert lr_at(s, 1001) == 0.00125


def test_schedule_second_decay():
    s = chexpert_style()
    assert lr_at(s, 1500) == pytest.approx(0.000125, rel=1e-12)


def test_schedule_warmup_is_linear_from_zero():
    s = chexpert_style()
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 50) == pytest.approx(0.0125 * 0.5, rel=1e-12)
    assert lr_at(s, 25) == pytest.approx(0.0125 * 0.25, rel=1e-12)


def test_schedule_non_increasing_after_warmup():
    s = chexpert_style()
    values = [lr_at(s, t) for t in range(100, 2000, 7)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_constant_schedule():
    s = LrSchedule(kind="constant", base_lr=0.3)
    assert lr_at(s, 0) == lr_at(s, 12345) == 0.3


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(kind="cosine")
    with pytest.raises(ValueError):
        LrSchedule(kind="warmup_step", decay_epochs=(5.0, 2.0))
    with pytest.raises(ValueError):
        LrSchedule(steps_per_epoch=0)
    with pytest.raises(ValueError):
        lr_at(LrSchedule(), -1)


def test_sgd_matches_hand_rolled_momentum(rng):
    p = rng.standard_normal(5).astype(np.float32)
    params = {"w": p.copy()}
    state = OptimizerState(kind="sgd", momentum=0.9)
    v = np.zeros(5, dtype=np.float32)
    ref = p.copy()
    for _ in range(4):
        g = rng.standard_normal(5).astype(np.float32)
        optimizer_step(state, params, {"w": g}, lr=0.1)
        v = 0.9 * v + g
        ref = ref - np.asarray(0.1 * v, dtype=np.float32)
        np.testing.assert_array_equal(params["w"], ref)


def test_adam_matches_reference_formula(rng):
    p0 = rng.standard_normal(4)
    params = {"w": p0.copy()}
    state = OptimizerState(kind="adam")
    m = np.zeros(4)
    v = np.zeros(4)
    ref = p0.copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        optimizer_step(state, params, {"w": g}, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        ref = ref - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(params["w"], ref, rtol=1e-12)


def test_missing_grads_leave_params_bitwise(rng):
    a = rng.standard_normal(3).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    params = {"a": a.copy(), "b": b.copy()}
    state = OptimizerState(kind="adam")
    optimizer_step(state, params, {"a": np.ones(3, dtype=np.float32)}, lr=0.1)
    assert params["b"].tobytes() == b.tobytes()
    assert params["a"].tobytes() != a.tobytes()


def test_shape_mismatch_rejected(rng):
    params = {"a": np.zeros(3)}
    state = OptimizerState(kind="sgd")
    with pytest.raises(ValueError, match="mismatch"):
        optimizer_step(state, params, {"a": np.zeros(4)}, lr=0.1)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        OptimizerState(kind="rmsprop")
