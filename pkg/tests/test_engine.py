"""Training loop: determinism, logging, freezing, early stop, divergence."""

import warnings

import numpy as np
import pytest

from transferlab.data import DatasetBundle, SynthTaskConfig, synth_dataset
from transferlab.engine import (
    LogEntry,
    TrainConfig,
    TrainingDiverged,
    TrainingLog,
    entry_metric,
    evaluate,
    steps_to_threshold,
    train,
)
from transferlab.inits import init_store
from transferlab.models import build_cbr
from transferlab.optim import LrSchedule, lr_at


@pytest.fixture(scope="module")
def bundle():
    return synth_dataset(SynthTaskConfig(kind="local-dots", n=60, seed=70, image_size=48))


@pytest.fixture(scope="module")
def graph():
    return build_cbr("cbr-tiny-desk", (48, 48, 3), 5)


@pytest.fixture(scope="module")
def store(graph):
    return init_store(graph, "random", seed=70)


def quick_config(**kw):
    base = dict(optimizer="adam", lr=1e-3, batch=8, steps=20, eval_every=10, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def test_train_leaves_input_store_untouched(graph, store, bundle):
    before = store.digest()
    final, _ = train(graph, store, bundle, quick_config())
    assert store.digest() == before
    assert final.digest() != before


def test_train_is_bitwise_deterministic(graph, store, bundle):
    a, log_a = train(graph, store, bundle, quick_config(), eval_bundle=bundle)
    b, log_b = train(graph, store, bundle, quick_config(), eval_bundle=bundle)
    assert a.digest() == b.digest()
    assert log_a.to_csv() == log_b.to_csv()
    c, _ = train(graph, store, bundle, quick_config(seed=8))
    assert c.digest() != a.digest()


def test_loss_decreases_on_easy_task(graph, store, bundle):
    _, log = train(graph, store, bundle, quick_config(steps=60, eval_every=20))
    assert log.entries[-1].loss < 0.5 * log.entries[0].loss


def test_log_cadence_and_final_step(graph, store, bundle):
    _, log = train(graph, store, bundle, quick_config(steps=12, eval_every=5))
    assert [e.step for e in log.entries] == [0, 5, 10, 12]
    assert log.wall_seconds > 0.0
    assert log.class_count == 5


def test_log_lr_follows_schedule(graph, store, bundle):
    schedule = LrSchedule(kind="warmup_step", base_lr=0.0125, warmup_epochs=1.0,
                          decay_epochs=(2.0,), decay_factor=10.0, steps_per_epoch=10)
    _, log = train(graph, store, bundle, quick_config(steps=30, eval_every=10, schedule=schedule))
    for entry in log.entries:
        assert entry.lr == lr_at(schedule, entry.step)


def test_early_stop_at_threshold(graph, store, bundle):
    config = quick_config(steps=500, eval_every=10, stop_metric="mean", stop_value=0.8)
    _, log = train(graph, store, bundle, config, eval_bundle=bundle)
    assert log.entries[-1].step < 500
    assert entry_metric(log.entries[-1], "mean") >= 0.8
    for entry in log.entries[:-1]:
        metric = entry_metric(entry, "mean")
        assert not (np.isfinite(metric) and metric >= 0.8)


def test_eval_marks_single_valued_class_nan(graph, store):
    images = np.zeros((10, 48, 48, 3), dtype=np.float32)
    labels = np.zeros((10, 5), dtype=np.float32)
    labels[:5, 0] = 1.0  # class 0 mixed, the rest all-negative
    fake = DatasetBundle(images, labels, np.arange(10, dtype=np.int64))
    aucs, loss = evaluate(graph, store, fake)
    assert np.isfinite(aucs[0])
    assert np.all(np.isnan(aucs[1:]))
    assert np.isfinite(loss)
    entry = LogEntry(step=0, loss=loss, aucs=aucs, lr=0.0)
    assert entry_metric(entry, "mean") == aucs[0]


def test_entry_metric_selects_class():
    entry = LogEntry(step=0, loss=0.0, aucs=np.array([0.2, 0.9]), lr=0.0)
    assert entry_metric(entry, "class:1") == 0.9
    with pytest.raises(ValueError, match="unknown metric"):
        entry_metric(entry, "median")


def test_steps_to_threshold_scans_logged_entries():
    log = TrainingLog(class_count=2)
    for step, auc in [(0, 0.5), (10, np.nan), (20, 0.84), (30, 0.9), (40, 0.95)]:
        log.entries.append(LogEntry(step, 0.1, np.array([auc, auc]), 0.01))
    assert steps_to_threshold(log, "mean", 0.85) == 30
    assert steps_to_threshold(log, "mean", 0.99) is None
    assert steps_to_threshold(log, "class:0", 0.5) == 0


def test_log_csv_round_trip_is_bitwise(graph, store, bundle):
    _, log = train(graph, store, bundle, quick_config(), eval_bundle=bundle)
    text = log.to_csv()
    assert text.splitlines()[0] == "step,loss,auc_0,auc_1,auc_2,auc_3,auc_4,lr"
    again = TrainingLog.from_csv(text)
    assert again.to_csv() == text
    with pytest.raises(ValueError, match="unrecognized log header"):
        TrainingLog.from_csv("time,loss\n")


def test_freeze_mask_validation(graph, store, bundle):
    mask = {name: True for name in store.names()}
    mask.pop("conv1/kernel")
    with pytest.raises(ValueError, match="missing"):
        train(graph, store, bundle, quick_config(), freeze_mask=mask)
    mask = {name: True for name in store.names()}
    mask["conv9/kernel"] = False
    with pytest.raises(ValueError, match="extra"):
        train(graph, store, bundle, quick_config(), freeze_mask=mask)
    mask = {name: True for name in store.names()}
    mask["conv1/gamma"] = False
    with pytest.raises(ValueError, match="splits layer"):
        train(graph, store, bundle, quick_config(), freeze_mask=mask)


def test_frozen_prefix_stays_bitwise_fixed(graph, store, bundle):
    frozen_prefix = ("conv1/", "conv2/")
    mask = {name: not name.startswith(frozen_prefix) for name in store.names()}
    final, _ = train(graph, store, bundle, quick_config(steps=30), freeze_mask=mask)
    for name in store.names():
        if name.startswith(frozen_prefix):
            assert final[name].tobytes() == store[name].tobytes(), name
    # moving stats of trainable BN layers did move
    assert final["conv3/moving_mean"].tobytes() != store["conv3/moving_mean"].tobytes()
    assert final["conv3/kernel"].tobytes() != store["conv3/kernel"].tobytes()


def test_flip_augment_changes_trajectory_deterministically(graph, store, bundle):
    a, _ = train(graph, store, bundle, quick_config(flip_augment=True))
    b, _ = train(graph, store, bundle, quick_config(flip_augment=True))
    plain, _ = train(graph, store, bundle, quick_config())
    assert a.digest() == b.digest()
    assert a.digest() != plain.digest()


def test_config_validation(graph, store, bundle):
    with pytest.raises(ValueError, match="smaller than batch"):
        train(graph, store, bundle, quick_config(batch=128))
    with pytest.raises(ValueError, match="batch must be >= 2"):
        train(graph, store, bundle, quick_config(batch=1))
    with pytest.raises(ValueError, match="eval_every"):
        train(graph, store, bundle, quick_config(eval_every=0))
    with pytest.raises(ValueError, match="steps >= 0"):
        train(graph, store, bundle, quick_config(steps=-1))


def test_divergence_raises_with_step(graph, store, bundle):
    config = quick_config(optimizer="sgd", lr=1e12, steps=40, eval_every=50)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(TrainingDiverged, match="non-finite loss"):
            train(graph, store, bundle, config)
