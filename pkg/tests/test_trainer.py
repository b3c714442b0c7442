import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from geofake.metrics import confusion, summarize
from geofake.models import ModelSpec, build
from geofake.trainer import (
    ImageSet, PlateauState, TrainConfig, checkpoint_epochs, cross_entropy, evaluate, fit, plateau_step,
    predict_logits, read_metrics,
)


def test_cross_entropy_values():
    assert cross_entropy([[0.0, 0.0]], [0]) == pytest.approx(math.log(2), abs=1e-12)
    assert cross_entropy([[0.0, 0.0]], [1]) == pytest.approx(0.693147, abs=1e-6)
    assert cross_entropy([[2.0, 0.0]], [1]) == pytest.approx(math.log(1 + math.e**2), abs=1e-12)
    assert cross_entropy([[2.0, 0.0]], [1]) == pytest.approx(2.126928, abs=1e-6)


def test_cross_entropy_torch_and_numpy_agree(rng):
    z = rng.normal(size=(16, 2)) * 5
    y = rng.integers(0, 2, 16)
    t = cross_entropy(torch.as_tensor(z), torch.as_tensor(y)).item()
    assert t == pytest.approx(cross_entropy(z, y), abs=1e-9)


def test_cross_entropy_stable_for_large_logits():
    assert cross_entropy([[1000.0, 0.0]], [0]) == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy([[1000.0, 0.0]], [1]) == pytest.approx(1000.0)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-30, 30), b=st.floats(-30, 30), c=st.floats(-50, 50), y=st.integers(0, 1))
def test_cross_entropy_shift_invariance(a, b, c, y):
    assert cross_entropy([[a, b]], [y]) == pytest.approx(cross_entropy([[a + c, b + c]], [y]), abs=1e-6)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros((0, 2)), torch.zeros(0))
    with pytest.raises(ValueError):
        cross_entropy([[0.0, 0.0]], [2])


def _trace(values, cfg):
    state, lrs = PlateauState.initial(cfg), []
    for v in values:
        state = plateau_step(state, v, cfg)
        lrs.append(state.lr)
    return lrs


def test_plateau_hand_trace():
    cfg = TrainConfig()
    lrs = _trace([1.0, 0.9, 0.9, 0.9, 0.9, 0.9], cfg)
    assert lrs == [1e-4] * 5 + [5e-5]


def test_plateau_strictly_improving_never_reduces():
    assert set(_trace([1.0 - 0.01 * i for i in range(50)], TrainConfig())) == {1e-4}


def test_plateau_floor():
    cfg = TrainConfig(lr=1e-6, min_lr=1e-6)
    assert set(_trace([1.0] * 30, cfg)) == {1e-6}


def test_plateau_accuracy_mode():
    cfg = TrainConfig(monitor="val_accuracy", patience=1)
    assert _trace([0.5, 0.6, 0.6, 0.6], cfg) == [1e-4, 1e-4, 1e-4, 5e-5]


@settings(max_examples=100, deadline=None)
@given(values=st.lists(st.floats(0.0, 2.0), min_size=1, max_size=40), patience=st.integers(0, 4),
       monitor=st.sampled_from(["val_loss", "val_accuracy"]))
def test_plateau_matches_torch_scheduler(values, patience, monitor):
    cfg = TrainConfig(patience=patience, monitor=monitor)
    opt = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode=cfg.mode, factor=cfg.factor, patience=cfg.patience, threshold=cfg.threshold,
        threshold_mode="abs", min_lr=cfg.min_lr)
    expected = []
    for v in values:
        sched.step(v)
        expected.append(opt.param_groups[0]["lr"])
    assert _trace(values, cfg) == pytest.approx(expected, rel=1e-12)


def test_plateau_rejects_nan():
    with pytest.raises(ValueError):
        plateau_step(PlateauState.initial(TrainConfig()), float("nan"), TrainConfig())


def test_checkpoint_rule():
    assert checkpoint_epochs([0.5, 0.7, 0.6]) == [1, 2]  # one overwrite, at epoch 2
    assert checkpoint_epochs([0.5, 0.5, 0.5]) == [1]
    assert checkpoint_epochs([]) == []


def test_config_validation():
    for bad in (dict(factor=1.0), dict(factor=0.0), dict(patience=-1), dict(lr=0.0), dict(monitor="loss")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def data(small_fixture):
    _, manifest = small_fixture
    train = ImageSet.from_records(manifest, manifest.records)  # all 64 images
    return train, ImageSet.from_manifest(manifest, "val")


def _cfg(tmp_path, **kw):
    base = dict(epochs=1, batch_size=8, seed=0, checkpoint_dir=str(tmp_path))
    base.update(kw)
    return TrainConfig(**base)


def test_fit_bookkeeping_and_freeze(tmp_path, data):
    train, val = data
    sub = ImageSet(train.images[:32], train.labels[:32])
    model = build(ModelSpec(family="cnn"))
    before_backbone = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    before_head = {k: v.clone() for k, v in model.head.state_dict().items()}
    calls = []
    handle = model.head.register_forward_hook(lambda m, i, o: calls.append(m.training))
    result = fit(model, sub, val, _cfg(tmp_path))
    handle.remove()
    assert [(r.epoch, r.split) for r in result.history] == [(1, "train"), (1, "val")]
    assert calls.count(True) == 4  # one forward per batch of 8
    for k, v in model.backbone.state_dict().items():
        assert torch.equal(v, before_backbone[k])
    assert any(not torch.equal(v, before_head[k]) for k, v in model.head.state_dict().items())
    assert len(read_metrics(tmp_path / "metrics.jsonl")) == 2
    assert (tmp_path / "best" / "checkpoint.pt").is_file()


def test_epoch_metrics_match_metrics_module(tmp_path, data):
    _, val = data
    model = build(ModelSpec(family="cnn", seed=3))
    row, cm = evaluate(model, val, split="val")
    preds = predict_logits(model, val).argmax(1).numpy()
    report = summarize(confusion(preds, val.labels))
    assert cm.to_list() == report["confusion"]
    assert (row.accuracy, row.precision_macro, row.recall_macro, row.f1_macro) == \
        (report["accuracy"], report["precision_macro"], report["recall_macro"], report["f1_macro"])


def test_fit_is_repeatable_and_resumable(tmp_path, data):
    train, val = data
    full = fit(build(ModelSpec(family="cnn")), train, val, _cfg(tmp_path / "a", epochs=3))
    again = fit(build(ModelSpec(family="cnn")), train, val, _cfg(tmp_path / "b", epochs=3))
    text = (tmp_path / "a" / "metrics.jsonl").read_text()
    assert text == (tmp_path / "b" / "metrics.jsonl").read_text()

    fit(build(ModelSpec(family="cnn")), train, val, _cfg(tmp_path / "c", epochs=2))
    resumed = fit(build(ModelSpec(family="cnn")), train, val, _cfg(tmp_path / "c", epochs=3), resume=True)
    assert (tmp_path / "c" / "metrics.jsonl").read_text() == text
    assert [r.to_dict() for r in resumed.history] == [r.to_dict() for r in full.history]
    assert full.checkpoint_writes == checkpoint_epochs([r.accuracy for r in full.history if r.split == "val"])
    assert again.checkpoint_writes == full.checkpoint_writes


def test_fit_rejects_empty(tmp_path, data):
    train, _ = data
    with pytest.raises(ValueError):
        fit(build(ModelSpec()), train, ImageSet([], []), _cfg(tmp_path))
