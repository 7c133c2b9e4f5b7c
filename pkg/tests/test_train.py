import csv
from dataclasses import fields

import numpy as np
import pytest

from atmskd.augment import AugmentConfig
from atmskd.checkpoint import load_checkpoint
from atmskd.data import Dataset, split
from atmskd.distill import KDLossConfig, scheduled_temperature
from atmskd.errors import ConfigurationError, ModelMismatchError, NumericalError
from atmskd.models import ModelSpec, build_teacher
from atmskd.train import (
    DIRECT,
    DISTILL,
    EPOCH_CSV_FIELDS,
    EpochRecord,
    Splits,
    TrainConfig,
    _fit,
    _streams,
    _student,
    direct_train_student,
    distill_student,
    evaluate_split,
    fixed_temp_distill,
    save_run,
    train_teacher,
    weights_digest,
)

TINY = ModelSpec(stem_channels_base=8, stage_channels_base=(8, 8, 16, 16), blocks_per_stage=(1, 1, 1, 1))


def _cfg(**kw):
    kw.setdefault("epochs", 3)
    kw.setdefault("batch_size", 8)
    return TrainConfig.student_defaults(**kw)


@pytest.fixture(scope="module")
def teacher(tiny_splits):
    net, _ = train_teacher(tiny_splits, TrainConfig.teacher_defaults(epochs=2, batch_size=8), base=TINY)
    return net


def test_config_defaults():
    t, s = TrainConfig.teacher_defaults(), TrainConfig.student_defaults()
    assert (t.epochs, t.batch_size, t.lr, t.weight_decay, t.label_smoothing) == (30, 16, 1e-3, 1e-4, 0.1)
    assert (s.epochs, s.batch_size, s.lr) == (80, 32, 2e-3)


def test_best_epoch_is_max_of_history(tiny_splits, teacher):
    net, rep = distill_student(teacher, 0.75, tiny_splits, _cfg(epochs=4), base=TINY)
    accs = [r.val_acc for r in rep.epochs]
    assert rep.best_val_acc == max(accs)
    assert rep.best_epoch == accs.index(max(accs))
    assert len(rep.epochs) == 4 and rep.mode == DISTILL
    # restored weights are the best-epoch weights
    assert evaluate_split(net, tiny_splits.val)[1] == rep.best_val_acc


def test_report_schema_shared_across_arms(tiny_splits, teacher):
    cfg = _cfg(epochs=1)
    reports = [
        distill_student(teacher, 0.75, tiny_splits, cfg, base=TINY)[1],
        direct_train_student(0.75, tiny_splits, cfg, base=TINY)[1],
        fixed_temp_distill(teacher, 0.75, tiny_splits, cfg, base=TINY)[1],
    ]
    keys = [set(r.to_dict()) for r in reports]
    assert keys[0] == keys[1] == keys[2]
    names = {f.name for f in fields(EpochRecord)}
    for r in reports:
        assert set(r.to_dict()["epochs"][0]) == names


def test_epoch_csv_bit_identical_across_runs(tmp_path, tiny_splits, teacher):
    blobs = []
    for i in range(2):
        net, rep = distill_student(teacher, 0.75, tiny_splits, _cfg(), base=TINY)
        save_run(tmp_path / str(i), net, rep)
        blobs.append(((tmp_path / str(i) / "epochs.csv").read_bytes(), weights_digest(net)))
    assert blobs[0] == blobs[1]
    rows = list(csv.reader((tmp_path / "0" / "epochs.csv").open()))
    assert tuple(rows[0]) == EPOCH_CSV_FIELDS
    assert len(rows) == 1 + 2 * 3
    assert (tmp_path / "0" / "timings.csv").exists()


def test_seed_changes_run(tiny_splits):
    a = direct_train_student(0.75, tiny_splits, _cfg(epochs=1, seed=1), base=TINY)[0]
    b = direct_train_student(0.75, tiny_splits, _cfg(epochs=1, seed=2), base=TINY)[0]
    assert weights_digest(a) != weights_digest(b)


def test_direct_equals_distillation_with_zero_alpha(tiny_splits, teacher):
    cfg, kd, aug = _cfg(), KDLossConfig(), AugmentConfig()
    _, direct = direct_train_student(0.75, tiny_splits, cfg, kd, aug, base=TINY)
    zero = KDLossConfig(alpha=0.0, beta=1.0, gamma=kd.gamma)
    _, distilled = distill_student(teacher, 0.75, tiny_splits, cfg, zero, aug, base=TINY)
    assert [r.train_loss for r in direct.epochs] == [r.train_loss for r in distilled.epochs]
    assert [r.val_acc for r in direct.epochs] == [r.val_acc for r in distilled.epochs]
    assert direct.mode == DIRECT and all(t is None for t in direct.taus)


def test_fixed_tau_constant(tiny_splits, teacher):
    _, rep = fixed_temp_distill(teacher, 0.75, tiny_splits, _cfg(), tau_fixed=4.0, base=TINY)
    assert rep.taus == [4.0, 4.0, 4.0]
    with pytest.raises(ConfigurationError):
        fixed_temp_distill(teacher, 0.75, tiny_splits, _cfg(), tau_fixed=0.0, base=TINY)


def test_teacher_weights_untouched(tiny_splits, teacher):
    before = weights_digest(teacher)
    distill_student(teacher, 0.75, tiny_splits, _cfg(epochs=2), base=TINY)
    fixed_temp_distill(teacher, 0.75, tiny_splits, _cfg(epochs=1), base=TINY)
    assert weights_digest(teacher) == before


def test_tau_follows_previous_epoch_gap(tiny_splits, teacher):
    epochs = 5
    _, rep = distill_student(teacher, 1.0, tiny_splits, _cfg(epochs=epochs), base=TINY)
    gaps = [0.0] + [r.gap for r in rep.epochs[:-1]]
    expected = [scheduled_temperature(4.5, 3.0, epochs, 0.5, e, g) for e, g in enumerate(gaps)]
    assert rep.taus == expected
    assert rep.taus[0] == 4.5
    for r in rep.epochs:
        assert r.gap == rep.teacher_val_acc - r.val_acc


def test_checkpoint_reload_reproduces_best(tmp_path, tiny_splits, teacher):
    net, rep = distill_student(teacher, 0.75, tiny_splits, _cfg(), base=TINY)
    path = save_run(tmp_path, net, rep)
    again = load_checkpoint(path)
    assert evaluate_split(again, tiny_splits.val) == evaluate_split(net, tiny_splits.val)
    assert evaluate_split(again, tiny_splits.val)[1] == rep.best_val_acc


def test_class_count_mismatch(tiny_splits):
    three = build_teacher(3, 32, base=TINY)
    with pytest.raises(ModelMismatchError):
        distill_student(three, 0.75, tiny_splits, _cfg(epochs=1), base=TINY)
    with pytest.raises(ModelMismatchError):
        fixed_temp_distill(three, 0.75, tiny_splits, _cfg(epochs=1), base=TINY)


def test_unknown_width_needs_explicit_start(tiny_splits, teacher):
    with pytest.raises(ConfigurationError):
        distill_student(teacher, 0.9, tiny_splits, _cfg(epochs=1), base=TINY)
    _, rep = distill_student(teacher, 0.9, tiny_splits, _cfg(epochs=1), t_init=5.0, base=TINY)
    assert rep.taus == [5.0]


def test_divergence_raises(tiny_splits):
    cfg = _cfg(epochs=1, lr=1e300, grad_clip=0.0)
    streams = _streams(cfg.seed)
    net = _student(0.75, tiny_splits, streams, TINY)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError):
            _fit(net, tiny_splits, cfg, DIRECT, width=0.75, streams=streams,
                 kd=KDLossConfig(alpha=0.0, beta=1.0), augment=None)


def test_teacher_reaches_high_accuracy_on_easy_data():
    # two well separated constant-colour classes
    rng = np.random.default_rng(0)
    imgs = np.concatenate([np.full((30, 3, 32, 32), -1.0), np.full((30, 3, 32, 32), 1.0)])
    imgs += 0.1 * rng.standard_normal(imgs.shape)
    ds = Dataset(imgs, np.repeat([0, 1], 30), ("a", "b"))
    splits = Splits(*split(ds))
    _, rep = train_teacher(splits, TrainConfig.teacher_defaults(epochs=8, batch_size=8), base=TINY)
    assert rep.best_val_acc == 100.0
