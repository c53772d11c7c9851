import math
from dataclasses import replace

import numpy as np
import pytest

from skelssl import data as D
from skelssl import model as M
from skelssl import numerics as nx
from skelssl import training as T
from skelssl.data import DataError


def tiny_data(num_classes=3, per_class=8, T_=12, J=5, seed=0):
    return D.generate_synthetic(D.SyntheticConfig(num_classes, per_class, T_, J, noise_std=0.05, seed=seed))


def tiny_model(ds, **kw):
    return M.ModelConfig(joints=ds.joint_count, hidden=kw.pop("hidden", 4), num_classes=ds.num_classes, **kw)


PRETEXT = T.PretextConfig(T_prime=6, noise_std=0.02)
SHORT = T.TrainConfig(epochs=2, batch_size=8)


def snap(params, prefix=""):
    return {k: v.tobytes() for k, v in params.snapshot(prefix).items()}


# --- schedule ----------------------------------------------------------------------


def test_lr_schedule_points():
    s = T.Schedule()
    assert s.lr(0) == 0.01
    assert s.lr(99) == 0.01
    assert s.lr(100) == pytest.approx(0.001, rel=1e-12)
    assert s.lr(10_000) == 1e-4


def test_lr_nonincreasing_and_bounded():
    s = T.Schedule()
    lrs = [s.lr(i) for i in range(0, 2000, 7)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) == 1e-4 and max(lrs) == 0.01


def test_theta_ramp():
    s = T.Schedule(moving_epochs=10)
    assert s.theta(0) == 0.0
    assert [s.theta(e) for e in range(1, 11)] == pytest.approx([k / 10 for k in range(1, 11)])
    assert s.theta(10) == 1.0 and s.theta(57) == 1.0


# --- Adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters():
    p = nx.param(np.array([[1.0, -2.0]]))
    p.grad = np.zeros_like(p.value)
    T.adam_step({"p": p}, T.AdamState(), 0.01)
    assert np.array_equal(p.value, [[1.0, -2.0]])


def test_adam_first_step_magnitude_is_lr():
    p = nx.param(np.zeros((1, 3)))
    p.grad = np.array([[3.0, -0.002, 50.0]])
    T.adam_step({"p": p}, T.AdamState(), 0.01)
    assert np.allclose(p.value, [[-0.01, 0.01, -0.01]], rtol=1e-5)


def test_adam_skips_frozen_and_gradless():
    a = nx.param(np.ones((1, 1)))
    b = nx.param(np.ones((1, 1)))
    b.requires_grad = False
    b.grad = np.ones((1, 1))
    T.adam_step({"a": a, "b": b}, T.AdamState(), 0.1)
    assert a.value[0, 0] == 1.0 and b.value[0, 0] == 1.0


def test_adam_rejects_non_finite_gradient():
    p = nx.param(np.ones((1, 1)))
    p.grad = np.array([[np.nan]])
    with pytest.raises(nx.NumericError, match="'w'"):
        T.adam_step({"w": p}, T.AdamState(), 0.1)


def test_adam_state_export_round_trip():
    p = nx.param(np.ones((2, 2)))
    p.grad = np.full((2, 2), 0.5)
    st = T.AdamState()
    T.adam_step({"enc.x": p, "cls.y": nx.param(np.ones((1, 1)))}, st, 0.1)
    back = T.import_adam(T.export_adam(st), ("enc.",))
    assert back.step == 1 and set(back.m) == {"enc.x"}
    assert np.array_equal(back.v["enc.x"], st.v["enc.x"])
    assert T.import_adam({}).step == 0


def test_fifty_steps_bitwise_deterministic():
    ds = tiny_data()
    cfg = replace(SHORT, epochs=17, batch_size=8)  # 3 batches per epoch, 51 steps
    runs = [T.train_supervised(ds, "jointly", tiny_model(ds), PRETEXT, cfg, seed=4)[0] for _ in range(2)]
    assert snap(runs[0]) == snap(runs[1])


# --- pretraining ----------------------------------------------------------------------


def test_pretraining_lowers_self_supervised_loss():
    ds = D.generate_synthetic(D.SyntheticConfig(num_classes=4, sequences_per_class=50, T=40))
    cfg = T.TrainConfig(epochs=21)
    _, rep = T.pretrain_self_supervised(ds.unlabeled(), M.ModelConfig(joints=8, hidden=8, num_classes=4), T.PretextConfig(T_prime=10), cfg, 0)
    curve = rep.column("L_self")
    assert curve[20] < curve[0]
    assert np.isnan(rep.column("L_cls")).all()


def test_pretraining_records_optimizer_state():
    ds = tiny_data()
    params, _ = T.pretrain_self_supervised(ds.unlabeled(), tiny_model(ds), PRETEXT, SHORT, 0)
    assert params.optimizer["step"][0, 0] == 6
    assert "m.enc.fwd.Wx" in params.optimizer and "m.cls.gru.Wx" not in params.optimizer


def test_pretraining_rejects_empty_task_list():
    ds = tiny_data()
    with pytest.raises(ValueError):
        T.pretrain_self_supervised(ds.unlabeled(), tiny_model(ds), PRETEXT, replace(SHORT, tasks=()), 0)


def test_single_task_report_zeroes_others():
    ds = tiny_data()
    _, rep = T.pretrain_self_supervised(ds.unlabeled(), tiny_model(ds), PRETEXT, replace(SHORT, tasks=("jigsaw",)), 0)
    assert (rep.column("L_m") == 0).all() and (rep.column("L_c") == 0).all()
    assert (rep.column("L_j") > 0).all()


@pytest.mark.parametrize("variant", [dict(prediction_variant="spatial"), dict(contrastive_ops=("spatial_mask", "spatial_jigsaw"))])
def test_spatial_variants_train(variant):
    ds = tiny_data()
    pc = replace(PRETEXT, **variant)
    _, rep = T.pretrain_self_supervised(ds.unlabeled(), tiny_model(ds), pc, SHORT, 0)
    assert np.isfinite(rep.column("L_self")).all()


def test_spatial_jigsaw_variant_trains():
    ds = tiny_data()
    _, rep = T.pretrain_self_supervised(ds.unlabeled(), tiny_model(ds, jigsaw_variant="spatial"), PRETEXT, SHORT, 0)
    assert rep.rows[0].L_j > 0


# --- supervised strategies ----------------------------------------------------------------


@pytest.fixture(scope="module")
def pretrained():
    ds = tiny_data()
    params, rep = T.pretrain_self_supervised(ds.unlabeled(), tiny_model(ds), PRETEXT, SHORT, 0)
    return ds, params, rep


def test_pretrain_strategy_freezes_encoder(pretrained):
    ds, init, _ = pretrained
    params, _ = T.train_supervised(ds, "pretrain", tiny_model(ds), PRETEXT, SHORT, 0, init=init)
    assert snap(params, "enc.") == snap(init, "enc.")
    assert snap(params, "cls.") != snap(M.init_params(tiny_model(ds), 0), "cls.")
    assert all(v.requires_grad for _, v in params)


def test_pretrain_strategy_never_differentiates_encoder(pretrained, monkeypatch):
    ds, init, _ = pretrained
    seen = []
    real = T.adam_step

    def spy(params, state, lr):
        seen.extend(k for k, v in params.items() if v.grad is not None)
        real(params, state, lr)

    monkeypatch.setattr(T, "adam_step", spy)
    T.train_supervised(ds, "pretrain", tiny_model(ds), PRETEXT, SHORT, 0, init=init)
    assert seen and not any(k.startswith("enc.") for k in seen)


def test_moving_theta_column(pretrained):
    ds, init, _ = pretrained
    cfg = replace(SHORT, epochs=12, moving_epochs=10)
    _, rep = T.train_supervised(ds, "moving", tiny_model(ds), PRETEXT, cfg, 0, init=init)
    assert list(rep.column("theta")) == pytest.approx([0.1 * k for k in range(1, 11)] + [1.0, 1.0])
    assert np.isfinite(rep.column("L_self")).all()


def test_jointly_with_zero_omega_reproduces_rand():
    ds = tiny_data()
    cfg = replace(SHORT, epochs=3, omega=0.0)
    a, ra = T.train_supervised(ds, "rand", tiny_model(ds), PRETEXT, cfg, 9)
    b, rb = T.train_supervised(ds, "jointly", tiny_model(ds), PRETEXT, cfg, 9)
    assert snap(a) == snap(b)
    assert ra.to_csv() == rb.to_csv()


def test_strategies_needing_init():
    ds = tiny_data()
    for s in ("pretrain", "moving", "finetune"):
        with pytest.raises(ValueError, match=f"{s} requires --init"):
            T.train_supervised(ds, s, tiny_model(ds), PRETEXT, SHORT, 0)
    with pytest.raises(ValueError):
        T.train_supervised(ds, "bogus", tiny_model(ds), PRETEXT, SHORT, 0)


def test_supervised_rejects_unlabeled_samples():
    ds = tiny_data()
    with pytest.raises(DataError):
        T.train_supervised(ds.unlabeled(), "rand", tiny_model(ds), PRETEXT, SHORT, 0)


def test_fine_tuning_resumes_pretraining_moments(pretrained, monkeypatch):
    ds, init, _ = pretrained
    states = []
    real = T._run_phase

    def spy(*args, **kw):
        st = args[-1] if len(args) == 8 else kw.get("state")
        states.append((st.step, set(st.m)))
        return real(*args, **kw)

    monkeypatch.setattr(T, "_run_phase", spy)
    T.train_supervised(ds, "finetune", tiny_model(ds), PRETEXT, SHORT, 0, init=init)
    step, names = states[0]
    assert step == init.optimizer["step"][0, 0]
    assert names == {k[2:] for k in init.optimizer if k.startswith("m.")}
    assert all(k.startswith(T.TRANSFERRED) for k in names)


def test_track_self_reports_pretext_losses(pretrained):
    ds, init, _ = pretrained
    _, plain = T.train_supervised(ds, "finetune", tiny_model(ds), PRETEXT, SHORT, 0, init=init)
    _, tracked = T.train_supervised(ds, "finetune", tiny_model(ds), PRETEXT, replace(SHORT, track_self=True), 0, init=init)
    assert np.isnan(plain.column("L_self")).all()
    assert np.isfinite(tracked.column("L_self")).all()


def test_report_csv_layout(pretrained):
    _, _, rep = pretrained
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(T.REPORT_COLUMNS)
    assert len(lines) == 1 + len(rep.rows)
    assert [float(line.split(",")[0]) for line in lines[1:]] == [0, 1]


# --- semi-supervised and transfer ----------------------------------------------------------


@pytest.fixture
def phase_log(monkeypatch):
    log = []
    real = T._run_phase

    def spy(params, ds, phase, *args, **kw):
        log.append((phase.name, frozenset(s.id for s in ds.sequences)))
        return real(params, ds, phase, *args, **kw)

    monkeypatch.setattr(T, "_run_phase", spy)
    return log


def test_semi_phases_touch_the_right_data(phase_log):
    ds = tiny_data()
    lab, unl = D.split_labeled(ds, D.SplitSpec(0.25, 0))
    _, rep = T.train_semi_supervised(lab, unl, tiny_model(ds), PRETEXT, SHORT, SHORT, 0)
    (p1, ids1), (p2, ids2) = phase_log
    assert p1 == "pretrain" and ids1 == {s.id for s in ds.sequences}
    assert p2 == "finetune" and ids2 == {s.id for s in lab.sequences}
    assert [r.phase for r in rep.rows] == ["pretrain"] * 2 + ["finetune"] * 2
    assert list(rep.column("epoch")) == [0, 1, 2, 3]


def test_semi_full_fraction_pretrains_on_everything(phase_log):
    ds = tiny_data()
    lab, unl = D.split_labeled(ds, D.SplitSpec(1.0, 0))
    T.train_semi_supervised(lab, unl, tiny_model(ds), PRETEXT, SHORT, SHORT, 0)
    assert phase_log[0][1] == {s.id for s in ds.sequences}


def test_semi_rejects_overlap():
    ds = tiny_data()
    with pytest.raises(DataError):
        T.train_semi_supervised(ds, ds.unlabeled(), tiny_model(ds), PRETEXT, SHORT, SHORT, 0)


def test_transfer_phases(phase_log):
    src = tiny_data(seed=1)
    tgt = tiny_data(seed=2, num_classes=2)
    tgt = tgt.subset(range(len(tgt)))
    params, rep = T.transfer(src, tgt, tiny_model(tgt), PRETEXT, SHORT, SHORT, 0)
    assert phase_log[0][0] == "pretrain" and phase_log[0][1] == {s.id for s in src.sequences}
    assert phase_log[1][1] == {s.id for s in tgt.sequences}
    assert snap(params, "enc.") != snap(M.init_params(tiny_model(tgt), 0), "enc.")
    assert len(rep.rows) == 4


def test_transfer_same_source_matches_semi_structure(phase_log):
    ds = tiny_data()
    T.transfer(ds, ds, tiny_model(ds), PRETEXT, SHORT, SHORT, 0)
    transfer_log = list(phase_log)
    phase_log.clear()
    lab, unl = D.split_labeled(ds, D.SplitSpec(1.0, 0))
    T.train_semi_supervised(lab, unl, tiny_model(ds), PRETEXT, SHORT, SHORT, 0)
    assert transfer_log == phase_log


def test_transfer_joint_mismatch():
    with pytest.raises(DataError, match="joint"):
        T.transfer(tiny_data(J=5), tiny_data(J=6), tiny_model(tiny_data(J=6)), PRETEXT, SHORT, SHORT, 0)


def test_model_input_mismatch():
    ds = tiny_data(J=5)
    with pytest.raises(DataError):
        T.train_supervised(ds, "rand", tiny_model(tiny_data(J=6)), PRETEXT, SHORT, 0)


def test_no_nan_losses_over_a_short_run():
    ds = tiny_data()
    _, rep = T.train_supervised(ds, "jointly", tiny_model(ds), PRETEXT, replace(SHORT, epochs=3), 1, test=ds)
    for col in ("L_m", "L_j", "L_cls", "train_acc", "test_acc"):
        vals = rep.column(col)
        assert np.isfinite(vals).all() and (vals >= 0).all()
    assert all(math.isfinite(r.L_c) for r in rep.rows)
