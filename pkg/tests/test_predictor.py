import math
from dataclasses import replace

import numpy as np
import pytest

from eqpredict.autodiff import tensor as T
from eqpredict.autodiff.optim import ParameterStore
from eqpredict.config import FULL
from eqpredict.geometry import RigidTransform, Vec2, apply_rigid, rotation_matrix
from eqpredict.predictor import (
    EquivariantDecoder,
    MotionPredictor,
    PredictionReport,
    ade_loss,
    computable_horizons,
    constant_velocity_baseline,
    metrics,
)
from eqpredict.scene_data import collate

from conftest import SMALL, TINY, directional_check, scenes_for


# -- metrics and loss -------------------------------------------------------------
def test_metrics_zero_for_perfect_prediction(rng):
    y = rng.normal(size=(30, 2))
    ade, fde = metrics(y, y)
    assert ade == {1.0: 0.0, 2.0: 0.0, 3.0: 0.0} and fde == ade


def test_metrics_constant_offset():
    y = np.zeros((30, 2))
    ade, fde = metrics(y + [3.0, 4.0], y)
    for h in (1.0, 2.0, 3.0):
        assert ade[h] == pytest.approx(5.0, abs=1e-15) and fde[h] == pytest.approx(5.0, abs=1e-15)


def test_metrics_windows_by_hand():
    y = np.zeros((30, 2))
    pred = np.zeros((30, 2))
    pred[:, 0] = np.arange(1, 31)  # error at step k is k
    ade, fde = metrics(pred, y)
    assert ade[1.0] == pytest.approx(5.5) and fde[1.0] == 10.0
    assert ade[2.0] == pytest.approx(10.5) and fde[2.0] == 20.0
    assert ade[3.0] == pytest.approx(15.5) and fde[3.0] == 30.0


def test_metrics_short_trajectory_lists_computable_horizons():
    with pytest.raises(ValueError, match=r"computable: \[1.0\]"):
        metrics(np.zeros((15, 2)), np.zeros((15, 2)))
    assert computable_horizons(15) == [1.0]
    ade, _ = metrics(np.ones((15, 2)), np.zeros((15, 2)), horizons=(1.0, 1.5))
    assert ade[1.5] == pytest.approx(math.sqrt(2))


def test_metrics_brute_force_oracle(rng):
    for _ in range(200):
        p, y = rng.normal(size=(30, 2)) * 5, rng.normal(size=(30, 2)) * 5
        ade, fde = metrics(p, y)
        for h in (1, 2, 3):
            k = h * 10
            errs = [math.hypot(p[t][0] - y[t][0], p[t][1] - y[t][1]) for t in range(k)]
            assert abs(ade[float(h)] - math.fsum(errs) / k) < 1e-12
            assert abs(fde[float(h)] - errs[-1]) < 1e-12


def test_ade_between_min_and_max_step_error(rng):
    p, y = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    errs = np.linalg.norm(p - y, axis=1)
    ade, fde = metrics(p, y)
    assert errs.min() <= ade[3.0] <= errs.max()
    assert fde[3.0] == errs[-1]


def test_ade_loss_examples():
    y = np.zeros((1, 30, 2))
    # smoothing keeps the norm differentiable at zero error: the floor is sqrt(1e-12)
    assert ade_loss(T.Tensor(y), y).item() == pytest.approx(1e-6, rel=1e-12)
    assert ade_loss(T.Tensor(y + [3.0, 4.0]), y).item() == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(ValueError, match="mismatch"):
        ade_loss(T.Tensor(np.zeros((1, 29, 2))), y)


def test_ade_loss_two_pass_oracle(rng):
    for _ in range(50):
        p, y = rng.normal(size=(3, 30, 2)), rng.normal(size=(3, 30, 2))
        d = [[math.sqrt((p[b, t, 0] - y[b, t, 0]) ** 2 + (p[b, t, 1] - y[b, t, 1]) ** 2 + 1e-12) for t in range(30)] for b in range(3)]
        oracle = math.fsum(math.fsum(row) for row in d) / 90
        assert abs(ade_loss(T.Tensor(p), y).item() - oracle) < 1e-12


def test_ade_loss_gradient_finite_at_zero_error():
    p = T.Tensor(np.zeros((1, 3, 2)), requires_grad=True)
    from eqpredict.autodiff.tensor import backward

    backward(ade_loss(p, np.zeros((1, 3, 2))))
    assert np.all(np.isfinite(p.grad))


# -- baseline ------------------------------------------------------------------
def test_baseline_examples():
    out = constant_velocity_baseline(np.array([[-1.0, 0], [0, 0], [1, 0]]), 4)
    np.testing.assert_array_equal(out, [[2, 0], [3, 0], [4, 0], [5, 0]])
    still = constant_velocity_baseline(np.array([[2.0, 3.0], [2.0, 3.0]]), 3)
    np.testing.assert_array_equal(still, [[2, 3]] * 3)
    with pytest.raises(ValueError):
        constant_velocity_baseline(np.zeros((1, 2)), 3)


def test_baseline_equivariant(rng):
    for _ in range(50):
        h = rng.normal(size=(10, 2)) * 10
        g = RigidTransform(rng.uniform(0, 6.3), Vec2.from_array(rng.uniform(-1000, 1000, 2)))
        a = constant_velocity_baseline(apply_rigid(h, g), 15)
        b = apply_rigid(constant_velocity_baseline(h, 15), g)
        assert np.max(np.abs(a - b)) < 1e-12 * 1000


# -- decoder ------------------------------------------------------------------------
def _decoder(cfg=SMALL, seed=0):
    store = ParameterStore()
    return EquivariantDecoder(store, cfg, np.random.default_rng(seed)), store


def test_decoder_zero_weights_returns_channel_mean(rng):
    dec, store = _decoder()
    for p in store.paths():
        if p.endswith(".mix"):
            store[p].data[:] = 0.0
    g = rng.normal(size=(2, dec.readout.shape[0], 2))
    out = dec(T.Tensor(g)).data
    np.testing.assert_allclose(out, np.broadcast_to(g.mean(axis=1, keepdims=True), out.shape), atol=1e-15)


def test_decoder_rotation_equivariance(rng):
    dec, _ = _decoder()
    for _ in range(20):
        g = rng.normal(size=(3, dec.readout.shape[0], 2))
        r = rotation_matrix(rng.uniform(0, 6.3))
        a = dec(T.Tensor(g @ r.T)).data
        b = dec(T.Tensor(g)).data @ r.T
        assert np.max(np.abs(a - b)) < 1e-9


def test_decoder_layer_count_and_output_length():
    cfg = FULL.resolved()
    dec, store = _decoder(cfg)
    assert len(dec.mix) + 1 == cfg.mlp_layers == 4
    assert dec.readout.shape == (cfg.channels, 30)


# -- full model -------------------------------------------------------------------------
def test_forward_is_deterministic_and_seeded():
    scene = scenes_for(SMALL, 1, seed=4)[0]
    a = MotionPredictor(SMALL).forward(scene)
    b = MotionPredictor(SMALL).forward(scene)
    assert a.predicted.tobytes() == b.predicted.tobytes()
    assert a.to_record() == b.to_record()
    c = MotionPredictor(replace(SMALL, seed=1)).forward(scene)
    assert not np.array_equal(a.predicted, c.predicted)


def test_full_config_output_and_record_layout():
    scene = scenes_for(FULL, 1, seed=2)[0]
    report = MotionPredictor(FULL).forward(scene)
    assert report.predicted.shape == (30, 2)
    assert sorted(report.ade) == [1.0, 2.0, 3.0]
    fields = report.to_record().split(",")
    assert fields[0] == scene.scene_id and len(fields) == 1 + 60 + 6
    assert len(PredictionReport.record_header(30, [1.0, 2.0, 3.0]).split(",")) == 67
    assert float(fields[61]) == pytest.approx(report.ade[1.0], rel=1e-8)
    assert float(fields[-1]) == pytest.approx(report.fde[3.0], rel=1e-8)


def test_end_to_end_equivariance(rng):
    model = MotionPredictor(SMALL)
    scenes = scenes_for(SMALL, 8, seed=9)
    base = model.predict(collate(scenes))
    for _ in range(3):
        g = RigidTransform(rng.uniform(0, 2 * math.pi), Vec2.from_array(rng.uniform(-1000, 1000, 2)))
        moved = model.predict(collate([s.transformed(lambda p: apply_rigid(p, g)) for s in scenes]))
        assert np.max(np.abs(moved - apply_rigid(base, g))) < 1e-8


def test_translate_only_map_is_not_rotation_equivariant():
    model = MotionPredictor(replace(SMALL, map_mode="translate_only"))
    scenes = scenes_for(SMALL, 4, seed=9)
    g = RigidTransform(1.0, Vec2(0.0, 0.0))
    base = model.predict(collate(scenes))
    moved = model.predict(collate([s.transformed(lambda p: apply_rigid(p, g)) for s in scenes]))
    assert np.max(np.abs(moved - apply_rigid(base, g))) > 1e-6


def test_degenerate_heading_warns():
    scene = scenes_for(SMALL, 1, seed=4)[0]
    agents = scene.agents.copy()
    agents[0] = agents[0, -1]
    still = replace(scene, agents=agents)
    report = MotionPredictor(SMALL).forward(still)
    assert any("degenerate" in w for w in report.warnings)
    assert not MotionPredictor(replace(SMALL, map_mode="none")).forward(still).warnings


def test_report_without_future_has_no_metrics():
    scene = replace(scenes_for(SMALL, 1)[0], future=None)
    report = MotionPredictor(SMALL).forward(scene)
    assert report.ade == {} and report.fde == {}
    assert len(report.to_record().split(",")) == 1 + 2 * SMALL.t_out


def test_map_none_and_encoder_none_share_parameter_shapes():
    a = MotionPredictor(replace(SMALL, map_mode="none"))
    b = MotionPredictor(replace(SMALL, encoder="none"))
    assert a.store.paths() == b.store.paths()
    full = MotionPredictor(SMALL)
    backbone = [p for p in full.store.paths() if not p.startswith("map.")]
    assert backbone == a.store.paths()
    assert all(full.store[p].shape == a.store[p].shape for p in backbone)


@pytest.mark.parametrize("map_mode", ["translate_rotate", "none"])
def test_tiny_model_gradients(map_mode):
    cfg = replace(TINY, map_mode=map_mode)
    worst = 0.0
    for i in range(10):
        batch = collate(scenes_for(cfg, 3, seed=i))
        model = MotionPredictor(cfg, seed=i)
        params = [model.store[p] for p in model.store.paths()]
        worst = max(worst, directional_check(lambda: model.loss(batch), params, np.random.default_rng(i)))
    assert worst < 1e-4
