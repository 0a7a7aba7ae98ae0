import numpy as np
import pytest

from dragsplat import drag as D
from dragsplat import lora as L
from dragsplat.schedule import sample_loop
from dragsplat.scenes import drag_case, scene_views
from dragsplat.tensor import Tensor


def test_config_defaults_follow_reported_setup():
    cfg = D.DragConfig()
    assert cfg.ddim_steps == 50
    assert cfg.guidance_scale == 1.0
    assert cfg.max_iters == 80
    assert cfg.latent_lr == 0.01
    assert (cfg.r1, cfg.r2) == (1, 3)
    assert cfg.lam == 0.1
    assert cfg.kv_share_layer_fraction == 0.8
    assert cfg.kv_share_from_step == 0


def test_config_validation():
    with pytest.raises(ValueError):
        D.DragConfig(r1=2, r2=1)
    with pytest.raises(ValueError):
        D.DragConfig(max_iters=0)
    with pytest.raises(ValueError):
        D.DragConfig(lam=-0.1)


def test_t_edit_default_is_700(schedule):
    assert D.DragConfig().t_edit(schedule) == 700


def test_kv_shared_layers_rule():
    assert D.kv_shared_layers(10, 0.8) == {8, 9, 10}
    assert D.kv_shared_layers(3, 0.8) == {3}
    assert D.kv_shared_layers(5, 0.0) == set()
    assert D.kv_shared_layers(4, 1.0) == {4}


def test_patch_grid_count_and_bounds():
    g = D.patch_grid(np.array([5.3, 7.8]), 1, 32, 32)
    assert g.shape == (9, 2)
    g = D.patch_grid(np.array([0.0, 0.0]), 3, 32, 32)
    assert g.shape == (49, 2)
    assert g.min() >= 0


def test_unit_direction_three_four_five():
    h = np.array([10.0, 10.0])
    g = np.array([13.0, 14.0])
    d = (g - h) / np.linalg.norm(g - h)
    np.testing.assert_allclose(d, [0.6, 0.8])


def test_motion_loss_constant_features_is_zero(schedule):
    cfg = D.DragConfig(lam=0.0)
    feats = Tensor(np.ones((1, 4, 16, 16)), requires_grad=True)
    state = D.HandleState(handles=[np.array([[5.0, 5.0]])], targets=[np.array([[9.0, 5.0]])])
    loss, active = D.motion_supervision_loss(
        feats, None, None, state, None, None, schedule, 700, 680, cfg
    )
    assert active == 1
    assert float(loss.data) == 0.0


def test_motion_loss_signals_converged(schedule):
    cfg = D.DragConfig()
    feats = Tensor(np.random.default_rng(0).normal(size=(1, 4, 16, 16)))
    state = D.HandleState(handles=[np.array([[5.0, 5.0]])], targets=[np.array([[5.4, 5.3]])])
    loss, active = D.motion_supervision_loss(
        feats, None, None, state, None, None, schedule, 700, 680, cfg
    )
    assert loss is None and active == 0


def test_track_points_recovers_integer_translation():
    rng = np.random.default_rng(3)
    f_ref = rng.normal(size=(6, 24, 24))
    shift = (2, 1)  # (dx, dy)
    f_new = np.roll(f_ref, shift=(shift[1], shift[0]), axis=(1, 2))
    handles = np.array([[10.0, 12.0]])
    ref_vec = f_ref[:, 12, 10][None, :]
    moved = D.track_points(f_new, ref_vec, handles, r2=3)
    np.testing.assert_array_equal(moved[0], [12.0, 13.0])


@pytest.mark.parametrize("shift", [(0, 0), (1, 0), (0, 1), (-2, 2), (3, -3), (-3, -3)])
def test_track_points_all_shifts_within_r2(shift):
    rng = np.random.default_rng(10)
    f_ref = rng.normal(size=(4, 32, 32))
    f_new = np.roll(f_ref, shift=(shift[1], shift[0]), axis=(1, 2))
    handles = np.array([[15.0, 16.0]])
    ref_vec = f_ref[:, 16, 15][None, :]
    moved = D.track_points(f_new, ref_vec, handles, r2=3)
    np.testing.assert_array_equal(moved[0] - handles[0], shift)


def test_track_points_bounded_step():
    rng = np.random.default_rng(4)
    f_new = rng.normal(size=(3, 20, 20))
    ref = rng.normal(size=(1, 3))
    handles = np.array([[9.0, 9.0]])
    moved = D.track_points(f_new, ref, handles, r2=3)
    assert np.linalg.norm(moved - handles) <= 3 * np.sqrt(2) + 1e-9


def test_track_points_tie_breaks_row_major():
    f_new = np.zeros((1, 9, 9))  # all candidates tie
    ref = np.zeros((1, 1))
    handles = np.array([[4.0, 4.0]])
    moved = D.track_points(f_new, ref, handles, r2=2)
    np.testing.assert_array_equal(moved[0], [2.0, 2.0])  # top-left of the patch


def test_track_points_freezes_when_patch_outside():
    f_new = np.zeros((1, 8, 8))
    ref = np.zeros((1, 1))
    handles = np.array([[30.0, 30.0]])
    with pytest.warns(UserWarning, match="frozen"):
        moved = D.track_points(f_new, ref, handles, r2=2)
    np.testing.assert_array_equal(moved, handles)


def test_invert_caches_strides_to_t_edit(tiny_net, schedule):
    views, cams = scene_views(30, size=16)
    cfg = D.DragConfig()
    traj, t_edit = D.invert(tiny_net, views, cams, schedule, cfg)
    assert t_edit == 700
    assert len(traj) - 1 == 35
    assert set(traj) == {0, *range(20, 701, 20)}


def test_identical_views_invert_identically(tiny_net, schedule):
    views, cams = scene_views(31, size=16)
    same = np.repeat(views[:1], 4, axis=0)
    same_cams = [cams[0]] * 4
    traj, t_edit = D.invert(tiny_net, same, same_cams, schedule, D.DragConfig())
    z = traj[t_edit]
    for v in range(1, 4):
        np.testing.assert_array_equal(z[0], z[v])


def test_consistent_denoise_identity_and_missing_step(tiny_net, schedule):
    views, cams = scene_views(32, size=16)
    cfg = D.DragConfig()
    traj, t_edit = D.invert(tiny_net, views, cams, schedule, cfg)
    z_t = traj[t_edit]
    edited, recon = D.consistent_denoise(tiny_net, z_t.copy(), traj, cams, schedule, cfg)
    assert np.array_equal(edited, recon)
    # and it matches the plain sampling path bit for bit
    plain = sample_loop(lambda x, t: tiny_net(x, t, cams).data, z_t.copy(), schedule, cfg.ddim_steps, start_t=t_edit)
    assert np.array_equal(recon, np.clip(plain, 0, 1))
    # kv sharing disabled is still an identity on equal latents
    cfg0 = D.DragConfig(kv_share_layer_fraction=0.0)
    edited0, recon0 = D.consistent_denoise(tiny_net, z_t.copy(), traj, cams, schedule, cfg0)
    assert np.array_equal(edited0, recon0)
    # trajectory cache must cover every stride
    broken = dict(traj)
    del broken[40]
    with pytest.raises(KeyError, match="40"):
        D.consistent_denoise(tiny_net, z_t, broken, cams, schedule, cfg)


def test_run_drag_converged_at_zero_when_targets_equal_starts(tiny_net, schedule):
    case = drag_case(50, size=16)
    res = D.run_drag(
        tiny_net,
        schedule,
        case.views,
        case.cams,
        case.handles0,
        [h.copy() for h in case.handles0],
        case.masks,
        D.DragConfig(),
    )
    assert res.converged and res.telemetry == []
    assert np.array_equal(res.edited, res.reconstruction)


def test_run_drag_single_iteration_telemetry(tiny_net, schedule):
    case = drag_case(51, size=16)
    records = []
    res = D.run_drag(
        tiny_net,
        schedule,
        case.views,
        case.cams,
        case.handles0,
        case.targets,
        case.masks,
        D.DragConfig(max_iters=1),
        telemetry_cb=records.append,
    )
    assert len(res.telemetry) == 1 and len(records) == 1
    rec = records[0]
    assert set(rec) == {"iter", "loss", "handles", "per_view"}
    assert rec["iter"] == 0 and len(rec["per_view"]) == 4
    assert not res.converged


def test_run_drag_deterministic(tiny_net, schedule):
    case = drag_case(52, size=16)
    kw = dict(cfg=D.DragConfig(max_iters=3))
    r1 = D.run_drag(tiny_net, schedule, case.views, case.cams, case.handles0, case.targets, case.masks, **kw)
    r2 = D.run_drag(tiny_net, schedule, case.views, case.cams, case.handles0, case.targets, case.masks, **kw)
    assert np.array_equal(r1.edited, r2.edited)
    assert r1.telemetry == r2.telemetry


def test_lambda_sweep_pins_off_mask_latents(tiny_net, schedule):
    case = drag_case(53, size=32)
    t_edit = D.DragConfig().t_edit(schedule)

    def run(lam):
        cfg = D.DragConfig(max_iters=8, lam=lam)
        res = D.run_drag(
            tiny_net, schedule, case.views, case.cams, case.handles0, case.targets, case.masks, cfg
        )
        traj, _ = D.invert(tiny_net, case.views, case.cams, schedule, cfg)
        off = 1.0 - case.masks[:, None, :, :]
        return float(np.abs((res.latent - traj[t_edit]) * off).sum() / max(off.sum() * 3, 1))

    drift_hi = run(10.0)
    drift_none = run(0.0)
    # sweep oracle: strong-lambda pinning cuts drift by over an order of
    # magnitude; the absolute floor (~2-3e-3) is the Adam sign-gradient
    # oscillation at latent_lr=0.01, measured and frozen here
    assert drift_hi < drift_none / 10.0
    assert drift_hi < 4e-3
