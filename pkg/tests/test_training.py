import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from epishift.lightfield import DisparityMap, extract_cross
from epishift.losses import TargetSpec
from epishift.network import NetConfig, init_params, load_checkpoint
from epishift.shift import SweepRange, shift_cross
from epishift.synth import Layer, SceneSpec, Texture, render, two_plane_spec
from epishift.training import (
    AugmentConfig,
    Scene,
    TrainConfig,
    TrainingDiverged,
    augment,
    batch_losses,
    crop,
    forward_batch,
    make_batch,
    rotate90,
    train,
    write_trace,
)

NET = NetConfig(n_views=5, feat_channels=4, feat_blocks=2, unet_depth=1, unet_base_channels=8)


def plane(d, size=48, grid=5, seed=1):
    return render(SceneSpec((Layer(d, Texture("noise", 3.0, seed)),), size, size, grid, grid))


def scenes(n=3, size=48, grid=5, integer=True, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        lf, gt = render(two_plane_spec(rng, size=(size, size), grid=grid, integer=integer))
        out.append(Scene(extract_cross(lf), gt, SweepRange(-2, 2)))
    return out


def config(**kw):
    base = dict(lr_phase1=1e-3, iters_phase1=20, lr_phase2=1e-4, iters_phase2=0, patch=32,
                augment=AugmentConfig.none(), prefetch=0)
    base.update(kw)
    return TrainConfig(**base)


def aligned_variance(cross, s, band):
    st = shift_cross(cross, s)
    m = st.valid.copy()
    m[:band], m[-band:], m[:, :band], m[:, -band:] = False, False, False, False
    return float(np.var(st.stack.horizontal[:, m], axis=0).mean() + np.var(st.stack.vertical[:, m], axis=0).mean())


def test_identity_augmentation():
    lf, gt = plane(1.0)
    cross = extract_cross(lf)
    c2, g2 = augment(cross, gt, np.random.default_rng(0), AugmentConfig.none())
    assert c2 is cross and g2 is gt


def test_rotate_four_times_is_identity():
    lf, gt = render(two_plane_spec(np.random.default_rng(2), size=(40, 48), grid=5))
    cross = extract_cross(lf)
    c, g = cross, gt
    for _ in range(2):
        c, g = rotate90(*rotate90(c, g))
    assert np.array_equal(c.horizontal, cross.horizontal) and np.array_equal(c.vertical, cross.vertical)
    assert np.array_equal(g.values, gt.values) and np.array_equal(g.valid, gt.valid)
    assert (c.center_u, c.center_v) == (cross.center_u, cross.center_v)


@pytest.mark.parametrize("turns", [1, 2, 3])
def test_rotation_keeps_plane_aligned(turns):
    lf, gt = plane(2.0, size=40)
    c, g = extract_cross(lf), gt
    for _ in range(turns):
        c, g = rotate90(c, g)
    assert aligned_variance(c, 2, 8) < 1e-10
    assert aligned_variance(c, 1, 8) > 1e-3 and aligned_variance(c, -2, 8) > 1e-3


def test_scale_half_halves_disparity():
    lf, gt = plane(4.0, size=96)
    cfg = AugmentConfig(color=False, brightness=0.0, contrast=0.0, rotate=False, scale_range=(0.5, 0.5))
    c, g = augment(extract_cross(lf), gt, np.random.default_rng(0), cfg)
    assert c.shape == (48, 48)
    assert np.all(g.values[g.valid] == 2.0)
    var = {s: aligned_variance(c, s, 12) for s in range(0, 5)}
    assert min(var, key=var.get) == 2


def test_color_ops_leave_gt_and_alignment():
    lf, gt = plane(1.0, size=40)
    c, g = augment(extract_cross(lf), gt, np.random.default_rng(5), AugmentConfig(scale_range=(1.0, 1.0)))
    assert np.array_equal(np.sort(g.values.ravel()), np.sort(gt.values.ravel()))
    assert aligned_variance(c, 1, 6) < 1e-10


def test_crop_too_large():
    lf, gt = plane(1.0, size=32)
    with pytest.raises(ValueError):
        crop(extract_cross(lf), gt, 33, np.random.default_rng(0))


def test_batch_on_short_range():
    sc = scenes(1)[0]
    b = make_batch(sc.cross, sc.gt, sc.sweep, config(), np.random.default_rng(0))
    assert len(b.shifts) == 7
    assert set(b.shifts) == {-2, -1, 0, 1, 2}
    assert b.channels == 42
    assert b.index.shape == (7, 3)
    # triples clamp at the sweep ends
    assert [b.stack_shifts[i] for i in b.index[0]] == [-2, -2, -1]


def test_batch_rejects_unsupervised_scene():
    sc = scenes(1)[0]
    gt = DisparityMap(sc.gt.values, np.zeros_like(sc.gt.valid))
    with pytest.raises(ValueError, match="no supervised pixels"):
        make_batch(sc.cross, gt, sc.sweep, config(), np.random.default_rng(0))


def test_no_gradient_into_invalid_pixels():
    sc = scenes(1)[0]
    b = make_batch(sc.cross, sc.gt, sc.sweep, config(), np.random.default_rng(1))
    net = init_params(NET, 0)
    C, R = forward_batch(net, b)
    C.retain_grad()
    R.retain_grad()
    # recompute the losses from these exact outputs
    from epishift.losses import class_loss, disp_weight, reg_loss, total_loss
    from epishift.training import fused_prediction
    t = b.targets
    w = disp_weight(fused_prediction(C, R, b.shifts), b.gt, 0.1)
    loss = total_loss(reg_loss(R, b.gt, b.shifts, t.r_mask, t.loss_mask), class_loss(C, t.c_star, w, t.loss_mask))
    loss.backward()
    assert (~t.loss_mask).any()
    assert not C.grad[~t.loss_mask].any() and not R.grad[~t.loss_mask].any()


def test_zero_learning_rate_keeps_parameters():
    net0 = init_params(NET, 0)
    net, trace = train(scenes(), NET, config(lr_phase1=0.0, lr_phase2=0.0, iters_phase1=3, iters_phase2=2))
    assert len(trace) == 5
    for (k, a), (_, b) in zip(net0.named_parameters(), net.named_parameters()):
        assert torch.equal(a, b), k


def test_trace_is_deterministic(tmp_path):
    data = scenes()
    cfg = config(iters_phase1=6, augment=AugmentConfig())
    _, t1 = train(data, NET, cfg)
    _, t2 = train(data, NET, replace(cfg, prefetch=3))
    assert t1 == t2
    write_trace(tmp_path / "trace.csv", t1)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,l_class,l_reg,total" and len(lines) == 7


def test_resume_matches_uninterrupted_run(tmp_path):
    data = scenes()
    cfg = config(iters_phase1=4, iters_phase2=4, augment=AugmentConfig())
    full, trace = train(data, NET, cfg)
    _, first = train(data, NET, cfg, iterations=5, checkpoint_path=tmp_path / "ck")
    resumed, second = train(data, NET, cfg, resume_from=tmp_path / "ck")
    assert first + second == trace
    for (k, a), (_, b) in zip(full.state_dict().items(), resumed.state_dict().items()):
        if not k.endswith("num_batches_tracked"):
            assert torch.equal(a, b), k


def test_phase_switch_freezes_norm(tmp_path):
    net, _ = train(scenes(), NET, config(iters_phase1=2, iters_phase2=2), checkpoint_path=tmp_path / "ck")
    bn = net.features.blocks[0][2]
    assert not bn.training and not bn.weight.requires_grad
    assert torch.equal(load_checkpoint(tmp_path / "ck", NET).features.blocks[0][2].running_mean, bn.running_mean)


def test_divergence_writes_diagnostic_checkpoint(tmp_path):
    data = scenes(1)
    net = init_params(NET, 0)
    with torch.no_grad():
        net.unet.head.bias.fill_(float("inf"))
    with pytest.raises(TrainingDiverged, match="activations"):
        train(data, NET, config(), net=net, checkpoint_path=tmp_path / "ck")
    diag = json.loads((tmp_path / "ck" / "diverged" / "diagnostic.json").read_text())
    assert diag["non_finite"] == ["unet.head.bias"]


def test_nan_loss_aborts_with_checkpoint(tmp_path, monkeypatch):
    import epishift.training as tr
    real = tr.batch_losses

    def poisoned(net, batch, spec):
        l_class, l_reg, total = real(net, batch, spec)
        return l_class, l_reg, total * float("nan")

    monkeypatch.setattr(tr, "batch_losses", poisoned)
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train(scenes(1), NET, config(), checkpoint_path=tmp_path / "ck")
    assert (tmp_path / "ck" / "diverged" / "manifest.cfg").exists()
    assert json.loads((tmp_path / "ck" / "diverged" / "diagnostic.json").read_text())["non_finite"] == []


def test_short_run_reduces_loss():
    data = scenes(4, size=56, integer=True)
    cfg = config(iters_phase1=200, lr_phase1=2e-3, patch=48, target_spec=TargetSpec(weight_floor=0.1))
    _, trace = train(data, NET, cfg)
    first = trace[0][3]
    last = np.mean([row[3] for row in trace[-10:]])
    assert last < 0.25 * first, (first, last)
