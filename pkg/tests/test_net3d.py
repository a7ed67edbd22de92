import math

import numpy as np
import pytest
import torch

from baggagedet.anchors import AnchorConfig, MatchResult, build_anchor_grid, match_anchors
from baggagedet.augment import AugmentConfig, TransformId, apply_transform
from baggagedet.net3d import (
    AnchorCountError,
    BackboneConfig,
    ModelConfig,
    RetinaNet3D,
    TrainConfig,
    TrainingError,
    TrainLog,
    build_model,
    compute_loss,
    load_checkpoint,
    parameter_count,
    prepare_sample,
    save_checkpoint,
    train,
)
from baggagedet.net3d.gradcheck import grad_check
from baggagedet.net3d.model import BLOCKS_PER_STAGE, pinned_relu
from baggagedet.net3d.train import batch_loss, AnchorCache
from baggagedet.synthtip import BagSpec, generate_bag
from baggagedet.volcore import Annotation, Box3D, ScaleConfig, Volume

SMALL = ModelConfig(BackboneConfig(widths=(8, 8, 16, 16)), fpn_width=8)


@pytest.mark.parametrize("n", [64, 96])
def test_pyramid_shapes(n):
    torch.manual_seed(0)
    m = RetinaNet3D(SMALL).eval()
    with torch.no_grad():
        fp, out = m(torch.zeros(1, 1, n, n, n))
    for i, s in enumerate((4, 8, 16, 32)):
        assert fp.c[i].shape[2:] == (n // s,) * 3
        assert fp.p[i].shape == (1, 8, n // s, n // s, n // s)
        assert out.reg[i].shape[1] == 6 and out.cls[i].shape[1] == 6


def test_default_example_shapes():
    m = RetinaNet3D(ModelConfig()).eval()
    with torch.no_grad():
        fp, out = m(torch.zeros(1, 1, 64, 64, 64))
    assert fp.p[0].shape == (1, 64, 16, 16, 16)
    assert out.cls[0].shape[1] == 6 and out.reg[0].shape[1] == 6


@pytest.mark.parametrize("n_a", [1, 3])
def test_head_channel_counts(n_a):
    cfg = ModelConfig(BackboneConfig(widths=(8, 8, 8, 8)), fpn_width=8, n_a=n_a)
    m = RetinaNet3D(cfg).eval()
    with torch.no_grad():
        _, out = m(torch.zeros(2, 1, 32, 32, 32))
    assert all(r.shape[1] == 6 * n_a for r in out.reg)
    assert all(c.shape[1] == 6 * n_a for c in out.cls)
    reg, cls = out.flat(n_a, 5)
    aset = build_anchor_grid((32, 32, 32), AnchorConfig(multipliers=(1.0,) * n_a))
    assert reg.shape == (2, len(aset), 6) and cls.shape == (2, len(aset), 6)


def test_zero_input_gives_uniform_softmax():
    m = RetinaNet3D(SMALL).eval()
    with torch.no_grad():
        _, out = m(torch.zeros(1, 1, 64, 64, 64))
    _, cls = out.flat(1, 5)
    torch.testing.assert_close(torch.softmax(cls, -1), torch.full_like(cls, 1 / 6))


def test_doubling_input_doubles_levels():
    m = RetinaNet3D(SMALL).eval()
    with torch.no_grad():
        a, _ = m(torch.zeros(1, 1, 32, 64, 32))
        b, _ = m(torch.zeros(1, 1, 64, 128, 64))
    for pa, pb in zip(a.p, b.p):
        assert tuple(pb.shape[2:]) == tuple(2 * s for s in pa.shape[2:])


def test_shape_errors():
    m = RetinaNet3D(SMALL)
    with pytest.raises(ValueError):
        m(torch.zeros(1, 1, 48, 64, 64))
    with pytest.raises(ValueError):
        m(torch.zeros(1, 2, 64, 64, 64))


def test_heads_shared_across_levels():
    m = RetinaNet3D(SMALL)
    per_level = m.head_param_count()
    assert per_level == sum(p.numel() for p in m.reg_head.parameters()) + sum(p.numel() for p in m.cls_head.parameters())
    m2 = RetinaNet3D(ModelConfig(BackboneConfig(widths=(8, 8, 16, 32), depth=18), fpn_width=8))
    assert m2.head_param_count() == per_level


@pytest.mark.parametrize("depth", sorted(BLOCKS_PER_STAGE))
def test_all_depths_build_and_stride(depth):
    m = RetinaNet3D(ModelConfig(BackboneConfig(depth=depth, widths=(4, 4, 4, 8)), fpn_width=4)).eval()
    with torch.no_grad():
        fp, _ = m(torch.zeros(1, 1, 64, 64, 64))
    assert [c.shape[2] for c in fp.c] == [16, 8, 4, 2]


def test_config_dict_roundtrip():
    cfg = ModelConfig(BackboneConfig(depth=50, widths=(4, 8, 8, 8), in_channels=2), fpn_width=12, n_a=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------- loss

def _matches(dims, anns):
    aset = build_anchor_grid(dims)
    return aset, [match_anchors(aset, anns)]


def test_loss_perfect_background():
    aset, m = _matches((32, 32, 32), [])
    cls = torch.full((1, len(aset), 6), -50.0)
    cls[..., 0] = 50.0
    parts = compute_loss(torch.zeros(1, len(aset), 6), cls, m)
    assert float(parts.cls_loss) < 1e-12 and float(parts.reg_loss) == 0.0


def _one_positive(n_anchor, label=2):
    labels = np.zeros(n_anchor, dtype=np.int64)
    labels[17] = label
    gidx = np.where(labels > 0, 0, -1)
    return [MatchResult(labels, gidx, np.zeros((n_anchor, 6)))]


def test_loss_uniform_is_ln6():
    aset = build_anchor_grid((32, 32, 32))
    m = _one_positive(len(aset))
    parts = compute_loss(torch.zeros(1, len(aset), 6), torch.zeros(1, len(aset), 6), m)
    assert float(parts.cls_loss) == pytest.approx(math.log(6))


def test_loss_exact_deltas_zero_reg():
    anns = [Annotation(Box3D(1, 2, 3, 13, 9, 10), 0), Annotation(Box3D(15, 15, 15, 30, 31, 29), 4)]
    aset, m = _matches((32, 32, 32), anns)
    reg = torch.from_numpy(m[0].targets).float()[None]
    parts = compute_loss(reg, torch.zeros(1, len(aset), 6), m)
    assert float(parts.reg_loss) == 0.0
    assert float(parts.total) == float(parts.cls_loss) + float(parts.reg_loss)


def test_loss_negative_mining_counts():
    aset = build_anchor_grid((32, 32, 32))
    m = _one_positive(len(aset))
    cls = torch.zeros(1, len(aset), 6)
    # make four negatives confidently wrong: only the hardest three are mined
    neg = np.nonzero(m[0].labels == 0)[0][:4]
    cls[0, neg, 1] = torch.tensor([5.0, 4.0, 3.0, 2.0])
    parts = compute_loss(torch.zeros(1, len(aset), 6), cls, m)
    ce = [float(-torch.log_softmax(cls[0, i], -1)[0]) for i in neg[:3]]
    want = (math.log(6) + sum(ce)) / 4
    assert float(parts.cls_loss) == pytest.approx(want, rel=1e-6)


def test_loss_anchor_mismatch():
    aset, m = _matches((32, 32, 32), [])
    with pytest.raises(AnchorCountError):
        compute_loss(torch.zeros(1, 10, 6), torch.zeros(1, 10, 6), m)


def test_focal_option_finite_and_differs():
    aset, m = _matches((32, 32, 32), [Annotation(Box3D(0, 0, 0, 8, 8, 8), 1)])
    cls = torch.randn(1, len(aset), 6, generator=torch.Generator().manual_seed(0))
    ce = compute_loss(torch.zeros(1, len(aset), 6), cls, m)
    fl = compute_loss(torch.zeros(1, len(aset), 6), cls, m, focal_gamma=2.0)
    assert math.isfinite(float(fl.total)) and float(fl.cls_loss) != float(ce.cls_loss)


# ----------------------------------------------------------------- gradients

def _tiny():
    torch.manual_seed(0)
    # a single norm group: with 2 channels and the 1-voxel C5 map, 2-channel groups would
    # hold one value each, which group norm cannot normalise in training mode
    return RetinaNet3D(ModelConfig(BackboneConfig(widths=(2, 2, 2, 2)), fpn_width=2, norm_groups=1))


def _tiny_batch():
    x = torch.zeros(1, 1, 32, 32, 32)
    x[0, 0, :16, :16, :16] = torch.rand(16, 16, 16, generator=torch.Generator().manual_seed(1))
    x[0, 0, 4:10, 3:9, 5:11] += 1.0
    return x, [[Annotation(Box3D(4, 3, 5, 10, 9, 11), 2)]]


@pytest.mark.slow
def test_grad_check_tiny_model():
    m = _tiny()
    assert parameter_count(m) <= 5000
    x, anns = _tiny_batch()
    assert grad_check(m, x, anns, eps=1e-3) < 1e-2


def test_grad_check_param_limit():
    with pytest.raises(ValueError):
        grad_check(RetinaNet3D(SMALL), *_tiny_batch())


def test_pinned_relu_matches_plain_forward():
    m = _tiny().double()
    x, _ = _tiny_batch()
    x = x.double()
    with torch.no_grad():
        _, ref = m(x)
        with pinned_relu() as rewind:
            _, rec = m(x)
            rewind()
            _, rep = m(x)
    for a, b, c in zip(ref.cls, rec.cls, rep.cls):
        assert torch.equal(a, b) and torch.equal(a, c)


def test_zero_lr_step_keeps_params():
    m = RetinaNet3D(SMALL)
    before = [p.detach().clone() for p in m.parameters()]
    opt = torch.optim.Adam(m.parameters(), lr=0.0)
    x = torch.rand(2, 1, 32, 32, 32)
    aset = build_anchor_grid((32, 32, 32))
    mt = [match_anchors(aset, [Annotation(Box3D(2, 2, 2, 12, 12, 12), 0)])] * 2
    _, out = m(x)
    compute_loss(*out.flat(1, 5), mt).total.backward()
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_overfit_one_batch_50_steps():
    torch.manual_seed(0)
    m = RetinaNet3D(SMALL)
    v, anns = generate_bag(BagSpec(dims=(32, 32, 32), targets=((0, 1),), seed=4))
    cache = AnchorCache(AnchorConfig())
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    losses = []
    for _ in range(50):
        parts = batch_loss(m, [v, v], [anns, anns], cache, TrainConfig())
        opt.zero_grad()
        parts.total.backward()
        opt.step()
        losses.append(float(parts.total.detach()))
    assert losses[-1] < 0.5 * losses[0]


def test_flip_equivariance_of_background_loss():
    m = RetinaNet3D(SMALL).eval()
    v = Volume(np.random.default_rng(0).random((1, 64, 64, 64)).astype(np.float32))
    flipped, _ = apply_transform(v, [], TransformId("flip", 0))
    aset = build_anchor_grid((64, 64, 64))
    mt = [match_anchors(aset, [])]
    with torch.no_grad():
        _, a = m(torch.from_numpy(v.voxels)[None])
        _, b = m(torch.from_numpy(flipped.voxels)[None])
    la = compute_loss(*a.flat(1, 5), mt)
    lb = compute_loss(*b.flat(1, 5), mt)
    # stride-2 sampling grids are not flip-symmetric, so only approximately equal
    assert float(lb.total) == pytest.approx(float(la.total), rel=1e-2)
    torch.nn.init.zeros_(m.cls_head.out.weight)
    with torch.no_grad():
        _, a = m(torch.from_numpy(v.voxels)[None])
        _, b = m(torch.from_numpy(flipped.voxels)[None])
    assert float(compute_loss(*a.flat(1, 5), mt).total) == float(compute_loss(*b.flat(1, 5), mt).total)


# ------------------------------------------------------------------- training

def _bags(n, size=32, classes=((0, 1),), seed=0):
    out = []
    for i in range(n):
        v, anns = generate_bag(BagSpec(dims=(size,) * 3, targets=classes, seed=seed + i))
        out.append(prepare_sample(v, anns, ScaleConfig(1)))
    return out


def test_train_schedule_log_and_checkpoints(tmp_path):
    m = build_model(SMALL, 0)
    m, log = train(m, _bags(2), TrainConfig(epochs_per_stage=1), AugmentConfig(p=0.5), out_dir=tmp_path)
    assert [r.lr for r in log.records] == [1e-3, 1e-4, 1e-5]
    lines = (tmp_path / "trainlog.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,cls_loss,reg_loss,total" and len(lines) == 4
    assert [r.line() for r in TrainLog.read(tmp_path / "trainlog.csv").records] == [r.line() for r in log.records]
    for name in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "final.ckpt"):
        assert (tmp_path / name).exists()
    for r in log.records:
        assert r.total == pytest.approx(r.cls_loss + r.reg_loss) and r.cls_loss >= 0 and r.reg_loss >= 0


def test_train_deterministic():
    data = _bags(3)
    cfg = TrainConfig(epochs_per_stage=1, seed=5)
    a, _ = train(build_model(SMALL, 5), data, cfg, AugmentConfig(p=0.5, seed=2))
    b, _ = train(build_model(SMALL, 5), data, cfg, AugmentConfig(p=0.5, seed=2))
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


def test_train_empty_split():
    with pytest.raises(TrainingError):
        train(build_model(SMALL), [], TrainConfig(epochs_per_stage=1), AugmentConfig())


def test_train_non_finite_loss():
    data = _bags(2)
    bad = (Volume(np.full_like(data[0][0].voxels, np.float32(1e38))), data[0][1])
    with pytest.raises(TrainingError, match="non-finite"):
        train(build_model(SMALL), [bad, bad], TrainConfig(epochs_per_stage=1), AugmentConfig(p=0.0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lrs=(1e-3, 1e-3, 1e-5))
    with pytest.raises(ValueError):
        TrainConfig(epochs_per_stage=0)
    cfg = TrainConfig(epochs_per_stage=2)
    assert [cfg.lr_at(e) for e in range(6)] == [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5]


@pytest.mark.slow
def test_single_class_training_halves_cls_loss():
    data = _bags(20, size=48, classes=((0, 1),), seed=100)
    m = build_model(ModelConfig(fpn_width=16), 0)
    _, log = train(m, data, TrainConfig(epochs_per_stage=2), AugmentConfig(p=0.2))
    assert log.records[-1].cls_loss < log.records[0].cls_loss / 2


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(SMALL, 3)
    opt = torch.optim.Adam(m.parameters())
    save_checkpoint(tmp_path / "m.ckpt", m, opt, epoch=7, meta={"seed": 3})
    back, state = load_checkpoint(tmp_path / "m.ckpt")
    assert state["epoch"] == 7 and state["meta"] == {"seed": 3}
    assert back.cfg == m.cfg
    for a, b in zip(m.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)
    names = [n for n, _ in state["params"]]
    assert names == list(m.state_dict())


def test_prepare_sample_pads_and_selects():
    v, anns = generate_bag(BagSpec(dims=(48, 40, 33), channels=2, targets=((1, 1),), seed=0))
    pv, panns = prepare_sample(v, anns, ScaleConfig(1), "high")
    assert pv.dims == (64, 64, 64) and pv.channels == 1
    np.testing.assert_array_equal(pv.voxels[0, :48, :40, :33], v.voxels[1])
    assert panns == anns
