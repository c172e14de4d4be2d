import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionpose.checkpoint import Checkpoint
from motionpose.nets import JointModel, build_action_net
from motionpose.trainer import (ActionTrainConfig, PoseTrainConfig, TrainConfig, TrainingDiverged, _limit,
                                finetune_action, finetune_pose, lr_at, pose_target_heatmaps, reweight_mask,
                                reweighted_euclidean_grad, total_iterations, train_unsupervised)


def quiet(*_):
    pass


# ---------------------------------------------------------------- schedules


def test_lr_at_walks_the_schedule():
    sched = ((1e-2, 3), (1e-3, 2))
    assert [lr_at(sched, i) for i in range(5)] == [1e-2] * 3 + [1e-3] * 2
    assert total_iterations(sched) == 5
    with pytest.raises(IndexError):
        lr_at(sched, 5)


def test_unsupervised_run_follows_schedule_and_logs(small_corpus):
    cfg = TrainConfig(positives=2, schedule=((1e-2, 3), (1e-3, 2)), checkpoint_interval=2, val_batches=2)
    lines = []
    res = train_unsupervised(small_corpus, cfg=cfg, logger=lines.append)
    assert res.lrs == [1e-2] * 3 + [1e-3] * 2
    assert [h[0] for h in res.history] == [2, 4, 5]
    assert all(line.startswith("iter=") and " loss=" in line and " val_acc=" in line for line in lines)
    assert 0.0 <= res.final_val_acc <= 1.0
    assert isinstance(res.checkpoint, Checkpoint)


def test_train_and_val_clips_are_disjoint(small_corpus):
    tr, va = small_corpus.split(0.5)
    assert tr and va and not set(tr) & set(va)
    assert sorted(tr + va) == sorted(c.clip_id for c in small_corpus)


def test_nan_abort_keeps_last_good_checkpoint(small_corpus):
    model = JointModel("vggm-mini", 4, rng=np.random.default_rng(0))
    w = model.params["fuse.fc8"]["weight"]
    w.data = np.full_like(w.data, np.nan)
    cfg = TrainConfig(positives=2, schedule=((1e-2, 10),), val_batches=1)
    with pytest.raises(TrainingDiverged) as info:
        train_unsupervised(small_corpus, model, cfg, logger=quiet)
    assert "3 consecutive" in str(info.value)
    assert info.value.checkpoint.history == []


# ---------------------------------------------------------------- pose targets and reweighting


def test_heatmap_targets_centre_and_radius():
    t = pose_target_heatmaps([[30.0, 30.0]], crop_size=60, heatmap_size=60, neighborhood_radius=1)
    assert t.shape == (1, 60, 60)
    assert (t > 0).sum() == 9
    assert np.all(t[0, 29:32, 29:32] == 1.0)
    assert set(np.unique(t)) == {-1.0, 1.0}
    t0 = pose_target_heatmaps([[30.0, 30.0]], 60, 60, neighborhood_radius=0)
    assert (t0 > 0).sum() == 1 and t0[0, 30, 30] == 1.0


def test_heatmap_targets_clip_at_the_corner():
    t = pose_target_heatmaps([[0.0, 0.0]], 60, 60, 1)
    assert (t > 0).sum() == 4


def test_heatmap_targets_reject_joints_outside_the_crop():
    with pytest.raises(ValueError, match="outside the crop"):
        pose_target_heatmaps([[61.0, 5.0]], 60, 60)


def test_reweight_values_for_a_centred_joint():
    t = pose_target_heatmaps([[30.0, 30.0]], 60, 60, 1)
    g = reweighted_euclidean_grad(-np.ones_like(t), t)
    # 9 positives each off by -2, 3591 negatives exactly right
    assert np.allclose(g[t > 0], -2.0 / 9)
    assert np.all(g[t < 0] == 0)
    g = reweighted_euclidean_grad(np.zeros_like(t), t)
    assert np.allclose(g[t > 0], -1.0 / 9)
    assert np.allclose(g[t < 0], 1.0 / 3591)
    assert math.isclose(g[t > 0].sum(), -1.0, rel_tol=1e-12)
    assert math.isclose(g[t < 0].sum(), 1.0, rel_tol=1e-12)


def test_reweight_is_zero_at_the_target(rng):
    t = pose_target_heatmaps(rng.uniform(0, 64, (9, 2)), 64, 16)
    assert np.all(reweighted_euclidean_grad(t, t) == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 2))
def test_reweight_mass_is_one_per_side(seed, joints, radius):
    r = np.random.default_rng(seed)
    t = pose_target_heatmaps(r.uniform(0, 64, (joints, 2)), 64, 16, radius)
    w = reweight_mask(t)
    pos = t > 0
    for k in range(joints):
        assert abs(w[k][pos[k]].sum() - 1.0) < 1e-12
        assert abs(w[k][~pos[k]].sum() - 1.0) < 1e-12


def test_reweight_mask_needs_both_classes():
    with pytest.raises(ValueError):
        reweight_mask(-np.ones((1, 4, 4)))


# ---------------------------------------------------------------- pose fine-tuning


def test_pose_loss_decreases_over_first_iterations(small_corpus):
    drops = []
    for seed in range(3):
        cfg = PoseTrainConfig(seed=seed, schedule=((1e-2, 50),), batch_size=8)
        res = finetune_pose(small_corpus, None, cfg, logger=quiet)
        assert all(math.isfinite(x) for x in res.losses)
        drops.append(np.mean(res.losses[:5]) - np.mean(res.losses[-5:]))
    assert np.median(drops) > 0


def test_pose_clip_limit(small_corpus):
    cfg = PoseTrainConfig(schedule=((1e-2, 1),), train_clip_limit=2, batch_size=4)
    res = finetune_pose(small_corpus, None, cfg, logger=quiet)
    assert len(res.train_clips) == 2
    assert not set(res.train_clips) & set(res.val_clips)


def test_limit_keeps_order_and_validates(rng):
    ids = [f"c{i}" for i in range(10)]
    got = _limit(ids, 4, rng)
    assert len(got) == 4 and got == sorted(got, key=ids.index)
    assert _limit(ids, None, rng) == ids
    assert _limit(ids, 20, rng) == ids
    with pytest.raises(ValueError):
        _limit(ids, 0, rng)


# ---------------------------------------------------------------- action fine-tuning


def test_freeze_trunk_updates_only_the_heads(small_corpus):
    cfg = ActionTrainConfig(freeze_trunk=True, schedule=((1e-2, 2),), batch_size=4)
    ref = build_action_net(None, 4, None, "vggm-mini", rng=np.random.default_rng([cfg.seed, 3]))
    before = {n: t.data.copy() for n, t in ref.params.named_tensors()}
    res = finetune_action(small_corpus, None, cfg, logger=quiet)
    changed = {n for n, t in res.net.params.named_tensors() if not np.array_equal(t.data, before[n])}
    assert changed and all(n.startswith("act.") for n in changed)


def test_action_label_out_of_range(small_corpus):
    cfg = ActionTrainConfig(num_classes=2, schedule=((1e-2, 1),), batch_size=2)
    with pytest.raises(ValueError, match="num_classes"):
        finetune_action(small_corpus, None, cfg, logger=quiet)


def test_action_rejects_overlapping_splits(small_corpus):
    ids = [c.clip_id for c in small_corpus]
    with pytest.raises(ValueError, match="overlap"):
        finetune_action(small_corpus, None, ActionTrainConfig(schedule=((1e-2, 1),)), logger=quiet,
                        clip_ids=ids[:4], val_ids=ids[3:])


def test_action_clip_limit(small_corpus):
    cfg = ActionTrainConfig(schedule=((1e-2, 1),), batch_size=2, train_clip_limit=3)
    ids = [c.clip_id for c in small_corpus]
    res = finetune_action(small_corpus, None, cfg, logger=quiet, clip_ids=ids[:5], val_ids=ids[5:])
    assert len(res.train_clips) == 3 and set(res.train_clips) <= set(ids[:5])
