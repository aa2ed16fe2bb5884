import dataclasses

import numpy as np
import pytest

from cycletrack.autodiff import backward
from cycletrack.config import FullConfig, TrainConfig
from cycletrack.net import TrackerModel
from cycletrack.scenes import generate_sequence, jitter_box, sample_palindrome
from cycletrack.training import (
    MomentumState,
    TrainingError,
    clip_gradients,
    cycle_step,
    heldout_sequences,
    legacy_forward,
    legacy_step,
    lr_schedule,
    train,
)


@pytest.fixture(scope="module")
def cfg():
    c = FullConfig()
    c.scene.image_size = 96
    c.scene.n_frames = 8
    c.train.steps_per_epoch = 2
    c.train.legacy_epochs = 1
    c.train.cycle_epochs = 1
    c.train.batch_size = 1
    c.train.eval_sequences = 2
    return c


@pytest.fixture(scope="module")
def model(cfg):
    return TrackerModel(cfg.net, seed=11)


def fresh_sample(cfg, seed=0, jitter=0.2):
    seq = generate_sequence(cfg.scene, seed=seed)
    return sample_palindrome(seq, cfg.train.n_search, cfg.train.frame_gap,
                             seed=seed, jitter_level=jitter)


# ---------------------------------------------------------------------------
# schedule


def test_lr_schedule_endpoints():
    assert lr_schedule(0, 500, 1e-3, 5e-5) == pytest.approx(1e-3, rel=1e-12)
    assert lr_schedule(499, 500, 1e-3, 5e-5) == pytest.approx(5e-5, rel=1e-12)


def test_lr_schedule_is_log_linear():
    mid = lr_schedule(250, 501, 1e-3, 5e-5)
    assert mid == pytest.approx(np.sqrt(1e-3 * 5e-5), rel=1e-9)


def test_lr_schedule_monotone():
    vals = [lr_schedule(s, 100, 1e-3, 5e-5) for s in range(100)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# legacy step


def test_legacy_step_batch_of_one_matches_single(cfg, model):
    seq = generate_sequence(cfg.scene, seed=3)
    box = jitter_box(seq.gt_boxes[0], 0.2, seed=5, bounds=(96, 96))
    rng1 = np.random.default_rng(7)
    rng2 = np.random.default_rng(7)
    loss_batch, weights = legacy_step(model, [(seq.frames[0], box)], cfg.train,
                                      rng1, accumulate=False)
    out = legacy_forward(model, seq.frames[0], box, cfg.train, rng2)
    assert loss_batch == pytest.approx(out.loss.item() * out.weight, rel=1e-12)
    assert weights == [out.weight]


def test_legacy_step_unit_weights_give_mean_base_loss(cfg, model):
    plain = dataclasses.replace(cfg.train, reweight_enabled=False)
    batch = []
    for i in range(3):
        seq = generate_sequence(cfg.scene, seed=20 + i)
        batch.append((seq.frames[0], seq.gt_boxes[0]))
    rng1 = np.random.default_rng(9)
    rng2 = np.random.default_rng(9)
    loss, weights = legacy_step(model, batch, plain, rng1, accumulate=False)
    assert weights == [1.0, 1.0, 1.0]
    singles = [legacy_forward(model, f, b, plain, rng2).loss.item() for f, b in batch]
    assert loss == pytest.approx(np.mean(singles), rel=1e-12)


def test_constructed_noisy_sample_weighs_less_than_clean(cfg, model):
    seq = generate_sequence(cfg.scene, seed=33)
    clean_box = seq.gt_boxes[0]
    noisy_box = jitter_box(clean_box, 1.0, seed=77, bounds=(96, 96))
    rng = np.random.default_rng(1)
    w_clean = legacy_forward(model, seq.frames[0], clean_box, cfg.train, rng).weight
    rng = np.random.default_rng(1)
    w_noisy = legacy_forward(model, seq.frames[0], noisy_box, cfg.train, rng).weight
    # an off-target template yields a more diffuse response mask
    assert w_noisy < w_clean


# ---------------------------------------------------------------------------
# cycle step


def test_cycle_step_kernel_count_and_order(cfg, model):
    sample = fresh_sample(cfg, seed=4)
    out = cycle_step(model, sample, cfg.train, np.random.default_rng(0))
    n = cfg.train.n_search
    assert sample.search_indices == [2, 4, 6, 4, 2]
    assert out.kernel_count == 1 + (2 * n - 1)
    assert len(out.box_tensors) == 2 * n - 1


def test_cycle_step_lambda_zero_equals_legacy(cfg, model):
    sample = fresh_sample(cfg, seed=5)
    tc = dataclasses.replace(cfg.train, lambda_cycle=0.0)
    out = cycle_step(model, sample, tc, np.random.default_rng(3))
    ref = legacy_forward(model, sample.template_frame, sample.pseudo_label.box,
                         tc, np.random.default_rng(3))
    assert out.total.item() == pytest.approx(ref.loss.item() * ref.weight, rel=1e-12)


def test_cycle_step_detach_forward_identical_gradients_zero(cfg, model):
    sample = fresh_sample(cfg, seed=6)
    # reweighting off so a zero label-quality weight cannot null the audit
    tc = dataclasses.replace(cfg.train, reweight_enabled=False)
    out_on = cycle_step(model, sample, tc, np.random.default_rng(4),
                        detach_boxes=True)
    out_off = cycle_step(model, sample, tc, np.random.default_rng(4),
                         detach_boxes=False)
    assert out_on.total.item() == out_off.total.item()  # bit-identical forward

    backward(out_on.total)
    for box in out_on.box_tensors:
        assert box.grad is None
    for p in model.params():
        p.tensor.grad = None

    backward(out_off.total)
    found = any(box.grad is not None and np.any(np.abs(box.grad) > 1e-8)
                for box in out_off.box_tensors)
    assert found
    for p in model.params():
        p.tensor.grad = None


def test_cycle_step_loss_is_finite_across_random_samples(cfg, model):
    for seed in range(5):
        out = cycle_step(model, fresh_sample(cfg, seed=40 + seed), cfg.train,
                         np.random.default_rng(seed))
        assert np.isfinite(out.total.item())


# ---------------------------------------------------------------------------
# gradient utilities


def test_clip_gradients_scales_to_max_norm(model):
    params = model.params()[:2]
    for p in params:
        p.tensor.grad = np.full(p.tensor.data.shape, 3.0)
    before = np.sqrt(sum((p.tensor.grad**2).sum() for p in params))
    returned = clip_gradients(params, 1.0)
    after = np.sqrt(sum((p.tensor.grad**2).sum() for p in params))
    assert returned == pytest.approx(before)
    assert after == pytest.approx(1.0)
    for p in params:
        p.tensor.grad = None


def test_momentum_accumulates_velocity(model):
    p = model.params()[0]
    m = MomentumState(0.5)
    p.tensor.grad = np.ones_like(p.tensor.data)
    m.condition([p])
    assert np.allclose(p.tensor.grad, 1.0)
    p.tensor.grad = np.ones_like(p.tensor.data)
    m.condition([p])
    assert np.allclose(p.tensor.grad, 1.5)
    p.tensor.grad = None


# ---------------------------------------------------------------------------
# training loop


def test_train_writes_logs_and_checkpoint(cfg, tmp_path):
    res = train(cfg, out_dir=tmp_path)
    assert res.steps == 4
    log = (tmp_path / "train_log.txt").read_text().strip().split("\n")
    assert len(log) == 4
    parts = log[0].split(" ")
    assert len(parts) == 6  # step loss l_legacy l_cycle lr w_mean
    assert parts[0] == "0"
    float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]), float(parts[5])
    # legacy-stage lines carry a zero cycle term
    assert float(log[0].split(" ")[3]) == 0.0
    assert float(log[-1].split(" ")[3]) != 0.0

    metrics = [m for m in (tmp_path / "metrics.jsonl").read_text().strip().split("\n")]
    assert len(metrics) == 2
    import json

    rec = json.loads(metrics[0])
    assert set(rec) == {"epoch", "mean_iou", "success_auc"}
    assert (tmp_path / "checkpoint.bin").exists()


def test_train_is_deterministic(cfg):
    a = train(cfg)
    b = train(cfg)
    assert a.metrics == b.metrics
    for pa, pb in zip(a.model.params(), b.model.params()):
        assert np.array_equal(pa.tensor.data, pb.tensor.data)


def test_zero_epoch_training_returns_untrained_model(cfg):
    zero = dataclasses.replace(cfg.train, legacy_epochs=0, cycle_epochs=0)
    c = dataclasses.replace(cfg, train=zero)
    res = train(c)
    ref = TrackerModel(cfg.net, seed=cfg.train.seed)
    for pa, pb in zip(res.model.params(), ref.params()):
        assert np.array_equal(pa.tensor.data, pb.tensor.data)


def test_heldout_disjoint_from_training_data(cfg):
    seqs_a = heldout_sequences(cfg)
    seqs_b = heldout_sequences(cfg)
    assert [s.seq_id for s in seqs_a] == [s.seq_id for s in seqs_b]
    assert len(seqs_a) == cfg.train.eval_sequences
