import dataclasses

import numpy as np
import pytest
import torch
import yaml

from tcformer import runconfig
from tcformer.errors import InvalidConfig, InvalidInput, TrainingDiverged
from tcformer.harness.data import (
    BACKGROUND,
    BODY,
    DETAIL,
    NUM_KEYPOINTS,
    STRIDE,
    generate_dataset,
    keypoint_cell,
    to_tensors,
)
from tcformer.harness.gradcheck import MODULE_CHECKS, TOLERANCE, check_module, grad_check
from tcformer.harness.metrics import decode_heatmaps, evaluate_pck, pck_from_heatmaps, token_density_report
from tcformer.harness.train import OptimizerConfig, batch_order, smoothed, train
from tcformer.model import build_model, mini_config


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(7, 40)


# data

def test_same_seed_is_bitwise_identical():
    a, b = generate_dataset(3, 5), generate_dataset(3, 5)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.target_heatmaps.tobytes() == y.target_heatmaps.tobytes()
        assert np.array_equal(x.keypoints, y.keypoints)


def test_sample_depends_only_on_seed_and_index():
    assert generate_dataset(3, 5)[2].image.tobytes() == generate_dataset(3, 9)[2].image.tobytes()


def test_zero_count_is_empty():
    assert generate_dataset(0, 0) == []


def test_bad_resolution_rejected():
    with pytest.raises(InvalidInput):
        generate_dataset(0, 1, resolution=48)


def test_sample_invariants(samples):
    for s in samples:
        assert s.image.shape == (64, 64, 3) and s.image.min() >= 0 and s.image.max() <= 1
        assert s.target_heatmaps.shape == (NUM_KEYPOINTS, 16, 16)
        assert 1 <= s.visible.sum() // 2 <= 3
        for kp in np.flatnonzero(s.visible):
            x, y = s.keypoints[kp]
            assert 0 <= x < 64 and 0 <= y < 64
            hm = s.target_heatmaps[kp]
            assert hm.max() == 1.0
            # argmax of the target is the keypoint's cell
            assert np.unravel_index(hm.argmax(), hm.shape) == keypoint_cell(x, y)
        assert not s.target_heatmaps[~s.visible].any()
        assert set(np.unique(s.part_mask)) <= {BACKGROUND, BODY, DETAIL}
        assert (s.part_mask == DETAIL).any() and (s.part_mask == BACKGROUND).any()


def test_to_tensors_layout(samples):
    images, targets = to_tensors(samples[:3])
    assert images.shape == (3, 3, 64, 64) and targets.shape == (3, NUM_KEYPOINTS, 16, 16)
    assert torch.equal(images[1].permute(1, 2, 0), torch.as_tensor(samples[1].image, dtype=torch.float32))


# metrics

def test_perfect_heatmaps_score_one(samples):
    assert pck_from_heatmaps(np.stack([s.target_heatmaps for s in samples]), samples) == 1.0


def test_zero_heatmaps_score_chance_rate(samples):
    zero = np.zeros((len(samples), NUM_KEYPOINTS, 16, 16))
    # first-cell tie-break puts every guess at the center of cell (0, 0)
    guess = np.array([STRIDE / 2, STRIDE / 2])
    hits = [np.linalg.norm(s.keypoints[k] - guess) <= 6.4 for s in samples for k in np.flatnonzero(s.visible)]
    assert pck_from_heatmaps(zero, samples) == pytest.approx(np.mean(hits))


def test_decode_cell_centers_and_ties():
    hm = np.zeros((1, 4, 4))
    hm[0, 2, 3] = 1.0
    assert decode_heatmaps(hm).tolist() == [[14.0, 10.0]]
    hm[0, 0, 1] = 1.0
    assert decode_heatmaps(hm).tolist() == [[6.0, 2.0]]


def test_density_report_strided_is_uniform(samples):
    model = build_model(mini_config(reducer="strided"), seed=0)
    rep = token_density_report(model, samples[:10])
    assert rep["detail_to_background"] == pytest.approx(1.0)
    assert rep["background"] == pytest.approx(0.25)


def test_density_report_untrained_ctm(samples):
    rep = token_density_report(build_model(mini_config(), seed=0), samples[:10])
    assert np.isfinite(rep["detail_to_background"]) and rep["detail_to_background"] > 0


# training

def test_smoothed_block_means():
    assert smoothed(list(range(10)), 5).tolist() == [2.0, 7.0]
    assert len(smoothed([1.0] * 24)) == 0


def test_batch_order_covers_each_epoch():
    order = batch_order(100, 10, 20, 0)
    assert sorted(torch.cat(order[:5]).tolist()) == list(range(100))
    assert sorted(torch.cat(order[5:]).tolist()) == list(range(100))


def test_fixed_order_repeats_first_epoch():
    order = batch_order(100, 12, 20, 0, reshuffle=False)
    assert all(torch.equal(order[i], order[i % 5]) for i in range(12))
    assert sorted(torch.cat(order[:5]).tolist()) == list(range(100))


def test_lr_schedule():
    cfg = OptimizerConfig(steps=100, lr=1.0, warmup_steps=10)
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(10) == pytest.approx(1.0)
    assert cfg.lr_at(99) < 0.01


def test_frozen_training_has_flat_curve(samples):
    res = train(mini_config(), samples[:20], OptimizerConfig(steps=4, batch_size=20), freeze=True)
    assert len(set(res.losses)) == 1


def test_seeded_training_is_reproducible(samples):
    opt = OptimizerConfig(steps=5, batch_size=10)
    a = train(mini_config(), samples[:20], opt)
    b = train(mini_config(), samples[:20], opt)
    assert a.losses == b.losses


def test_single_sample_overfit(samples):
    torch.set_num_threads(1)
    res = train(mini_config(), samples[:1], OptimizerConfig(steps=500, batch_size=1, warmup_steps=20, lr=2e-3))
    assert res.losses[-1] < 1e-3, res.losses[-5:]


def test_divergence_raises_with_diagnostics(samples):
    bad = [dataclasses.replace(s, image=np.full_like(s.image, np.inf)) for s in samples[:4]]
    with pytest.raises(TrainingDiverged) as e:
        train(mini_config(), bad, OptimizerConfig(steps=5, batch_size=2))
    assert e.value.diagnostics["step"] == 0


def test_eval_pck_in_unit_interval(samples):
    pck = evaluate_pck(build_model(mini_config(), seed=0), samples[:5])
    assert 0.0 <= pck <= 1.0


# gradient checks

def test_linear_gradcheck_is_tight():
    assert check_module("linear").max_rel_error < 1e-8


def test_corrupted_gradient_is_flagged():
    r = check_module("corrupted")
    assert r.max_rel_error > 1e-2 and not r.passed


@pytest.mark.parametrize("name", sorted(set(MODULE_CHECKS) - {"corrupted"}))
def test_all_module_checks_pass(name):
    assert check_module(name).passed


def test_gradcheck_zero_gradient_tensor_is_not_flagged():
    x = torch.randn(3, dtype=torch.float64, requires_grad=True)
    y = torch.randn(3, dtype=torch.float64, requires_grad=True)
    r = grad_check(lambda: (x * x).sum() + 0 * y.sum(), [x, y])
    assert r.max_rel_error < TOLERANCE


def test_unknown_module():
    with pytest.raises(KeyError):
        check_module("nope")


# run configuration

def test_runconfig_defaults_build_mini_model():
    cfg = runconfig.RunConfig()
    assert cfg.model_config() == mini_config(mta=cfg.model_config().mta)
    assert cfg.model_config().channels == [32, 64]


def test_runconfig_rejects_unknown_keys():
    with pytest.raises(InvalidConfig):
        runconfig.from_dict({"modle": {}})
    with pytest.raises(InvalidConfig):
        runconfig.from_dict({"train": {"stepz": 3}})


def test_runconfig_yaml_round_trip(tmp_path):
    cfg = runconfig.from_dict({"train": {"steps": 7}, "ctm": {"mode": "topk"}, "head": "deconv"})
    p = tmp_path / "c.yaml"
    p.write_text(runconfig.dump(cfg))
    assert runconfig.load(p) == cfg
    assert yaml.safe_load(p.read_text())["train"]["steps"] == 7


def test_runconfig_explicit_stages():
    cfg = runconfig.from_dict({"model": {"stages": [
        {"channels": 16, "reduction_ratio": 2, "depth": 2}, {"channels": 32, "heads": 2}]}})
    m = cfg.model_config()
    assert m.channels == [16, 32] and m.stages[0].depth == 2
    with pytest.raises(InvalidConfig):
        runconfig.from_dict({"model": {"stages": [{"width": 4}]}}).model_config()


def test_overrides_take_precedence():
    cfg = runconfig.apply_overrides(runconfig.RunConfig(), seed=5, out="x", preset_name="light", head="cls", ctm="strided")
    assert (cfg.data.seed, cfg.train.seed, cfg.output, cfg.model.preset, cfg.head, cfg.ctm.mode) == \
        (5, 5, "x", "light", "cls", "strided")
