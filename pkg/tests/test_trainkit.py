"""Config parsing, optimizers, schedule, quality metrics, training loop."""

import numpy as np
import pytest

from bpct import gan, trainkit
from bpct.autodiff.engine import Tensor
from bpct.trainkit import (Adam, ConfigError, METRIC_PARTS, SGD, TrainConfig,
                           TrainingDiverged, evaluate, load_config, lr_at,
                           make_dataset, parse_config_text, psnr, ssim3d,
                           train, write_eval_csv)
from bpct.volcore import DrrImage, View
from oracles import loop_psnr, loop_ssim3d


# ---------------------------------------------------------------------------
# configuration


def test_defaults_validate():
    TrainConfig().validate()


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("model.depth = 3")


def test_unparseable_value_is_an_error():
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config_text("train.epochs = many")


def test_missing_equals_is_an_error():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("train.epochs 5")


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_config_text("# header\n\ntrain.epochs = 3  # trailing\n")
    assert cfg.epochs == 3


def test_overrides_layer_left_to_right():
    base = parse_config_text("train.lr = 0.5")
    cfg = parse_config_text("train.lr = 0.25", base=base)
    assert cfg.lr == 0.25
    assert base.lr == 0.5  # base untouched


def test_zero_epochs_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()


def test_holdout_must_leave_training_data():
    with pytest.raises(ConfigError):
        TrainConfig(data_count=4, data_holdout=4).validate()


def test_vq_divisibility_enforced():
    with pytest.raises(ConfigError):
        TrainConfig(model_kind="vq", n=16, embed_dim=7).validate()
    TrainConfig(model_kind="vq", n=16, embed_dim=8).validate()


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("model.kind = baseline\nloss.adv = 0\ntrain.batch = 3\n")
    cfg = load_config(path, overrides=["train.batch = 4"])
    assert cfg.model_kind == "baseline"
    assert cfg.lambda_adv == 0.0
    assert cfg.batch == 4


# ---------------------------------------------------------------------------
# optimizers and schedule


def test_adam_is_a_fixed_point_on_zero_gradient():
    t = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    t.grad = np.zeros(2)
    opt = Adam([t], lr=0.1)
    opt.step()
    assert np.array_equal(t.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    # m_hat = g, v_hat = g^2 after one step, so p -= lr * g/(|g|+eps)
    t = Tensor(np.array([1.0]), requires_grad=True)
    t.grad = np.ones(1)
    opt = Adam([t], lr=0.1)
    opt.step()
    want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    assert abs(float(t.data[0]) - want) < 1e-15


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(6)
    grads = [rng.standard_normal(6) for _ in range(5)]

    t = Tensor(p0.copy(), requires_grad=True)
    opt = Adam([t], lr=0.01, weight_decay=0.1)
    for g in grads:
        t.grad = g.copy()
        opt.step()

    # independent scalar re-implementation
    p = p0.copy()
    m = np.zeros(6)
    v = np.zeros(6)
    for step, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** step)
        vh = v / (1 - 0.999 ** step)
        p = p - 0.01 * (mh / (np.sqrt(vh) + 1e-8) + 0.1 * p)
    assert np.max(np.abs(t.data - p)) < 1e-14


def test_sgd_matches_elementwise_rule():
    rng = np.random.default_rng(1)
    p0 = rng.standard_normal(8)
    g = rng.standard_normal(8)
    t = Tensor(p0.copy(), requires_grad=True)
    t.grad = g.copy()
    SGD([t], lr=0.05, weight_decay=0.2).step()
    assert np.max(np.abs(t.data - (p0 - 0.05 * (g + 0.2 * p0)))) < 1e-15


def test_optimizers_skip_parameters_without_gradients():
    t = Tensor(np.ones(2), requires_grad=True)
    Adam([t], lr=0.5).step()
    SGD([t], lr=0.5).step()
    assert np.array_equal(t.data, [1.0, 1.0])


def test_lr_flat_then_exponential():
    assert lr_at(0, 2e-4, 50, 0.95) == 2e-4
    assert lr_at(49, 2e-4, 50, 0.95) == 2e-4
    assert lr_at(52, 2e-4, 50, 0.95) == pytest.approx(2e-4 * 0.95 ** 3, rel=1e-12)


def test_lr_never_increases():
    vals = [lr_at(e, 1e-3, 10, 0.9) for e in range(40)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# quality metrics


def test_psnr_identical_volumes_is_inf():
    a = np.random.default_rng(2).random((4, 4, 4))
    assert psnr(a, a.copy()) == float("inf")


def test_psnr_constant_offset_closed_form():
    a = np.zeros((4, 4, 4))
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_loop_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.random((6, 5, 4)), rng.random((6, 5, 4))
    assert psnr(a, b) == pytest.approx(loop_psnr(a, b), abs=1e-6)


def test_ssim_identical_volumes_is_one():
    a = np.random.default_rng(4).random((8, 8, 8))
    assert ssim3d(a, a.copy()) == pytest.approx(1.0, abs=1e-12)


def test_ssim_penalizes_inverted_structure():
    a = np.random.default_rng(5).random((8, 8, 8))
    assert ssim3d(a, 1.0 - a) < 1.0


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(6)
    a, b = rng.random((8, 8, 8)), rng.random((8, 8, 8))
    assert ssim3d(a, b) == pytest.approx(loop_ssim3d(a, b), abs=1e-6)


def test_ssim_rejects_small_volumes():
    with pytest.raises(ValueError):
        ssim3d(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))


def test_metric_shape_mismatch_raises():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


# ---------------------------------------------------------------------------
# data and loop


def test_dataset_is_deterministic_and_split():
    cfg = TrainConfig(data_count=6, data_holdout=2, n=8)
    tr1, ho1 = make_dataset(cfg)
    tr2, ho2 = make_dataset(cfg)
    assert len(tr1) == 4 and len(ho1) == 2
    for a, b in zip(tr1 + ho1, tr2 + ho2):
        assert a.vol.tobytes() == b.vol.tobytes()
        assert a.drr_f.tobytes() == b.drr_f.tobytes()


def test_dataset_projections_are_consistent():
    from bpct.projector import project_array
    cfg = TrainConfig(data_count=2, data_holdout=0, n=8)
    (s, *_), _ = make_dataset(cfg)
    assert np.allclose(s.drr_f, project_array(s.vol, View.FRONTAL), atol=1e-7)
    assert np.allclose(s.drr_l, project_array(s.vol, View.LATERAL), atol=1e-7)


def _tiny_cfg(**kw):
    base = dict(model_kind="ga", n=16, base_channels=4, lift_channels=8,
                reduction=4, epochs=2, batch=2, data_count=2, data_holdout=0,
                perc_channels=4)
    base.update(kw)
    return TrainConfig(**base)


def test_metrics_log_has_fixed_part_grid(tmp_path):
    res = train(_tiny_cfg(), tmp_path / "run")
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,part,value"
    body = [l.split(",") for l in lines[1:]]
    assert len(body) == res.steps * len(METRIC_PARTS)
    for chunk_start in range(0, len(body), len(METRIC_PARTS)):
        parts = [row[2] for row in body[chunk_start:chunk_start + len(METRIC_PARTS)]]
        assert tuple(parts) == METRIC_PARTS
    # values are repr'd floats that parse back exactly
    for row in body:
        float(row[3])


def test_checkpoints_written_and_loadable(tmp_path):
    res = train(_tiny_cfg(checkpoint_interval=1, epochs=3), tmp_path / "run")
    assert (tmp_path / "run" / "ckpt_epoch0001.bpct").exists()
    assert (tmp_path / "run" / "ckpt_epoch0002.bpct").exists()
    genm = gan.load_checkpoint(res.checkpoint_path)
    assert genm.kind == "ga"
    disc = gan.load_checkpoint(res.disc_checkpoint_path)
    assert disc.kind == "disc"


def test_adversary_disabled_run_logs_zero_d_loss(tmp_path):
    res = train(_tiny_cfg(lambda_adv=0.0), tmp_path / "run")
    assert res.last_parts["adv_g"] == 0.0
    assert res.last_parts["d_loss"] == 0.0
    assert res.disc_checkpoint_path == ""


def test_loss_decreases_on_single_sample_quadratic_objective(tmp_path):
    # one sample, no adversary, no perceptual term: the remaining
    # objective is smooth and a small-lr descent must not climb
    cfg = _tiny_cfg(data_count=1, batch=1, epochs=40, lr=1e-3,
                    lambda_adv=0.0, lambda_perc=0.0, decay_start=40)
    res = train(cfg, tmp_path / "run")
    totals = []
    for line in (tmp_path / "run" / "metrics.csv").read_text().splitlines()[1:]:
        step, epoch, part, value = line.split(",")
        if part == "total_g":
            totals.append(float(value))
    assert len(totals) == 40
    for a, b in zip(totals, totals[1:]):
        assert b <= a + 1e-5
    assert totals[-1] < totals[0]


def test_divergence_is_detected(tmp_path):
    cfg = _tiny_cfg(data_count=1, batch=1, epochs=50, lr=1e5, lambda_adv=0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDiverged):
            train(cfg, tmp_path / "run")


def test_vq_training_updates_usage(tmp_path):
    cfg = _tiny_cfg(model_kind="vq", embed_dim=8, codebook_size=16)
    res = train(cfg, tmp_path / "run")
    genm = gan.load_checkpoint(res.checkpoint_path)
    # 2 samples/step * 2 branches * 4 latent sites * 2 steps
    assert int(genm.codebook.usage.sum()) == 32
    assert res.last_parts["vq"] > 0.0
    assert res.last_parts["perplexity"] >= 1.0


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_identity_fixture_yields_sentinels(tmp_path):
    # ground truth manufactured as the model's own output: the metrics
    # must hit their identity sentinels exactly
    cfg = _tiny_cfg()
    res = train(cfg, tmp_path / "run")
    genm = gan.load_checkpoint(res.checkpoint_path)
    (s, *_), _ = make_dataset(cfg)
    rec = trainkit.reconstruct(genm, DrrImage(s.drr_f, View.FRONTAL),
                               DrrImage(s.drr_l, View.LATERAL))
    fixture = trainkit.Sample(rec.data, s.drr_f, s.drr_l, seed=-1)
    mean_p, mean_s, n, per = evaluate(genm, [fixture])
    assert mean_p == float("inf")
    assert mean_s == pytest.approx(1.0, abs=1e-12)
    assert n == 1


def test_eval_csv_format(tmp_path):
    path = tmp_path / "eval.csv"
    write_eval_csv([("attn_gan", float("inf"), 1.0, 4)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "method,psnr_db,ssim,n"
    assert lines[1] == "attn_gan,inf,1.0,4"


def test_method_names_cover_all_kinds():
    assert trainkit.method_name("ga") == "attn_gan"
    assert trainkit.method_name("baseline") == "no_attn_baseline"
    assert trainkit.method_name("vq") == "vq_gan"


def test_reconstruct_output_contract(tmp_path):
    cfg = _tiny_cfg()
    res = train(cfg, tmp_path / "run")
    genm = gan.load_checkpoint(res.checkpoint_path)
    (s, *_), _ = make_dataset(cfg)
    rec = trainkit.reconstruct(genm, DrrImage(s.drr_f, View.FRONTAL),
                               DrrImage(s.drr_l, View.LATERAL))
    assert rec.data.shape == (16, 16, 16)
    assert rec.data.dtype == np.float32
    assert np.all(rec.data > 0.0) and np.all(rec.data < 1.0)
