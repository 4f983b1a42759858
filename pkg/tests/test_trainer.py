import os

import numpy as np
import pandas as pd
import pytest

import tensor_core as tc
from array_store import read_metadata
from config import StageConfig
from errors import ConfigError, NaNGradientError, PrerequisiteError
from nn_layers import Parameter
from synth_corpus import make_instruction
from trainer import (AdamW, ModelBundle, ParamGroup, TaskSampler, append_metrics, build_bundle, clip_grad_norm,
                     compose_losses, load_trained_bundle, run_stage, supervision_targets, train_vae,
                     verify_freeze, warmup_scale)


@pytest.fixture
def bundle(float64, vocab, backbone_config, diffusion_config):
    return build_bundle(vocab.size, backbone_config, diffusion_config)


def _stage1(**overrides):
    values = dict(stage=1, mixture={"T2M": 1.0}, frozen_groups=["text.base"], batch_size=4,
                  max_steps=2, eval_every=1, log_every=1, val_batches=1)
    values.update(overrides)
    return StageConfig(**values)


def test_adamw_first_step():
    p = Parameter(np.array([1.0, -1.0]))
    p.grad = np.array([2.0, -0.5])
    AdamW([ParamGroup("all", {"p": p}, lr=0.1)], weight_decay=0.01).step()
    expected = np.array([1.0 - 0.1 * (1.0 + 0.01), -1.0 - 0.1 * (-1.0 - 0.01)])
    assert np.allclose(p.data, expected, atol=1e-6)


def test_frozen_group_keeps_its_values_and_has_no_state():
    live, frozen = Parameter(np.ones(3)), Parameter(np.ones(3))
    optimizer = AdamW([ParamGroup("live", {"live": live}, 0.1), ParamGroup("frozen", {"frozen": frozen}, 0.1, True)])
    assert not frozen.requires_grad
    live.grad = np.ones(3)
    frozen.grad = np.ones(3)
    optimizer.step()
    assert np.array_equal(frozen.data, np.ones(3))
    assert "frozen" not in optimizer.state
    assert not np.array_equal(live.data, np.ones(3))


def test_non_finite_gradient_moves_nothing():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    optimizer = AdamW([ParamGroup("g", {"a": a, "b": b}, 0.1)])
    a.grad = np.ones(2)
    b.grad = np.array([np.nan, 0.0])
    with pytest.raises(NaNGradientError):
        optimizer.step()
    assert np.array_equal(a.data, np.ones(2))
    assert optimizer.step_count == 0


def test_optimizer_state_round_trip():
    p = Parameter(np.ones(3))
    optimizer = AdamW([ParamGroup("g", {"p": p}, 0.1)])
    p.grad = np.arange(3.0)
    optimizer.step()
    other = AdamW([ParamGroup("g", {"p": Parameter(np.ones(3))}, 0.1)])
    other.load_state_dict(optimizer.state_dict())
    assert other.step_count == 1
    assert np.array_equal(other.state["p"][0], optimizer.state["p"][0])
    assert np.array_equal(other.state["p"][1], optimizer.state["p"][1])


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0)


def test_warmup_scale():
    assert warmup_scale(0, 100, 0.1) == pytest.approx(0.1)
    assert warmup_scale(9, 100, 0.1) == 1.0
    assert warmup_scale(50, 100, 0.1) == 1.0


def test_bundle_geometry_must_agree(vocab, backbone_config, diffusion_config):
    diffusion_config.cond_dim = 16
    with pytest.raises(ConfigError):
        build_bundle(vocab.size, backbone_config, diffusion_config)


def test_bundle_checkpoint(bundle, tmp_path):
    path = str(tmp_path / "stage1.bmt")
    bundle.save(path, {"stage": 1})
    restored, meta = ModelBundle.from_checkpoint(path)
    assert meta["stage"] == 1
    for name, p in bundle.named_parameters().items():
        assert np.array_equal(restored.named_parameters()[name].data, p.data)


def test_text_only_batches_leave_the_diffusion_head_untouched(bundle, vocab, rng):
    seqs = [make_instruction("M2T", vocab, motion_slots={"input": rng.normal(size=4)}, answer="a person spins")
            for _ in range(2)]
    terms = compose_losses(bundle, seqs, vocab, rng)
    assert terms.n_motion == 0 and terms.n_text > 0
    tc.backward(terms.total)
    for p in bundle.diffusion.parameters():
        assert p.grad is None or not np.any(p.grad)


def test_only_the_start_of_motion_target_is_supervised(bundle, vocab, rng):
    seq = make_instruction("T2M", vocab, caption="a person jumps", motion_slots={"target": rng.normal(size=4)},
                           holders=2)
    terms = compose_losses(bundle, [seq], vocab, rng, retain_logits=True)
    assert terms.n_motion == 1
    targets, mask = supervision_targets(terms.output, [seq], vocab)
    assert list(targets[mask]) == [vocab.som_id]
    assert vocab.mholder_out_id not in targets[mask]
    tc.backward(terms.total)
    grad = terms.output.text_logits.grad
    text_rows = list(terms.output.layout.text_rows)
    som_row = text_rows.index(seq.token_ids.index(vocab.som_id))
    eom_row = text_rows.index(seq.token_ids.index(vocab.eom_id))
    assert mask.sum() == 1
    assert list(np.flatnonzero(np.abs(grad).sum(axis=1))) == [som_row - 1]
    assert not np.any(grad[eom_row])


def test_nothing_to_supervise_skips_the_batch(bundle, vocab):
    seq = make_instruction("T2M", vocab, caption="a person jumps", with_answer=False)
    assert compose_losses(bundle, [seq], vocab, np.random.default_rng(0)) is None


def test_verify_freeze_reports_planted_gradient(bundle):
    bundle.apply_freeze(["text.base"])
    assert verify_freeze(bundle, ["text.base"]).passed
    name, p = next(iter(bundle.parameter_groups()["text.base"].items()))
    p.grad = np.ones_like(p.data)
    report = verify_freeze(bundle, ["text.base"])
    assert report.violations == [name]
    assert "diffusion" in report.trainable_groups


def test_task_sampler_needs_latents_for_motion_tasks(corpus_dir, vocab):
    from data_processor import load_split
    df = load_split(os.path.join(corpus_dir, "train.jsonl"))
    with pytest.raises(ConfigError):
        TaskSampler(df, vocab, 2, {"T2M": 1.0})
    sampler = TaskSampler(df, vocab, 2, {"PLAIN_TEXT": 1.0})
    assert all(s.task == "PLAIN_TEXT" for s in sampler.batch(3, np.random.default_rng(0)))


def test_append_metrics_truncates_on_resume(tmp_path):
    path = str(tmp_path / "m.csv")
    append_metrics([{"step": i, "loss": 1.0} for i in range(5)], path)
    append_metrics([{"step": 3, "loss": 0.5}], path, truncate_after=2)
    assert pd.read_csv(path)["step"].tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("overrides", [
    {"mixture": {"T2M": 0.5, "M2T": 0.5}},
    {"frozen_groups": []},
    {"mixture": {"DANCE": 1.0}},
])
def test_stage_contract(overrides):
    with pytest.raises(ConfigError):
        _stage1(**overrides).validate()


def test_stage_one_needs_a_vae(data_paths, registry):
    with pytest.raises(PrerequisiteError):
        run_stage(_stage1(), data_paths, registry)


def test_no_trained_model(data_paths, registry):
    with pytest.raises(PrerequisiteError):
        load_trained_bundle(data_paths, registry)


def test_vae_training_writes_checkpoint_and_curve(data_paths, registry, vae_config):
    run_id = registry.start_run("train-vae", 0)
    vae, best_mse = train_vae(vae_config, data_paths, registry, run_id)
    assert np.isfinite(best_mse)
    assert registry.latest_checkpoint("vae")["step"] == vae_config.steps
    metrics = pd.read_csv(data_paths.metrics_csv("vae"))
    assert metrics["step"].tolist() == [0, 1]
    assert (metrics["kl"] > -1e-6).all()
    assert not np.allclose(vae.latent_std, 1.0)


def test_stage_one_keeps_the_text_branch_and_resumes(data_paths, registry, vae_config, backbone_config,
                                                     diffusion_config):
    train_vae(vae_config, data_paths, registry, registry.start_run("train-vae", 0))
    run_id = registry.start_run("train", 0)
    result = run_stage(_stage1(), data_paths, registry, run_id, backbone_config=backbone_config,
                       diffusion_config=diffusion_config)
    assert os.path.exists(result.checkpoint)
    bundle, meta = load_trained_bundle(data_paths, registry)
    assert meta["stage"] == 1 and meta["frozen_groups"] == ["text.base"]

    resumed = run_stage(_stage1(max_steps=3), data_paths, registry, run_id, resume=True)
    assert resumed.steps == 3
    assert pd.read_csv(result.metrics_path)["step"].tolist() == [0, 1, 2]
    assert bundle.backbone.group_checksum("text.base") == \
        ModelBundle.from_checkpoint(data_paths.checkpoint("stage1_last"))[0].backbone.group_checksum("text.base")


def _loss_curve(result):
    return pd.read_csv(result.metrics_path)["loss"].to_numpy()


def test_training_is_reproducible_and_resume_continues_the_same_curve(data_paths, registry, vae_config,
                                                                      backbone_config, diffusion_config):
    train_vae(vae_config, data_paths, registry)
    models = {"backbone_config": backbone_config, "diffusion_config": diffusion_config}

    straight = _loss_curve(run_stage(_stage1(max_steps=4, warmup_frac=0.0), data_paths, registry, **models))
    again = _loss_curve(run_stage(_stage1(max_steps=4, warmup_frac=0.0), data_paths, registry, **models))
    assert len(straight) == 4
    assert np.array_equal(straight, again)

    run_stage(_stage1(max_steps=2, warmup_frac=0.0), data_paths, registry, **models)
    resumed = run_stage(_stage1(max_steps=4, warmup_frac=0.0), data_paths, registry, resume=True)
    assert np.array_equal(_loss_curve(resumed), straight)


def test_resume_keeps_a_better_best_checkpoint(data_paths, registry, vae_config, backbone_config, diffusion_config):
    train_vae(vae_config, data_paths, registry)
    run_stage(_stage1(), data_paths, registry, backbone_config=backbone_config, diffusion_config=diffusion_config)
    best = data_paths.checkpoint("stage1")
    bundle, meta = ModelBundle.from_checkpoint(best)
    bundle.save(best, {**meta, "val_loss": -1.0})

    result = run_stage(_stage1(max_steps=4), data_paths, registry, resume=True)
    assert result.best_val == -1.0
    assert read_metadata(best)["val_loss"] == -1.0
    assert read_metadata(best)["step"] == meta["step"]
