"""Gradient oracles over whole modules plus the desk-scale training checks (marked slow)"""
import numpy as np
import pytest

import tensor_core as tc
from config import DataPaths, EvaluatorConfig, VAEConfig, default_stage_config
from data_processor import load_normalizer, load_split, standardized_clips
from database import RunRegistry
from diffusion_head import DiffusionHead
from eval_suite import EvaluatorEmbedder, ModelEvaluator, contrastive_loss, train_evaluator
from motion_vae import MotionVAE, reparameterize, vae_loss
from synth_corpus import HybridSequence, Vocabulary, generate_corpus, make_instruction
from trainer import AdamW, ModelBundle, ParamGroup, build_bundle, compose_losses, run_stage, train_vae, vae_val_mse

GRAD_TOL = 1e-4


# Gradient oracle

def test_vae_gradients(float64, vae_config, rng):
    vae = MotionVAE(vae_config)
    clip = rng.normal(size=(2, 10, 15))
    eps = rng.normal(size=(2, 4))

    def loss():
        dist = vae.encode(clip)
        recon = vae.decode(reparameterize(dist, eps=eps), 10)
        return vae_loss(clip, recon, dist, 0.1)[0]

    assert tc.grad_check(loss, vae.parameters(), max_coords=4) < GRAD_TOL


def test_backbone_and_diffusion_gradients(float64, vocab, backbone_config, diffusion_config, rng):
    bundle = build_bundle(vocab.size, backbone_config, diffusion_config)
    seqs = [make_instruction("T2M", vocab, caption="a person jumps", motion_slots={"target": rng.normal(size=4)},
                             holders=2),
            make_instruction("M2T", vocab, motion_slots={"input": rng.normal(size=4)}, answer="a person spins")]

    def loss():
        return compose_losses(bundle, seqs, vocab, np.random.default_rng(5)).total

    assert tc.grad_check(loss, bundle.parameters(), max_coords=3) < GRAD_TOL


def test_denoiser_gradients(float64, diffusion_config, rng):
    head = DiffusionHead(diffusion_config)
    z_t, c = rng.normal(size=(3, 4)), rng.normal(size=(3, 8))
    target = rng.normal(size=(3, 4))

    def loss():
        return (head.denoise(z_t, 17, c) * target).sum()

    assert tc.grad_check(loss, head.denoiser.parameters(), max_coords=4) < GRAD_TOL


def test_evaluator_gradients(float64, evaluator_config, vocab, rng):
    evaluator = EvaluatorEmbedder(evaluator_config, vocab.size)
    texts = [vocab.tokenize("a person jumps"), vocab.tokenize("someone spins around"), vocab.tokenize("a figure")]
    clips = [rng.normal(size=(n, 15)) for n in (8, 10, 9)]

    def loss():
        return contrastive_loss(evaluator.encode_text(texts), evaluator.encode_motion(clips), 0.5)

    assert tc.grad_check(loss, evaluator.parameters(), max_coords=3) < GRAD_TOL


# Routing properties over many random sequences

@pytest.mark.parametrize("placement", [(True, True), (False, False), (False, True)])
def test_text_prompts_match_the_text_model(float64, vocab, backbone_config, placement):
    backbone_config.placement = list(placement)
    bundle = build_bundle(vocab.size, backbone_config)
    rng = np.random.default_rng(11)
    for _ in range(100):
        seq = HybridSequence()
        seq.extend_text(rng.integers(0, vocab.motion_token_start, size=int(rng.integers(1, 20))))
        routed = bundle.backbone.forward_batch([seq], vocab).text_logits.data
        plain = bundle.backbone.forward_text([seq.token_ids]).data[0]
        assert np.max(np.abs(routed - plain)) < 1e-6


def test_gated_positions_get_no_gradient(float64, vocab, backbone_config, diffusion_config):
    bundle = build_bundle(vocab.size, backbone_config, diffusion_config)
    rng = np.random.default_rng(3)
    gated = (vocab.eom_id, vocab.mholder_in_id, vocab.mholder_out_id)
    for _ in range(100):
        bundle.zero_grad()
        m2t = [make_instruction("M2T", vocab, motion_slots={"input": rng.normal(size=4)}, answer="a person walks")]
        tc.backward(compose_losses(bundle, m2t, vocab, rng).total)
        assert all(p.grad is None or not np.any(p.grad) for p in bundle.diffusion.parameters())

        seqs = [make_instruction("T2M", vocab, caption="a person jumps", motion_slots={"target": rng.normal(size=4)},
                                 holders=2, phrasing=int(rng.integers(5))),
                make_instruction("PREDICT", vocab, motion_slots={"input": rng.normal(size=4),
                                                                 "target": rng.normal(size=4)}, holders=2)]
        terms = compose_losses(bundle, seqs, vocab, rng, retain_logits=True)
        tc.backward(terms.total)
        layout = terms.output.layout
        b_idx, pos = layout.position(layout.text_rows)
        for row, (b, p) in enumerate(zip(b_idx, pos)):
            if p + 1 < len(seqs[b]) and seqs[b].token_ids[p + 1] in gated:
                assert not np.any(terms.output.text_logits.grad[row])


# Desk-scale training

@pytest.mark.slow
def test_diffusion_recovers_fixed_class_latents(float64, diffusion_config):
    diffusion_config.timesteps = 1000
    diffusion_config.sample_steps = 100
    diffusion_config.hidden = 64
    diffusion_config.blocks = 2
    head = DiffusionHead(diffusion_config)
    rng = np.random.default_rng(0)
    latents = rng.normal(size=(10, 4))
    states = rng.normal(size=(10, 2, 8))
    optimizer = AdamW([ParamGroup("diffusion", head.named_parameters(), 1e-3)], weight_decay=0.0)
    for step in range(2000):
        step_rng = np.random.default_rng([0, step])
        classes = step_rng.integers(10, size=64)
        loss = head.diffusion_loss(latents[classes], head.aggregate_condition(states[classes]), step_rng)
        tc.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
    sampled = head.ddpm_sample(states, omega=1.0, seed=1)
    assert np.all(np.linalg.norm(sampled - latents, axis=1) <= 0.1 * np.sqrt(4))


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Default desk configuration trained end to end once"""
    paths = DataPaths(str(tmp_path_factory.mktemp("desk")))
    paths.ensure()
    registry = RunRegistry(paths.registry)
    run_id = registry.start_run("acceptance", 0)
    generate_corpus(0, 1000, (0.8, 0.1, 0.1), paths.corpus)
    vae, _ = train_vae(VAEConfig(), paths, registry, run_id)
    checksums = {}
    for stage in (0, 1, 2):
        run_stage(default_stage_config(stage), paths, registry, run_id)
        bundle, _ = ModelBundle.from_checkpoint(paths.checkpoint(f"stage{stage}"))
        checksums[stage] = bundle.backbone.group_checksum("text.base")
    evaluator, _ = train_evaluator(EvaluatorConfig(), paths, registry, run_id)
    return paths, vae, evaluator, checksums


def _model_evaluator(desk_run, stage):
    paths, vae, evaluator, _ = desk_run
    bundle, _ = ModelBundle.from_checkpoint(paths.checkpoint(f"stage{stage}"))
    return ModelEvaluator(bundle, vae, evaluator, Vocabulary.load(paths.vocab), load_split(paths.split("val")),
                          load_normalizer(paths.norm_stats))


@pytest.mark.slow
def test_vae_reconstructs_val_clips(desk_run):
    paths, vae, _, _ = desk_run
    stats = load_normalizer(paths.norm_stats)
    assert vae_val_mse(vae, standardized_clips(load_split(paths.split("val")), stats)) < 0.05


@pytest.mark.slow
def test_frozen_text_branch_is_byte_identical(desk_run):
    checksums = desk_run[3]
    assert checksums[1] == checksums[0]
    assert checksums[2] == checksums[0]


@pytest.mark.slow
def test_evaluator_retrieves_ground_truth(desk_run):
    metrics = _model_evaluator(desk_run, 2).t2m_metrics(steps=100, omega=5.0)
    assert np.mean(metrics["real_r_precision_top1"]) >= 0.6


@pytest.mark.slow
def test_stage_two_generates_and_captions(desk_run):
    model_eval = _model_evaluator(desk_run, 2)
    t2m = model_eval.t2m_metrics(steps=100, omega=5.0)
    assert np.mean(t2m["r_precision_top1"]) >= 0.6
    assert np.mean(t2m["class_accuracy"]) >= 0.8
    m2t = {row["metric"]: row["value"] for row in model_eval.m2t_metrics()}
    assert m2t["class_word_accuracy"] >= 0.8
    assert m2t["bleu1"] >= 0.5


@pytest.mark.slow
def test_stage_two_keeps_stage_one_retrieval(desk_run):
    before = np.mean(_model_evaluator(desk_run, 1).t2m_metrics(steps=100, omega=5.0)["r_precision_top1"])
    after = np.mean(_model_evaluator(desk_run, 2).t2m_metrics(steps=100, omega=5.0)["r_precision_top1"])
    assert after >= 0.8 * before


@pytest.mark.slow
def test_moderate_guidance_gives_the_best_fid(desk_run):
    sweep = _model_evaluator(desk_run, 2).cfg_sweep([1.0, 3.0, 5.0, 10.0], steps=100).set_index("omega")["fid"]
    assert min(sweep[3.0], sweep[5.0]) <= min(sweep[1.0], sweep[10.0])
