"""bimot command line: corpus generation, training stages, sampling and evaluation"""
import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

import tensor_core as tc
from config import (BackboneConfig, CorpusConfig, DataPaths, DiffusionConfig, EvaluatorConfig, VAEConfig,
                    StageConfig, default_stage_config)
from data_processor import (clip_record, destandardize, get_corpus_stats, load_normalizer, load_split,
                            read_clip_file, standardize, standardized_clips, write_clip_file)
from database import RunRegistry
from errors import BimotError, ConfigError
from eval_suite import caption_motion, run_evaluation, train_evaluator
from motion_vae import MotionVAE, reconstruction_metrics
from synth_corpus import FPS, Vocabulary, generate_corpus, make_instruction
from trainer import load_trained_bundle, run_stage, train_vae
import visualization

logger = logging.getLogger("bimot")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _load_config(cls, path, default=None):
    if path:
        return cls.load(path)
    return default if default is not None else cls()


def _seeded(config, seed):
    if seed is not None:
        config.seed = seed
    return config


def _require_vae(paths, registry):
    return MotionVAE.from_checkpoint(registry.require_checkpoint("vae", paths.checkpoint("vae"),
                                                                 hint="run `bimot train-vae` first"))


# Commands

def cmd_gen_data(args, paths, registry):
    config = _seeded(_load_config(CorpusConfig, args.config), args.seed)
    if args.n is not None:
        config.n = args.n
        config.validate()
    written = generate_corpus(config.seed, config.n, config.split_ratios, paths.corpus,
                              config.min_frames, config.max_frames, config.jitter)
    stats = get_corpus_stats(load_split(written["train"]))
    print(f"Corpus: {config.n} records written to {paths.corpus}")
    print(f"  train split: {stats['records']} records, frames {stats['min_frames']}-{stats['max_frames']}")
    return 0


def cmd_train_vae(args, paths, registry):
    config = _seeded(_load_config(VAEConfig, args.config), args.seed)
    if args.steps:
        config.steps = args.steps
    _, best = train_vae(config, paths, registry, args.run_id)
    print(f"VAE trained: best val MSE {best:.4f} -> {paths.checkpoint('vae')}")
    return 0


def cmd_train(args, paths, registry):
    config = _seeded(_load_config(StageConfig, args.config, default_stage_config(args.stage)), args.seed)
    if config.stage != args.stage:
        raise ConfigError(f"{args.config} describes stage {config.stage}, not stage {args.stage}")
    if args.steps:
        config.max_steps = args.steps
    backbone_config = _load_config(BackboneConfig, args.backbone_config) if args.backbone_config else None
    diffusion_config = _load_config(DiffusionConfig, args.diffusion_config) if args.diffusion_config else None
    result = run_stage(config, paths, registry, args.run_id, args.resume, backbone_config, diffusion_config)
    print(f"Stage {result.stage} trained for {result.steps} steps: best val loss {result.best_val:.4f} "
          f"-> {result.checkpoint}")
    return 0


def cmd_train_evaluator(args, paths, registry):
    config = _seeded(_load_config(EvaluatorConfig, args.config), args.seed)
    if args.steps:
        config.steps = args.steps
    _, margin = train_evaluator(config, paths, registry, args.run_id, shuffle_pairs=args.shuffle_pairs)
    print(f"Evaluator trained: val separation margin {margin:.3f}")
    return 0


def _sample_prompt(bundle, vocab, caption, seed):
    """Let the model predict the <som> boundary; force it when generation ends without one"""
    prompt = make_instruction("T2M", vocab, caption=caption, holders=bundle.backbone.config.holders,
                              with_answer=False)
    seq = bundle.backbone.generate_text(prompt, vocab, "greedy", max_len=8, seed=seed)
    if seq.token_ids[-1] != vocab.som_id:
        logger.warning("Model did not open a motion block; forcing <som>")
        seq = prompt.copy()
        seq.append(vocab.som_id)
    return seq


def cmd_sample(args, paths, registry):
    bundle, _ = load_trained_bundle(paths, registry)
    vae = _require_vae(paths, registry)
    vocab = Vocabulary.load(paths.vocab)
    stats = load_normalizer(paths.norm_stats)
    seq = _sample_prompt(bundle, vocab, args.caption, args.seed or 0)
    z0, _ = bundle.backbone.generate_motion(seq, vocab, bundle.diffusion, steps=args.steps,
                                            omega=args.cfg_omega, seed=args.seed or 0)
    clip = vae.decode_latents(vae.denormalize_latent(np.atleast_2d(z0)), [args.frames])[0]
    values = destandardize(clip, stats)
    write_clip_file([clip_record(values, FPS, "sample", args.caption)], args.out)
    print(f"Sampled {args.frames} frames for '{args.caption}' -> {args.out}")
    return 0


def _input_latents(vae, df, stats):
    clips = [standardize(m, stats) for m in df["motion"]]
    return vae.normalize_latent(vae.encode_mean(clips))


def cmd_caption(args, paths, registry):
    bundle, _ = load_trained_bundle(paths, registry)
    vae = _require_vae(paths, registry)
    vocab = Vocabulary.load(paths.vocab)
    df = read_clip_file(args.clip_file)
    latents = _input_latents(vae, df, load_normalizer(paths.norm_stats))
    for record_id, latent in zip(df["id"], latents):
        print(f"{record_id}: {caption_motion(bundle, vocab, latent)}")
    return 0


def cmd_predict(args, paths, registry):
    bundle, _ = load_trained_bundle(paths, registry)
    vae = _require_vae(paths, registry)
    vocab = Vocabulary.load(paths.vocab)
    stats = load_normalizer(paths.norm_stats)
    df = read_clip_file(args.clip_file)
    latents = _input_latents(vae, df, stats)
    records = []
    for i, (record_id, latent) in enumerate(zip(df["id"], latents)):
        prompt = make_instruction("PREDICT", vocab, motion_slots={"input": latent}, with_answer=False)
        prompt.append(vocab.som_id)
        z0, _ = bundle.backbone.generate_motion(prompt, vocab, bundle.diffusion, steps=args.steps,
                                                omega=args.cfg_omega, seed=[args.seed or 0, i])
        frames = args.frames or min(vae.config.max_frames, 2 * int(df["frames"].iloc[i]))
        clip = vae.decode_latents(vae.denormalize_latent(np.atleast_2d(z0)), [frames])[0]
        records.append(clip_record(destandardize(clip, stats), FPS, f"{record_id}_continued"))
    write_clip_file(records, args.out)
    print(f"Predicted {len(records)} continuation(s) -> {args.out}")
    return 0


def cmd_eval(args, paths, registry):
    omegas = [float(w) for w in args.omega_sweep.split(",")] if args.omega_sweep else None
    written = run_evaluation(paths, registry, args.split, args.steps, args.cfg_omega, args.seed or 0,
                             omegas, args.repetitions)
    report = written["report"]
    for row in pd.read_csv(report).itertuples():
        print(f"{row.metric:>24s}  {row.value:.4f} +/- {row.ci95:.4f}  (n={row.n_rep})")
    if "sweep" in written:
        sweep = pd.read_csv(written["sweep"])
        visualization.write_svg(visualization.plot_cfg_sweep(sweep), os.path.splitext(written["sweep"])[0] + ".svg")
        print(f"Guidance sweep -> {written['sweep']}")
    return 0


def cmd_vae_report(args, paths, registry):
    vae = _require_vae(paths, registry)
    stats = load_normalizer(paths.norm_stats)
    report = reconstruction_metrics(vae, standardized_clips(load_split(paths.split(args.split)), stats), stats)
    out = paths.metrics_csv(f"vae_report_{args.split}")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    report.to_csv(out, index=False)
    visualization.write_svg(visualization.plot_joint_errors(report), os.path.splitext(out)[0] + ".svg")
    print(f"VAE {args.split} reconstruction MSE {report['mse'].mean():.4f} over {len(report)} clips -> {out}")
    return 0


def cmd_plot(args, paths, registry):
    out = visualization.plot_metrics_file(args.metrics_csv, args.out)
    print(f"Chart written to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "train": cmd_train,
    "train-evaluator": cmd_train_evaluator,
    "sample": cmd_sample,
    "caption": cmd_caption,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "vae-report": cmd_vae_report,
    "plot": cmd_plot,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (default: the seed in the config, 0)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity (default: %(default)s)")
    common.add_argument("--precision", default="float32", choices=["float32", "float64"],
                        help="numeric precision of model arithmetic (default: %(default)s)")

    parser = argparse.ArgumentParser(
        prog="bimot",
        description="Desk-scale bimodal motion-language model. "
                    "The data root defaults to ./data; set BIMOT_DATA_DIR to move it.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text,
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = add("gen-data", "generate the synthetic motion-caption corpus")
    p.add_argument("--config", help="CorpusConfig JSON file")
    p.add_argument("--n", type=int, default=None, help="number of records (default: 1000)")

    p = add("train-vae", "train the motion VAE")
    p.add_argument("--config", help="VAEConfig JSON file")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")

    p = add("train", "train one stage of the motion-language model")
    p.add_argument("--stage", type=int, required=True, choices=[0, 1, 2, 3])
    p.add_argument("--resume", action="store_true", help="continue from the stage's last snapshot")
    p.add_argument("--config", help="StageConfig JSON file")
    p.add_argument("--backbone-config", help="BackboneConfig JSON file (fresh models only)")
    p.add_argument("--diffusion-config", help="DiffusionConfig JSON file (fresh models only)")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")

    p = add("train-evaluator", "train the contrastive text-motion evaluator")
    p.add_argument("--config", help="EvaluatorConfig JSON file")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.add_argument("--shuffle-pairs", action="store_true", help="negative control on mismatched pairs")

    p = add("sample", "generate a motion clip from a caption")
    p.add_argument("caption")
    p.add_argument("--steps", type=int, default=100, help="denoising steps")
    p.add_argument("--cfg-omega", type=float, default=5.0, help="classifier-free guidance scale")
    p.add_argument("--frames", type=int, default=48, help="clip length in frames")
    p.add_argument("--out", default="sample.jsonl", help="output clip file")

    for name, help_text in (("caption", "describe the clips in a clip file"),
                            ("predict", "continue the clips in a clip file")):
        p = add(name, help_text)
        p.add_argument("clip_file")
        if name == "predict":
            p.add_argument("--steps", type=int, default=100, help="denoising steps")
            p.add_argument("--cfg-omega", type=float, default=5.0, help="classifier-free guidance scale")
            p.add_argument("--frames", type=int, default=None, help="output length (default: twice the input)")
            p.add_argument("--out", default="predicted.jsonl", help="output clip file")

    p = add("eval", "compute the metric report on a corpus split")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--steps", type=int, default=100, help="denoising steps")
    p.add_argument("--cfg-omega", type=float, default=5.0, help="classifier-free guidance scale")
    p.add_argument("--repetitions", type=int, default=None, help="override the evaluator's repetition count")
    p.add_argument("--omega-sweep", default=None, help="comma-separated guidance scales, e.g. 1,3,5,10")

    p = add("vae-report", "per-clip reconstruction errors of the motion VAE")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])

    p = add("plot", "write an SVG chart of a metrics CSV")
    p.add_argument("metrics_csv")
    p.add_argument("--out", default=None, help="SVG path (default: next to the CSV)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr, force=True)
    tc.set_precision(args.precision)

    paths = DataPaths()
    paths.ensure()
    registry = RunRegistry(paths.registry)
    config_paths = {k: v for k, v in vars(args).items() if k.endswith("config") and v}
    args.run_id = registry.start_run(args.command, args.seed if args.seed is not None else 0,
                                     config_paths, paths.root, paths.runs)
    try:
        code = COMMANDS[args.command](args, paths, registry)
    except BimotError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        registry.finish_run(args.run_id, "failed")
        return e.exit_code
    except Exception:
        registry.finish_run(args.run_id, "failed")
        raise
    registry.finish_run(args.run_id)
    return code


if __name__ == "__main__":
    sys.exit(main())
