import os

import numpy as np
import pytest

import tensor_core as tc
from config import BackboneConfig, DataPaths, DiffusionConfig, EvaluatorConfig, VAEConfig
from database import REGISTRY_URL_ENV, RunRegistry
from synth_corpus import CLASS_NAMES, Vocabulary, generate_corpus, instruction_texts, render_caption


@pytest.fixture(autouse=True)
def reset_engine():
    yield
    tc.set_precision("float32")
    tc.current_tape().clear()


@pytest.fixture
def float64():
    tc.set_precision("float64")
    yield
    tc.set_precision("float32")


@pytest.fixture(scope="session")
def vocab():
    params = [{"speed": s, "amplitude": a, "direction": d}
              for s in (0.5, 1.2, 2.0) for a in (0.4, 1.0) for d in (0.0, 90.0, 180.0, 270.0)]
    captions = [render_caption(c, p, i) for c in CLASS_NAMES for p in params for i in range(3)]
    return Vocabulary.build(captions, instruction_texts())


@pytest.fixture
def backbone_config(vocab):
    return BackboneConfig(vocab_size=vocab.size, layers=2, model_dim=16, heads=2, ffn_dim=32, context=64,
                          holders=2, latent_dim=4, cond_dim=8, special_rows=4, seed=3)


@pytest.fixture
def diffusion_config():
    return DiffusionConfig(latent_dim=4, cond_dim=8, holders=2, hidden=16, blocks=1, time_dim=8,
                           aggregator_heads=2, timesteps=50, sample_steps=10, cfg_omega=3.0, seed=3)


@pytest.fixture
def vae_config():
    return VAEConfig(latent_dim=4, model_dim=16, layers=2, heads=2, ffn_dim=32, min_frames=8, max_frames=16,
                     batch_size=8, steps=2, eval_every=1)


@pytest.fixture
def evaluator_config():
    return EvaluatorConfig(embed_dim=8, model_dim=16, layers=1, heads=2, steps=2, batch_size=8,
                           repetitions=2, mm_repeats=2, div_subset=4)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(0, 100, (0.8, 0.1, 0.1), str(out), min_frames=8, max_frames=16)
    return str(out)


@pytest.fixture
def data_paths(tmp_path, corpus_dir, monkeypatch):
    """Data root holding a copy of the small corpus"""
    root = tmp_path / "data"
    monkeypatch.setenv("BIMOT_DATA_DIR", str(root))
    paths = DataPaths(str(root))
    paths.ensure()
    for name in os.listdir(corpus_dir):
        with open(os.path.join(corpus_dir, name), "rb") as src, open(os.path.join(paths.corpus, name), "wb") as dst:
            dst.write(src.read())
    return paths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def registry(data_paths, monkeypatch):
    monkeypatch.delenv(REGISTRY_URL_ENV, raising=False)
    return RunRegistry(data_paths.registry)
