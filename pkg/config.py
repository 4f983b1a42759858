"""Configuration dataclasses, JSON config files and the data-root layout"""
import dataclasses
import json
import os
from dataclasses import dataclass, field

from errors import ConfigError

# Get the data root from the environment, like the connection string used to be
DATA_DIR_ENV = "BIMOT_DATA_DIR"
DEFAULT_DATA_DIR = "data"

TASKS = ("T2M", "M2T", "PREDICT", "PLAIN_TEXT")

# Parameter groups the trainer can freeze
PARAM_GROUPS = ("text.base", "text.special", "motion", "diffusion")


class JsonConfig:
    """Shared JSON round-trip for the config dataclasses"""

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
        try:
            config = cls(**values)
        except TypeError as e:
            raise ConfigError(f"{cls.__name__}: {e}") from e
        config.validate()
        return config

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def load(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                values = json.load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(values)

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def validate(self):
        pass


@dataclass
class CorpusConfig(JsonConfig):
    n: int = 1000
    seed: int = 0
    split_ratios: tuple = (0.8, 0.1, 0.1)
    min_frames: int = 16
    max_frames: int = 64
    fps: int = 20
    jitter: float = 0.01

    def validate(self):
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("split_ratios must be three fractions summing to 1")
        if not 8 <= self.min_frames <= self.max_frames <= 64:
            raise ConfigError("frame bounds must satisfy 8 <= min_frames <= max_frames <= 64")


@dataclass
class VAEConfig(JsonConfig):
    motion_dims: int = 15
    latent_dim: int = 16
    model_dim: int = 64
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 256
    min_frames: int = 8
    max_frames: int = 64
    lambda_kl: float = 1e-4
    kl_warmup_frac: float = 0.1
    recon_loss: str = "mse"
    lr: float = 2e-4
    batch_size: int = 32
    steps: int = 3000
    eval_every: int = 250
    seed: int = 0

    def validate(self):
        if self.recon_loss not in ("mse", "smooth_l1"):
            raise ConfigError(f"recon_loss must be 'mse' or 'smooth_l1', got {self.recon_loss!r}")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if not 1 <= self.latent_dim <= 256:
            raise ConfigError("latent_dim must lie in [1, 256]")


@dataclass
class BackboneConfig(JsonConfig):
    vocab_size: int = 0
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    motion_ffn_ratio: float = 1.0
    context: int = 256
    placement: list = None
    holders: int = 4
    latent_dim: int = 16
    cond_dim: int = 64
    special_rows: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.placement is None:
            self.placement = [True] * self.layers

    def validate(self):
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if len(self.placement) != self.layers:
            raise ConfigError(f"placement has {len(self.placement)} entries for {self.layers} layers")
        if self.motion_ffn_ratio not in (0.25, 0.5, 1.0):
            raise ConfigError("motion_ffn_ratio must be one of 0.25, 0.5, 1.0")
        if self.holders < 1:
            raise ConfigError("holders must be >= 1")

    @property
    def motion_ffn_dim(self):
        return max(1, int(round(self.ffn_dim * self.motion_ffn_ratio)))


@dataclass
class DiffusionConfig(JsonConfig):
    latent_dim: int = 16
    cond_dim: int = 64
    holders: int = 4
    hidden: int = 256
    blocks: int = 3
    time_dim: int = 64
    aggregator: str = "attention"
    aggregator_heads: int = 4
    null_init: str = "zeros"
    head: str = "diffusion"
    timesteps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    sample_steps: int = 100
    cfg_omega: float = 5.0
    p_drop: float = 0.1
    seed: int = 0

    def validate(self):
        if self.aggregator not in ("attention", "linear"):
            raise ConfigError(f"aggregator must be 'attention' or 'linear', got {self.aggregator!r}")
        if self.null_init not in ("zeros", "random"):
            raise ConfigError(f"null_init must be 'zeros' or 'random', got {self.null_init!r}")
        if self.head not in ("diffusion", "mse"):
            raise ConfigError(f"head must be 'diffusion' or 'mse', got {self.head!r}")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ConfigError("beta endpoints must satisfy 0 < beta_start < beta_end < 1")
        if not 1 <= self.sample_steps <= self.timesteps:
            raise ConfigError("sample_steps must lie in [1, timesteps]")
        if self.cfg_omega < 0:
            raise ConfigError("cfg_omega must be >= 0")
        if self.cond_dim % self.aggregator_heads:
            raise ConfigError("cond_dim must be divisible by aggregator_heads")


@dataclass
class EvaluatorConfig(JsonConfig):
    motion_dims: int = 15
    embed_dim: int = 32
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    temperature: float = 0.07
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    margin: float = 0.2
    eval_batch: int = 8
    repetitions: int = 5
    mm_repeats: int = 8
    div_subset: int = 32
    seed: int = 0


@dataclass
class StageConfig(JsonConfig):
    stage: int = 1
    mixture: dict = field(default_factory=lambda: {"T2M": 1.0})
    frozen_groups: list = field(default_factory=lambda: ["text.base"])
    lr_backbone: float = 2e-4
    lr_diffusion: float = 1e-4
    batch_size: int = 32
    max_steps: int = 2000
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    lambda_diff: float = 1.0
    predict_prefix: float = 0.5
    varied_instructions: bool = False
    eval_every: int = 250
    log_every: int = 50
    val_batches: int = 4
    seed: int = 0

    def validate(self):
        unknown = set(self.mixture) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown tasks in mixture: {sorted(unknown)}")
        bad_groups = set(self.frozen_groups) - set(PARAM_GROUPS)
        if bad_groups:
            raise ConfigError(f"unknown parameter groups: {sorted(bad_groups)}")
        if sum(self.mixture.values()) <= 0:
            raise ConfigError("task mixture weights must sum to a positive value")
        active = {task for task, w in self.mixture.items() if w > 0}
        if self.stage == 1 and active != {"T2M"}:
            raise ConfigError("stage 1 trains text-to-motion only")
        if self.stage in (1, 2) and "text.base" not in self.frozen_groups:
            raise ConfigError(f"stage {self.stage} keeps the text branch frozen")
        if self.stage == 2 and not {"T2M", "M2T", "PREDICT"} <= active:
            raise ConfigError("stage 2 mixes T2M, M2T and PREDICT")
        if self.stage == 3 and self.frozen_groups:
            raise ConfigError("stage 3 fine-tunes every parameter group")
        if self.stage not in (0, 1, 2, 3):
            raise ConfigError(f"stage must be 0..3, got {self.stage}")


def default_stage_config(stage):
    """Desk-scale defaults for stages 0 (text pretraining) through 3"""
    if stage == 0:
        return StageConfig(stage=0, mixture={"PLAIN_TEXT": 1.0},
                           frozen_groups=["text.special", "motion", "diffusion"],
                           lr_backbone=1e-3, max_steps=1500)
    if stage == 1:
        return StageConfig(stage=1, mixture={"T2M": 1.0}, frozen_groups=["text.base"], max_steps=2000)
    if stage == 2:
        return StageConfig(stage=2, mixture={"T2M": 0.4, "M2T": 0.4, "PREDICT": 0.2},
                           frozen_groups=["text.base"], max_steps=4000)
    if stage == 3:
        return StageConfig(stage=3, mixture={"T2M": 0.3, "M2T": 0.3, "PREDICT": 0.2, "PLAIN_TEXT": 0.2},
                           frozen_groups=[], max_steps=1000, varied_instructions=True)
    raise ConfigError(f"stage must be 0..3, got {stage}")


class DataPaths:
    """File layout under the data root"""

    def __init__(self, root=None):
        self.root = root or os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR)
        self.corpus = os.path.join(self.root, "corpus")
        self.checkpoints = os.path.join(self.root, "checkpoints")
        self.metrics = os.path.join(self.root, "metrics")
        self.runs = os.path.join(self.root, "runs")
        self.registry = os.path.join(self.root, "registry.db")

    def split(self, name):
        return os.path.join(self.corpus, f"{name}.jsonl")

    @property
    def vocab(self):
        return os.path.join(self.corpus, "vocab.json")

    @property
    def norm_stats(self):
        return os.path.join(self.corpus, "norm_stats.json")

    def checkpoint(self, kind):
        return os.path.join(self.checkpoints, f"{kind}.bmt")

    def optimizer_state(self, kind):
        return os.path.join(self.checkpoints, f"{kind}.optim.bmt")

    def metrics_csv(self, kind):
        return os.path.join(self.metrics, f"{kind}.csv")

    def ensure(self):
        for path in (self.corpus, self.checkpoints, self.metrics, self.runs):
            os.makedirs(path, exist_ok=True)
