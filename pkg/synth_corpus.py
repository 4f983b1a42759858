"""Deterministic paired (caption, motion) corpus, word-level vocabulary and
instruction templates for the four training tasks.

A clip is 5 joints x 3 coordinates per frame (root, left hand, right hand,
left foot, right foot), y axis up, sampled at 20 fps.
"""
import json
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import train_test_split

from data_processor import write_jsonl
from errors import ConfigError, ContractError, TemplateError, UnknownClassError

logger = logging.getLogger(__name__)

FPS = 20
JOINTS = ("root", "left_hand", "right_hand", "left_foot", "right_foot")
MOTION_DIMS = 3 * len(JOINTS)
JITTER_SIGMA = 0.01
ROOT_HEIGHT = 0.9

# Limb offsets from the root at rest: left hand, right hand, left foot, right foot
REST_OFFSETS = np.array([
    [-0.25, 0.1, 0.0],
    [0.25, 0.1, 0.0],
    [-0.1, -0.9, 0.0],
    [0.1, -0.9, 0.0],
])

PARAM_RANGES = {
    "speed": (0.0, 3.0),
    "amplitude": (0.0, 1.5),
    "direction": (0.0, 360.0),
    "duration": (0.4, 3.2),
}

MOTION_CLASSES = {
    "walk": {
        "word": "walk",
        "templates": [
            "a person walks {direction} {adverb}",
            "someone is walking {adverb} {direction}",
            "a figure walks {adverb} heading {direction}",
        ],
    },
    "run": {
        "word": "run",
        "templates": [
            "a person runs {direction} {adverb}",
            "someone is running {adverb} {direction}",
            "a figure runs {adverb} heading {direction}",
        ],
    },
    "jump": {
        "word": "jump",
        "templates": [
            "a person does a {size} jump {direction}",
            "someone jumps {direction} with a {size} leap",
            "a figure performs a {size} jump {direction}",
        ],
    },
    "circle": {
        "word": "circle",
        "templates": [
            "a person moves in a {size} circle {rotation}",
            "someone traces a {size} circle {adverb}",
            "a figure goes around a {size} circle {rotation}",
        ],
    },
    "wave": {
        "word": "wave",
        "templates": [
            "a person waves {adverb} with the right hand",
            "someone gives a {size} wave",
            "a figure waves the right hand {adverb}",
        ],
    },
    "squat": {
        "word": "squat",
        "templates": [
            "a person does a {size} squat",
            "someone squats down {adverb}",
            "a figure performs a {size} squat {adverb}",
        ],
    },
    "kick": {
        "word": "kick",
        "templates": [
            "a person does a {size} kick",
            "someone kicks {adverb} with the right leg",
            "a figure performs a {size} kick {adverb}",
        ],
    },
    "turn": {
        "word": "turn",
        "templates": [
            "a person turns to the {side}",
            "someone is turning {side} {adverb}",
            "a figure makes a {size} turn to the {side}",
        ],
    },
    "sidestep": {
        "word": "sidestep",
        "templates": [
            "a person sidesteps to the {side} {adverb}",
            "someone takes a sidestep to the {side}",
            "a figure sidesteps {adverb} to the {side}",
        ],
    },
    "spin": {
        "word": "spin",
        "templates": [
            "a person spins around {adverb}",
            "someone does a {size} spin {rotation}",
            "a figure spins {rotation} {adverb}",
        ],
    },
}

CLASS_NAMES = tuple(sorted(MOTION_CLASSES))


@dataclass
class MotionClip:
    """frames x dims motion values at a fixed frame rate"""
    values: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError(f"motion values must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("motion values must be finite")

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1]

    def joints(self):
        return self.values.reshape(self.frames, len(JOINTS), 3)


@dataclass
class CorpusRecord:
    id: str
    caption: str
    clip: MotionClip
    class_label: str
    params: dict

    def to_json_dict(self):
        return {
            "id": self.id,
            "caption": self.caption,
            "class": self.class_label,
            "params": self.params,
            "fps": self.clip.fps,
            "motion": self.clip.values.tolist(),
        }


# Kinematics

def _heading_vector(direction_deg):
    theta = np.deg2rad(direction_deg)
    return np.array([np.sin(theta), 0.0, np.cos(theta)])


def _rotate_y(offsets, angles):
    """Rotate per-frame limb offsets [L, J, 3] about the vertical axis by angles [L]"""
    cos, sin = np.cos(angles)[:, None], np.sin(angles)[:, None]
    x, y, z = offsets[..., 0], offsets[..., 1], offsets[..., 2]
    return np.stack([x * cos + z * sin, y, -x * sin + z * cos], axis=-1)


def _rest(frames):
    return np.repeat(REST_OFFSETS[None], frames, axis=0).copy()


def _gait(t, params, freq, swing, bob):
    heading = _heading_vector(params["direction"])
    root = np.zeros((len(t), 3))
    root += params["speed"] * t[:, None] * heading[None, :]
    root[:, 1] = ROOT_HEIGHT + bob * params["speed"] * np.abs(np.sin(2 * np.pi * freq * t))
    phase = np.sin(2 * np.pi * freq * t)[:, None]
    offsets = _rest(len(t))
    amp = params["amplitude"]
    offsets[:, 2] += (swing * amp * phase) * heading[None, :]
    offsets[:, 3] -= (swing * amp * phase) * heading[None, :]
    offsets[:, 0] -= (0.6 * swing * amp * phase) * heading[None, :]
    offsets[:, 1] += (0.6 * swing * amp * phase) * heading[None, :]
    return root, offsets


def _walk(t, s, params):
    return _gait(t, params, freq=1.8, swing=0.3, bob=0.02)


def _run(t, s, params):
    root, offsets = _gait(t, params, freq=2.8, swing=0.45, bob=0.05)
    offsets[:, :2, 1] += 0.15
    return root, offsets


def jump_height(frames, apex):
    """Parabolic take-off/landing profile peaking at ``apex`` on frame (L - 1) // 2"""
    peak = max((frames - 1) // 2, 1)
    i = np.arange(frames)
    return np.clip(apex * (1.0 - ((i - peak) / peak) ** 2), 0.0, None)


def _jump(t, s, params):
    heading = _heading_vector(params["direction"])
    height = jump_height(len(t), params["amplitude"])
    root = 0.3 * params["speed"] * t[:, None] * heading[None, :]
    root[:, 1] = ROOT_HEIGHT + height
    offsets = _rest(len(t))
    lift = height / max(params["amplitude"], 1e-9)
    offsets[:, :2, 1] += 0.5 * lift[:, None]
    offsets[:, 2:, 1] += 0.2 * lift[:, None]
    return root, offsets


def _circle(t, s, params):
    radius = max(params["amplitude"], 0.2)
    sign = 1.0 if params["direction"] < 180 else -1.0
    phi = sign * params["speed"] / radius * t
    root = np.stack([sign * radius * (1.0 - np.cos(phi)), np.full_like(t, ROOT_HEIGHT), radius * np.sin(sign * phi)], axis=1)
    offsets = _rest(len(t))
    swing = 0.25 * np.sin(2 * np.pi * 1.8 * t)
    offsets[:, 2, 2] += swing
    offsets[:, 3, 2] -= swing
    return root, _rotate_y(offsets, phi)


def _wave(t, s, params):
    root = np.zeros((len(t), 3))
    root[:, 1] = ROOT_HEIGHT
    offsets = _rest(len(t))
    freq = 1.0 + params["speed"]
    offsets[:, 1] = [0.3, 0.7, 0.1]
    offsets[:, 1, 0] += 0.25 * params["amplitude"] * np.sin(2 * np.pi * freq * t)
    return root, offsets


def _squat(t, s, params):
    freq = 0.5 + 0.5 * params["speed"]
    drop = 0.4 * params["amplitude"] * 0.5 * (1.0 - np.cos(2 * np.pi * freq * t))
    root = np.zeros((len(t), 3))
    root[:, 1] = ROOT_HEIGHT - drop
    offsets = _rest(len(t))
    offsets[:, 2:, 1] += drop[:, None]
    offsets[:, :2, 2] += 0.8 * drop[:, None]
    return root, offsets


def _kick(t, s, params):
    width = 0.5 / (1.0 + params["speed"])
    u = np.clip((s - 0.5) / width, -1.0, 1.0)
    pulse = np.cos(0.5 * np.pi * u) ** 2
    root = np.zeros((len(t), 3))
    root[:, 1] = ROOT_HEIGHT
    offsets = _rest(len(t))
    offsets[:, 3, 2] += 0.6 * params["amplitude"] * pulse
    offsets[:, 3, 1] += 0.4 * params["amplitude"] * pulse
    offsets[:, 0, 2] -= 0.1 * pulse
    return root, offsets


def _turn(t, s, params):
    sign = 1.0 if params["direction"] < 180 else -1.0
    angle = sign * 0.5 * np.pi * (0.5 + params["amplitude"])
    ease = np.clip(s * (0.5 + 0.5 * params["speed"]), 0.0, 1.0)
    root = np.zeros((len(t), 3))
    root[:, 1] = ROOT_HEIGHT
    return root, _rotate_y(_rest(len(t)), angle * ease)


def _sidestep(t, s, params):
    sign = 1.0 if params["direction"] < 180 else -1.0
    lateral = np.array([sign, 0.0, 0.0])
    root = params["speed"] * 0.5 * t[:, None] * lateral[None, :]
    root[:, 1] = ROOT_HEIGHT
    offsets = _rest(len(t))
    step = 0.2 * params["amplitude"] * np.abs(np.sin(2 * np.pi * 1.5 * t))
    offsets[:, 2, 0] -= step
    offsets[:, 3, 0] += step
    return root, offsets


def _spin(t, s, params):
    sign = 1.0 if params["direction"] < 180 else -1.0
    phi = sign * 2 * np.pi * (0.5 + 0.5 * params["speed"]) * t
    root = np.zeros((len(t), 3))
    root[:, 1] = ROOT_HEIGHT
    offsets = _rest(len(t))
    offsets[:, 0, 0] -= 0.4 * params["amplitude"]
    offsets[:, 1, 0] += 0.4 * params["amplitude"]
    offsets[:, :2, 1] += 0.3
    return root, _rotate_y(offsets, phi)


_KINEMATICS = {
    "walk": _walk, "run": _run, "jump": _jump, "circle": _circle, "wave": _wave,
    "squat": _squat, "kick": _kick, "turn": _turn, "sidestep": _sidestep, "spin": _spin,
}


def _check_class(class_label):
    if class_label not in MOTION_CLASSES:
        raise UnknownClassError(f"unknown motion class '{class_label}', expected one of {list(CLASS_NAMES)}")


def _check_params(params):
    for key, (low, high) in PARAM_RANGES.items():
        if key == "duration" and key not in params:
            continue
        value = params.get(key)
        if value is None or not low <= value <= high:
            raise ConfigError(f"param '{key}'={value} outside documented range [{low}, {high}]")


def generate_clip(class_label, params, frames, seed, jitter=JITTER_SIGMA, fps=FPS):
    """Analytic trajectory for one primitive plus seeded Gaussian jitter"""
    _check_class(class_label)
    _check_params(params)
    t = np.arange(frames) / fps
    s = np.arange(frames) / max(frames - 1, 1)
    root, offsets = _KINEMATICS[class_label](t, s, params)
    joints = np.concatenate([root[:, None, :], root[:, None, :] + offsets], axis=1)
    values = joints.reshape(frames, MOTION_DIMS)
    if jitter:
        values = values + np.random.default_rng(seed).normal(0.0, jitter, values.shape)
    return MotionClip(values, fps)


# Captions

def _slot_words(params):
    speed, amp, direction = params["speed"], params["amplitude"], params["direction"]
    quadrant = int(round(direction / 90.0)) % 4
    return {
        "adverb": "slowly" if speed < 0.9 else ("steadily" if speed < 1.5 else "quickly"),
        "size": "small" if amp < 0.75 else "big",
        "direction": ("forward", "left", "backward", "right")[quadrant],
        "side": "left" if direction < 180 else "right",
        "rotation": "clockwise" if direction < 180 else "counterclockwise",
    }


def render_caption(class_label, params, template_index=0):
    _check_class(class_label)
    templates = MOTION_CLASSES[class_label]["templates"]
    return templates[template_index % len(templates)].format(**_slot_words(params))


def paraphrase(class_label, params, caption, rng):
    """A rendering of the same primitive through a different template"""
    options = [render_caption(class_label, params, i) for i in range(len(MOTION_CLASSES[class_label]["templates"]))]
    others = [c for c in options if c != caption] or options
    return others[int(rng.integers(len(others)))]


def class_word(class_label):
    return MOTION_CLASSES[class_label]["word"]


def canonical_caption(class_label):
    return render_caption(class_label, {"speed": 1.0, "amplitude": 0.5, "direction": 0.0}, 0)


def sample_params(class_label, rng, frames):
    _check_class(class_label)
    return {
        "speed": round(float(rng.uniform(0.4, 2.0)), 4),
        "amplitude": round(float(rng.uniform(0.3, 1.2)), 4),
        "direction": float(rng.choice([0.0, 90.0, 180.0, 270.0])),
        "duration": round(frames / FPS, 4),
    }


def generate_record(index, class_label, seed, min_frames=16, max_frames=64, jitter=JITTER_SIGMA):
    """One corpus record; a pure function of (index, class_label, seed)"""
    rng = np.random.default_rng([seed, index])
    frames = int(rng.integers(min_frames, max_frames + 1))
    params = sample_params(class_label, rng, frames)
    template = int(rng.integers(len(MOTION_CLASSES[class_label]["templates"])))
    clip = generate_clip(class_label, params, frames, seed=seed * 1_000_003 + index, jitter=jitter)
    return CorpusRecord(
        id=f"m{index:05d}",
        caption=render_caption(class_label, params, template),
        clip=clip,
        class_label=class_label,
        params=params,
    )


def generate_corpus(seed, n, split_ratios, out_dir, min_frames=16, max_frames=64, jitter=JITTER_SIGMA):
    """Write train/val/test JSONL splits, the vocabulary and normalization stats.

    Returns the path of each artifact written.
    """
    if n < 10 * len(CLASS_NAMES):
        raise ConfigError(f"n={n} is below 10 records per class ({10 * len(CLASS_NAMES)})")
    labels = [CLASS_NAMES[i % len(CLASS_NAMES)] for i in range(n)]
    records = [generate_record(i, labels[i], seed, min_frames, max_frames, jitter) for i in range(n)]
    logger.info("Generated %d records over %d classes", n, len(CLASS_NAMES))

    # Stratified splits: train vs rest, then rest into val/test
    train_ratio, val_ratio, test_ratio = split_ratios
    indices = np.arange(n)
    train_idx, rest_idx = train_test_split(indices, test_size=val_ratio + test_ratio,
                                           random_state=seed, stratify=labels)
    rest_labels = [labels[i] for i in rest_idx]
    val_idx, test_idx = train_test_split(rest_idx, test_size=test_ratio / (val_ratio + test_ratio),
                                         random_state=seed, stratify=rest_labels)

    paths = {}
    for name, split_idx in (("train", train_idx), ("val", val_idx), ("test", test_idx)):
        path = os.path.join(out_dir, f"{name}.jsonl")
        write_jsonl([records[i].to_json_dict() for i in sorted(split_idx)], path)
        paths[name] = path

    train_records = [records[i] for i in sorted(train_idx)]
    vocab = Vocabulary.build([r.caption for r in train_records], instruction_texts())
    paths["vocab"] = os.path.join(out_dir, "vocab.json")
    vocab.save(paths["vocab"])

    # Imported here: data_processor depends on this module
    import data_processor
    stats = data_processor.fit_normalizer([r.clip.values for r in train_records])
    paths["norm_stats"] = os.path.join(out_dir, "norm_stats.json")
    data_processor.save_normalizer(stats, paths["norm_stats"])
    logger.info("Corpus written to %s (%d train / %d val / %d test, vocabulary %d)",
                out_dir, len(train_idx), len(val_idx), len(test_idx), vocab.size)
    return paths


# Vocabulary

UNK = "<unk>"
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<som>", "<eom>", "<mholder_in>", "<mholder_out>")
MOTION_TOKENS = ("<som>", "<eom>", "<mholder_in>", "<mholder_out>")
_TOKEN_RE = re.compile(r"<[a-z_]+>|[a-z0-9]+|[^\sa-z0-9]")


def split_words(text):
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary; special tokens occupy the highest ids, the four
    motion tokens last of all"""

    def __init__(self, word_to_id):
        self.word_to_id = dict(word_to_id)
        self.id_to_word = {i: w for w, i in self.word_to_id.items()}
        missing = [t for t in (UNK,) + SPECIAL_TOKENS if t not in self.word_to_id]
        if missing:
            raise ConfigError(f"vocabulary lacks special tokens {missing}")

    @classmethod
    def build(cls, captions, extra_texts=()):
        words = set()
        for text in list(captions) + list(extra_texts):
            words.update(w for w in split_words(text) if not w.startswith("<"))
        ordered = sorted(words) + [UNK] + list(SPECIAL_TOKENS)
        return cls({w: i for i, w in enumerate(ordered)})

    @property
    def size(self):
        return len(self.word_to_id)

    @property
    def motion_token_start(self):
        """First id of the rows added for motion: <som>, <eom>, <mholder_in>, <mholder_out>"""
        return self.size - len(MOTION_TOKENS)

    def id(self, token):
        return self.word_to_id.get(token, self.word_to_id[UNK])

    def __getattr__(self, name):
        # pad_id, bos_id, eos_id, som_id, eom_id, mholder_in_id, mholder_out_id, unk_id
        if name.endswith("_id"):
            token = f"<{name[:-3]}>"
            if token in self.__dict__.get("word_to_id", {}):
                return self.word_to_id[token]
        raise AttributeError(name)

    def tokenize(self, text):
        return [self.id(w) for w in split_words(text)]

    def detokenize(self, ids, skip_special=False):
        words = [self.id_to_word.get(int(i), UNK) for i in ids]
        if skip_special:
            words = [w for w in words if w not in SPECIAL_TOKENS]
        return " ".join(words)

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.word_to_id, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))


# Instructions

INSTRUCTION_PHRASINGS = {
    "T2M": [
        "generate motion : {caption}",
        "show me a motion where {caption}",
        "create a motion of this description : {caption}",
        "animate the following : {caption}",
        "please produce a motion : {caption}",
    ],
    "M2T": [
        "describe : {motion}",
        "describe this motion : {motion}",
        "what is happening in {motion}",
        "write a caption for {motion}",
        "explain the motion {motion}",
    ],
    "PREDICT": [
        "predict the motion : {motion}",
        "continue this motion : {motion}",
        "what comes next after {motion}",
        "complete the motion {motion}",
        "predict how {motion} continues",
    ],
    "PLAIN_TEXT": [
        "paraphrase : {caption} :",
        "say this differently : {caption} :",
        "rewrite the sentence {caption} :",
        "give another description of {caption} :",
        "rephrase : {caption} :",
    ],
}


def instruction_texts():
    return [p.replace("{caption}", " ").replace("{motion}", " ")
            for phrasings in INSTRUCTION_PHRASINGS.values() for p in phrasings]


@dataclass
class HybridSequence:
    """Ordered multimodal items. Item i has a token id, a routing flag
    (0 text, 1 motion) and a flag saying whether predicting it from item i-1
    is supervised; <mholder_in> items also carry a latent."""
    token_ids: list = field(default_factory=list)
    modality: list = field(default_factory=list)
    supervised: list = field(default_factory=list)
    latents: dict = field(default_factory=dict)
    task: str = "PLAIN_TEXT"
    target_latent: np.ndarray = None

    def __len__(self):
        return len(self.token_ids)

    def append(self, token_id, modality=0, supervised=False, latent=None):
        if latent is not None:
            self.latents[len(self.token_ids)] = np.asarray(latent)
        self.token_ids.append(int(token_id))
        self.modality.append(int(modality))
        self.supervised.append(bool(supervised))

    def extend_text(self, ids, supervised=False):
        for i in ids:
            self.append(i, 0, supervised)

    def copy(self):
        return HybridSequence(list(self.token_ids), list(self.modality), list(self.supervised),
                              dict(self.latents), self.task, self.target_latent)

    def positions(self, token_id):
        return [i for i, t in enumerate(self.token_ids) if t == token_id]

    def validate(self, vocab):
        """Routing contract: holders are motion-routed, <mholder_in> carries a latent"""
        for i, (tok, mod) in enumerate(zip(self.token_ids, self.modality)):
            is_holder = tok in (vocab.mholder_in_id, vocab.mholder_out_id)
            if mod not in (0, 1) or bool(mod) != is_holder:
                raise ContractError(f"position {i}: token {vocab.detokenize([tok])} routed with modality {mod}")
            if tok == vocab.mholder_in_id and i not in self.latents:
                raise ContractError(f"position {i}: <mholder_in> without a latent")
        return True


def _split_phrasing(phrasing, slot):
    if slot not in phrasing:
        raise TemplateError(f"phrasing '{phrasing}' has no {slot} slot")
    before, after = phrasing.split(slot, 1)
    return before, after


def append_motion_output(seq, vocab, holders, supervise_som=True):
    """<som>, H x <mholder_out>, <eom>; <som> supervised, the rest not"""
    seq.append(vocab.som_id, 0, supervise_som)
    for _ in range(holders):
        seq.append(vocab.mholder_out_id, 1, False)
    seq.append(vocab.eom_id, 0, False)


def make_instruction(task, vocab, caption=None, motion_slots=None, holders=4, phrasing=0,
                     answer=None, with_answer=True):
    """Build the HybridSequence for one task instance.

    motion_slots: {"input": latent for <mholder_in>, "target": diffusion target latent}.
    answer: caption (M2T) or paraphrase (PLAIN_TEXT) that follows the prompt.
    with_answer=False stops after the prompt, which is the inference form
    (T2M and PREDICT prompts then end just before <som>).
    """
    if task not in INSTRUCTION_PHRASINGS:
        raise TemplateError(f"unknown task '{task}'")
    motion_slots = motion_slots or {}
    template = INSTRUCTION_PHRASINGS[task][phrasing % len(INSTRUCTION_PHRASINGS[task])]
    seq = HybridSequence(task=task, target_latent=motion_slots.get("target"))
    seq.append(vocab.bos_id)

    if task in ("T2M", "PLAIN_TEXT"):
        if not caption:
            raise TemplateError(f"{task} needs a caption")
        before, after = _split_phrasing(template, "{caption}")
        seq.extend_text(vocab.tokenize(before) + vocab.tokenize(caption) + vocab.tokenize(after))
    else:
        if motion_slots.get("input") is None:
            raise TemplateError(f"{task} needs an input motion latent")
        before, after = _split_phrasing(template, "{motion}")
        seq.extend_text(vocab.tokenize(before))
        seq.append(vocab.som_id)
        seq.append(vocab.mholder_in_id, 1, False, latent=motion_slots["input"])
        seq.append(vocab.eom_id)
        seq.extend_text(vocab.tokenize(after))

    if not with_answer:
        return seq

    if task in ("T2M", "PREDICT"):
        # among motion outputs only the <som> target carries CE
        append_motion_output(seq, vocab, holders)
        seq.append(vocab.eos_id, 0, False)
    else:
        if not answer:
            raise TemplateError(f"{task} needs an answer text")
        seq.extend_text(vocab.tokenize(answer), supervised=True)
        seq.append(vocab.eos_id, 0, True)
    return seq
