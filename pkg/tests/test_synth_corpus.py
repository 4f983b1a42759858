import filecmp
import os

import numpy as np
import pandas as pd
import pytest

from data_processor import fit_normalizer, load_split, standardize
from errors import ConfigError, ContractError, TemplateError, UnknownClassError
from synth_corpus import (CLASS_NAMES, MOTION_CLASSES, ROOT_HEIGHT, SPECIAL_TOKENS, Vocabulary, class_word,
                          generate_clip, generate_corpus, generate_record, jump_height, make_instruction,
                          paraphrase, render_caption, split_words)

PARAMS = {"speed": 1.0, "amplitude": 0.8, "direction": 90.0}


def test_zero_speed_walk_keeps_root_in_place():
    clip = generate_clip("walk", {**PARAMS, "speed": 0.0}, 32, seed=0, jitter=0.0)
    root = clip.joints()[:, 0, :]
    assert np.allclose(root[:, [0, 2]], root[0, [0, 2]])


def test_jump_rises_by_apex():
    apex = 0.7
    clip = generate_clip("jump", {**PARAMS, "amplitude": apex}, 33, seed=0, jitter=0.0)
    height = clip.joints()[:, 0, 1]
    assert height.max() - height[0] == pytest.approx(apex, abs=1e-6)
    assert height[0] == pytest.approx(ROOT_HEIGHT)


def test_jump_height_peaks_mid_clip():
    profile = jump_height(21, 1.0)
    assert int(np.argmax(profile)) == 10
    assert profile[0] == 0.0


def test_clip_is_deterministic():
    a = generate_clip("circle", PARAMS, 24, seed=5)
    b = generate_clip("circle", PARAMS, 24, seed=5)
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (24, 15)


def test_unknown_class():
    with pytest.raises(UnknownClassError):
        generate_clip("moonwalk", PARAMS, 16, seed=0)


def test_params_out_of_range():
    with pytest.raises(ConfigError):
        generate_clip("walk", {**PARAMS, "speed": 9.0}, 16, seed=0)


def test_record_is_pure_function_of_inputs():
    a = generate_record(3, "spin", seed=11)
    b = generate_record(3, "spin", seed=11)
    assert a.to_json_dict() == b.to_json_dict()
    assert a.id == "m00003"


def test_every_template_renders_its_class_word():
    for label in CLASS_NAMES:
        for i in range(len(MOTION_CLASSES[label]["templates"])):
            words = split_words(render_caption(label, PARAMS, i))
            assert any(w.startswith(class_word(label)) for w in words)
    assert all(len(MOTION_CLASSES[c]["templates"]) >= 3 for c in CLASS_NAMES)


def test_paraphrase_uses_another_template(rng):
    caption = render_caption("kick", PARAMS, 0)
    assert paraphrase("kick", PARAMS, caption, rng) != caption


def test_corpus_splits_are_stratified_and_disjoint(corpus_dir):
    splits = {name: load_split(os.path.join(corpus_dir, f"{name}.jsonl")) for name in ("train", "val", "test")}
    assert sum(len(df) for df in splits.values()) == 100
    assert set(splits["train"]["id"]).isdisjoint(splits["val"]["id"])
    assert set(splits["val"]["id"]).isdisjoint(splits["test"]["id"])
    counts = pd.concat(splits.values())["class"].value_counts()
    assert (counts == 10).all()
    assert set(splits["val"]["class"]) == set(CLASS_NAMES)


def test_corpus_files_are_reproducible(tmp_path):
    for name in ("a", "b"):
        generate_corpus(4, 100, (0.8, 0.1, 0.1), str(tmp_path / name), min_frames=8, max_frames=12)
    for artifact in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.json", "norm_stats.json"):
        assert filecmp.cmp(tmp_path / "a" / artifact, tmp_path / "b" / artifact, shallow=False)


def test_corpus_needs_ten_records_per_class(tmp_path):
    with pytest.raises(ConfigError):
        generate_corpus(0, 50, (0.8, 0.1, 0.1), str(tmp_path))


def test_standardized_train_split_is_unit_scale(corpus_dir):
    train = load_split(os.path.join(corpus_dir, "train.jsonl"))
    stats = fit_normalizer(train["motion"])
    frames = np.concatenate([standardize(m, stats) for m in train["motion"]])
    assert np.abs(frames.mean(axis=0)).max() < 0.05
    assert np.all((frames.std(axis=0) > 0.9) & (frames.std(axis=0) < 1.1))


def test_vocabulary_tokenizes_known_and_unknown_words(vocab):
    ids = vocab.tokenize("a person walks forward")
    assert ids == [vocab.word_to_id[w] for w in ("a", "person", "walks", "forward")]
    assert vocab.detokenize(ids) == "a person walks forward"
    assert vocab.tokenize("a zebra") == [vocab.word_to_id["a"], vocab.unk_id]


def test_special_tokens_take_highest_ids_and_survive_save(vocab, tmp_path):
    special_ids = [vocab.word_to_id[t] for t in SPECIAL_TOKENS]
    assert special_ids == list(range(vocab.size - len(SPECIAL_TOKENS), vocab.size))
    assert vocab.motion_token_start == vocab.som_id
    path = tmp_path / "vocab.json"
    vocab.save(str(path))
    loaded = Vocabulary.load(str(path))
    assert [loaded.word_to_id[t] for t in SPECIAL_TOKENS] == special_ids


def test_detokenize_inverts_tokenize_on_captions(corpus_dir):
    vocab = Vocabulary.load(os.path.join(corpus_dir, "vocab.json"))
    train = load_split(os.path.join(corpus_dir, "train.jsonl"))
    for caption in train["caption"]:
        assert vocab.detokenize(vocab.tokenize(caption)) == caption


def test_t2m_instruction_layout(vocab):
    seq = make_instruction("T2M", vocab, caption="a person jumps", motion_slots={"target": np.zeros(4)}, holders=2)
    assert vocab.detokenize(seq.token_ids) == \
        "<bos> generate motion : a person jumps <som> <mholder_out> <mholder_out> <eom> <eos>"
    assert seq.modality == [0] * 7 + [0, 1, 1, 0, 0]
    assert seq.supervised[seq.token_ids.index(vocab.som_id)]
    assert not seq.supervised[seq.token_ids.index(vocab.eom_id)]
    assert not seq.supervised[-1]
    assert seq.validate(vocab)


def test_m2t_instruction_carries_input_latent(vocab):
    latent = np.arange(4.0)
    seq = make_instruction("M2T", vocab, motion_slots={"input": latent}, answer="a person walks forward")
    assert vocab.detokenize(seq.token_ids) == \
        "<bos> describe : <som> <mholder_in> <eom> a person walks forward <eos>"
    pos = seq.token_ids.index(vocab.mholder_in_id)
    assert np.array_equal(seq.latents[pos], latent)
    assert seq.supervised[-5:] == [True] * 5


def test_inference_prompt_stops_before_the_answer(vocab):
    seq = make_instruction("T2M", vocab, caption="a person jumps", with_answer=False)
    assert vocab.detokenize(seq.token_ids) == "<bos> generate motion : a person jumps"


@pytest.mark.parametrize("task, kwargs", [
    ("T2M", {}),
    ("M2T", {"answer": "a person walks"}),
    ("PREDICT", {}),
    ("PLAIN_TEXT", {"caption": "a person walks"}),
    ("DANCE", {"caption": "a person walks"}),
])
def test_missing_slots_raise_template_error(vocab, task, kwargs):
    with pytest.raises(TemplateError):
        make_instruction(task, vocab, **kwargs)


def test_five_phrasings_per_task(vocab):
    rendered = {vocab.detokenize(make_instruction("T2M", vocab, caption="a person jumps", phrasing=i,
                                                  with_answer=False).token_ids) for i in range(5)}
    assert len(rendered) == 5


def test_validate_rejects_text_routed_holder(vocab):
    seq = make_instruction("T2M", vocab, caption="a person jumps", holders=1)
    seq.modality[seq.token_ids.index(vocab.mholder_out_id)] = 0
    with pytest.raises(ContractError):
        seq.validate(vocab)


def test_written_motion_reads_back_exactly(corpus_dir):
    train = load_split(os.path.join(corpus_dir, "train.jsonl"))
    for _, row in train.head(5).iterrows():
        record = generate_record(int(row["id"][1:]), row["class"], 0, min_frames=8, max_frames=16)
        assert np.array_equal(row["motion"], record.clip.values)
