import os

import numpy as np
import pandas as pd
import pytest

from data_processor import (clip_record, destandardize, fit_normalizer, get_corpus_stats, group_by_length,
                            load_normalizer, load_split, pad_clips, prefix_clip, process_corpus_data,
                            read_clip_file, save_normalizer, standardize, summarize, write_clip_file)
from errors import DataError, EvaluationError


def test_load_split_adds_frame_counts(corpus_dir):
    df = load_split(os.path.join(corpus_dir, "train.jsonl"))
    assert all(isinstance(m, np.ndarray) and m.shape[1] == 15 for m in df["motion"])
    assert (df["frames"] == [m.shape[0] for m in df["motion"]]).all()
    assert df["frames"].between(8, 16).all()


def test_missing_split(tmp_path):
    with pytest.raises(DataError):
        load_split(str(tmp_path / "nope.jsonl"))


def test_malformed_motion_rejected():
    df = pd.DataFrame({"id": ["a", "b"], "motion": [[[0.0, 1.0]], [0.0, 1.0]]})
    with pytest.raises(DataError):
        process_corpus_data(df)


def test_non_finite_motion_rejected():
    df = pd.DataFrame({"id": ["a"], "motion": [[[0.0, float("nan")]]]})
    with pytest.raises(DataError):
        process_corpus_data(df)


def test_records_need_an_id_column():
    with pytest.raises(DataError):
        process_corpus_data(pd.DataFrame({"motion": [[[0.0]]]}))


def test_corpus_stats(corpus_dir):
    df = load_split(os.path.join(corpus_dir, "val.jsonl"))
    stats = get_corpus_stats(df)
    assert stats["records"] == 10
    assert set(stats["classes"].values()) == {1}
    assert 8 <= stats["min_frames"] <= stats["max_frames"] <= 16
    assert get_corpus_stats(None)["records"] == 0


def test_normalizer_file(tmp_path, rng):
    clips = [rng.normal(2.0, 3.0, size=(n, 4)) for n in (5, 9)]
    stats = fit_normalizer(clips)
    assert stats["frames"] == 14
    path = str(tmp_path / "norm_stats.json")
    save_normalizer(stats, path)
    loaded = load_normalizer(path)
    assert np.allclose(destandardize(standardize(clips[0], loaded), loaded), clips[0])


def test_missing_normalizer(tmp_path):
    with pytest.raises(DataError):
        load_normalizer(str(tmp_path / "norm_stats.json"))


def test_pad_clips_masks_padding():
    clips = [np.ones((3, 2)), np.full((5, 2), 2.0)]
    padded, valid = pad_clips(clips)
    assert padded.shape == (2, 5, 2)
    assert valid.sum(axis=1).tolist() == [3, 5]
    assert np.all(padded[0, 3:] == 0.0)
    with pytest.raises(DataError):
        pad_clips([])


def test_prefix_clip():
    clip = np.arange(40.0).reshape(20, 2)
    assert prefix_clip(clip, 0.5).shape == (10, 2)
    assert prefix_clip(clip, 0.1).shape == (8, 2)
    assert prefix_clip(clip[:5], 0.5).shape == (5, 2)


def test_group_by_length():
    assert group_by_length([4, 6, 4, 5]) == {4: [0, 2], 6: [1], 5: [3]}


def test_summarize():
    mean, half = summarize([1.0, 2.0, 3.0])
    assert mean == pytest.approx(2.0)
    assert half == pytest.approx(1.96 / np.sqrt(3.0))
    assert summarize([5.0]) == (5.0, 0.0)
    with pytest.raises(EvaluationError):
        summarize([])


def test_clip_file(tmp_path, rng):
    values = rng.normal(size=(12, 15))
    path = str(tmp_path / "out" / "sample.jsonl")
    write_clip_file([clip_record(values, 20, caption="a person jumps")], path)
    df = read_clip_file(path)
    assert df.loc[0, "caption"] == "a person jumps"
    assert df.loc[0, "frames"] == 12
    assert np.array_equal(df.loc[0, "motion"], values)
