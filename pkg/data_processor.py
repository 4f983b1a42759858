import json
import logging
import os

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from errors import DataError, EvaluationError

logger = logging.getLogger(__name__)

CORPUS_COLUMNS = ["id", "caption", "class", "params", "fps", "motion"]


def load_split(path):
    """Read one corpus JSONL split into a DataFrame"""
    if not os.path.exists(path):
        raise DataError(f"corpus split not found: {path}")
    df = pd.read_json(path, lines=True, dtype=False, convert_dates=False, precise_float=True)
    return process_corpus_data(df)


def process_corpus_data(df):
    """Process corpus records: motion lists to arrays, frame counts, sanity checks"""
    missing = [col for col in ("id", "motion") if col not in df.columns]
    if missing:
        raise DataError(f"corpus records lack columns {missing}")

    # Motion lists become float64 frame x dim arrays
    df["motion"] = [np.asarray(m, dtype=np.float64) for m in df["motion"]]
    bad = [rid for rid, m in zip(df["id"], df["motion"]) if m.ndim != 2 or not np.all(np.isfinite(m))]
    if bad:
        raise DataError(f"records with malformed or non-finite motion: {bad[:5]}")

    df["frames"] = [m.shape[0] for m in df["motion"]]
    if "fps" not in df.columns:
        df["fps"] = 20
    if "caption" in df.columns:
        df["caption"] = df["caption"].fillna("").astype(str)
    return df


def get_corpus_stats(df):
    """Per-class counts and frame-length summary"""
    if df is None or len(df) == 0:
        return {"records": 0, "classes": {}, "min_frames": 0, "max_frames": 0, "mean_frames": 0.0}
    classes = df["class"].value_counts().sort_index().to_dict() if "class" in df.columns else {}
    return {
        "records": int(len(df)),
        "classes": {k: int(v) for k, v in classes.items()},
        "min_frames": int(df["frames"].min()),
        "max_frames": int(df["frames"].max()),
        "mean_frames": round(float(df["frames"].mean()), 2),
    }


# Corpus-wide standardization

def fit_normalizer(clips):
    """Per-dimension mean/std over every frame of the given clips"""
    frames = np.concatenate([np.asarray(c, dtype=np.float64) for c in clips], axis=0)
    scaler = StandardScaler().fit(frames)
    return {"mean": scaler.mean_.tolist(), "std": scaler.scale_.tolist(), "frames": int(frames.shape[0])}


def save_normalizer(stats, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=1)


def load_normalizer(path):
    if not os.path.exists(path):
        raise DataError(f"normalization stats not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        stats = json.load(fh)
    return {"mean": np.asarray(stats["mean"]), "std": np.asarray(stats["std"]), "frames": stats.get("frames", 0)}


def standardize(values, stats):
    return (np.asarray(values, dtype=np.float64) - np.asarray(stats["mean"])) / np.asarray(stats["std"])


def destandardize(values, stats):
    return np.asarray(values, dtype=np.float64) * np.asarray(stats["std"]) + np.asarray(stats["mean"])


def standardized_clips(df, stats):
    return [standardize(m, stats) for m in df["motion"]]


# Batching

def pad_clips(clips, length=None):
    """Stack variable-length clips into [B, Lmax, D] plus a [B, Lmax] validity mask"""
    if not clips:
        raise DataError("cannot batch zero clips")
    length = length or max(c.shape[0] for c in clips)
    dims = clips[0].shape[1]
    padded = np.zeros((len(clips), length, dims))
    valid = np.zeros((len(clips), length), dtype=bool)
    for i, clip in enumerate(clips):
        n = min(clip.shape[0], length)
        padded[i, :n] = clip[:n]
        valid[i, :n] = True
    return padded, valid


def batch_indices(n, batch_size, rng):
    """One shuffled pass over range(n) in batches; the last short batch is kept"""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def sample_batch(n, batch_size, rng):
    return rng.choice(n, size=min(batch_size, n), replace=False)


def prefix_clip(values, ratio, min_frames=8):
    """Leading ``ratio`` share of a clip's frames, never shorter than ``min_frames``"""
    keep = max(min_frames, int(round(values.shape[0] * ratio)))
    return values[:min(keep, values.shape[0])]


def group_by_length(lengths):
    """Indices grouped by equal clip length, so batches need no padding"""
    groups = {}
    for i, n in enumerate(lengths):
        groups.setdefault(int(n), []).append(i)
    return groups


# Clip files written by the sampler and read by caption/predict

def clip_record(values, fps, record_id="sample", caption=None):
    record = {"id": record_id, "fps": int(fps), "motion": np.asarray(values, dtype=np.float64).tolist()}
    if caption is not None:
        record["caption"] = caption
    return record


def write_jsonl(records, path):
    """One JSON record per line; floats are written in full so float64 motion reads back bit for bit"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def write_clip_file(records, path):
    write_jsonl(records, path)
    logger.info("Wrote %d clip(s) to %s", len(records), path)


def read_clip_file(path):
    df = load_split(path)
    if len(df) == 0:
        raise DataError(f"{path}: no clip records")
    return df


def summarize(values):
    """Mean and 95% confidence half-width over repetitions"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EvaluationError("no repetitions to summarize")
    half = 1.96 * values.std(ddof=1) / np.sqrt(values.size) if values.size > 1 else 0.0
    return float(values.mean()), float(half)
