"""Synthetic utterances, the dataset file format and the batching pipeline."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DATASET_MAGIC = b"TMBD"
DATASET_VERSION = 1
MIN_LABELS = 2
MAX_LABELS = 12


@dataclass(frozen=True)
class Utterance:
    id: str
    labels: tuple[int, ...]
    features: np.ndarray  # (T, F) float32

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Dataset:
    utterances: list[Utterance]
    vocab_size: int

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.utterances[idx], self.vocab_size)
        return self.utterances[idx]

    @property
    def feat_dim(self) -> int:
        return int(self.utterances[0].features.shape[1]) if self.utterances else 0

    def split(self, n_dev: int) -> tuple["Dataset", "Dataset"]:
        """Last ``n_dev`` utterances become the dev set."""
        if not 0 < n_dev < len(self):
            raise ValueError(f"cannot split {n_dev} dev utterances from {len(self)}")
        return Dataset(self.utterances[:-n_dev], self.vocab_size), Dataset(self.utterances[-n_dev:], self.vocab_size)


@dataclass(frozen=True)
class UtteranceBatch:
    utterances: tuple[Utterance, ...]

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]

    @property
    def lengths(self) -> list[int]:
        return [u.num_frames for u in self.utterances]


# ------------------------------------------------------------- synthesis


def symbol_embeddings(vocab_size: int, feat_dim: int, seed: int) -> np.ndarray:
    """Row ``k - 1`` is the fixed feature vector of symbol ``k``."""
    return np.random.default_rng([seed, 1]).normal(size=(vocab_size, feat_dim))


def synth_dataset(
    vocab_size: int,
    n_utts: int,
    frames_per_label: int = 4,
    noise_sigma: float = 0.1,
    seed: int = 0,
    feat_dim: int = 8,
    distinct_adjacent: bool = True,
) -> Dataset:
    """Labels uniform over symbols, lengths uniform in [2, 12].

    Each label contributes ``frames_per_label`` copies of its symbol's
    embedding (standard normal, drawn once per seed) plus N(0, sigma^2)
    noise.  With ``distinct_adjacent`` a label is drawn uniformly from the
    symbols other than its predecessor, so runs of a repeated symbol
    (indistinguishable from one long symbol) never occur.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if frames_per_label < 1 or n_utts < 0 or noise_sigma < 0:
        raise ValueError("frames_per_label >= 1, n_utts >= 0 and noise_sigma >= 0 required")
    emb = symbol_embeddings(vocab_size, feat_dim, seed)
    rng = np.random.default_rng([seed, 2])
    utts = []
    width = len(str(max(n_utts - 1, 0)))
    for i in range(n_utts):
        length = int(rng.integers(MIN_LABELS, MAX_LABELS + 1))
        labels = []
        for _ in range(length):
            if distinct_adjacent and labels:
                k = int(rng.integers(1, vocab_size))
                labels.append(k if k < labels[-1] else k + 1)
            else:
                labels.append(int(rng.integers(1, vocab_size + 1)))
        clean = np.repeat(emb[np.asarray(labels) - 1], frames_per_label, axis=0)
        feats = clean + noise_sigma * rng.normal(size=clean.shape)
        utts.append(Utterance(f"utt{i:0{width}d}", tuple(labels), feats.astype(np.float32)))
    return Dataset(utts, vocab_size)


# ----------------------------------------------------------- file format


def save_dataset(path, dataset: Dataset) -> None:
    """Header ``TMBD``, version, vocab size, count; then per utterance:
    id, label ids (u32), frame count and feature dim, float32 features."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", DATASET_VERSION, dataset.vocab_size, len(dataset)))
        for u in dataset:
            key = u.id.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", len(u.labels)))
            fh.write(np.asarray(u.labels, dtype="<u4").tobytes())
            T, F = u.features.shape
            fh.write(struct.pack("<II", T, F))
            fh.write(np.ascontiguousarray(u.features, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    buf = memoryview(Path(path).read_bytes())
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated dataset file")
        out = buf[pos : pos + n]
        pos += n
        return out

    def u32(count: int = 1):
        vals = struct.unpack(f"<{count}I", take(4 * count))
        return vals if count > 1 else vals[0]

    if bytes(take(4)) != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, vocab_size, count = u32(3)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    utts = []
    for _ in range(count):
        uid = bytes(take(u32())).decode("utf-8")
        n = u32()
        labels = tuple(int(x) for x in np.frombuffer(bytes(take(4 * n)), dtype="<u4"))
        T, F = u32(2)
        feats = np.frombuffer(bytes(take(4 * T * F)), dtype="<f4").reshape(T, F).astype(np.float32)
        utts.append(Utterance(uid, labels, feats))
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} records")
    return Dataset(utts, vocab_size)


# -------------------------------------------------------------- pipeline


def filter_by_duration(utterances: Sequence[Utterance], max_seconds: float, frame_shift: float) -> list[Utterance]:
    return [u for u in utterances if u.num_frames * frame_shift <= max_seconds + 1e-9]


def build_pipeline(dataset, config, epoch: int = 0) -> list[UtteranceBatch]:
    """Drop over-long utterances, sort by length, cut into groups of
    ``batch_size`` and shuffle the group order with a per-epoch seed."""
    utts = filter_by_duration(list(dataset), config.max_utt_seconds, config.frame_shift)
    if not utts:
        raise ValueError(f"dataset is empty after discarding utterances longer than {config.max_utt_seconds} s")
    utts.sort(key=lambda u: (u.num_frames, u.id))
    bs = config.batch_size
    groups = [UtteranceBatch(tuple(utts[i : i + bs])) for i in range(0, len(utts), bs)]
    order = np.random.default_rng([config.seed, epoch]).permutation(len(groups))
    return [groups[i] for i in order]


def label_stream(dataset, sos_id: int) -> list[int]:
    """All label sequences joined into one stream, each preceded by SOS and
    the last followed by SOS, for next-symbol LM training."""
    out: list[int] = []
    for u in dataset:
        out.append(sos_id)
        out.extend(u.labels)
    out.append(sos_id)
    return out
