"""Synthetic decodable tasks, byte-level text ingestion and the token error rate.

Every sample is a ``(prompt, target)`` pair of token arrays. Training sees
``prompt + target`` shifted by one; only positions that predict a target
token are scored.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPECIALS = ("PAD", "BOS", "SEP", "EOS")


@dataclass(frozen=True)
class Tokenizer:
    """``byte`` mode: ids 0..255 are bytes. ``symbol`` mode: ids 0..n_symbols-1.

    The four specials follow the data range.
    """

    mode: str = "symbol"
    n_symbols: int = 16

    def __post_init__(self) -> None:
        if self.mode not in ("byte", "symbol"):
            raise ValueError(f"unknown tokenizer mode {self.mode!r}")
        if self.mode == "byte" and self.n_symbols != 256:
            object.__setattr__(self, "n_symbols", 256)

    @property
    def data_size(self) -> int:
        return self.n_symbols

    @property
    def vocab_size(self) -> int:
        return self.n_symbols + len(SPECIALS)

    @property
    def PAD(self) -> int:
        return self.n_symbols

    @property
    def BOS(self) -> int:
        return self.n_symbols + 1

    @property
    def SEP(self) -> int:
        return self.n_symbols + 2

    @property
    def EOS(self) -> int:
        return self.n_symbols + 3

    def encode(self, data) -> np.ndarray:
        if self.mode == "byte":
            raw = data.encode("utf-8") if isinstance(data, str) else bytes(data)
            return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        ids = np.asarray(list(data), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_symbols):
            raise ValueError("symbol outside the data range")
        return ids

    def decode(self, ids) -> bytes | list[int]:
        ids = [int(i) for i in ids if int(i) < self.n_symbols]
        return bytes(ids) if self.mode == "byte" else ids


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"  # copy | kv_recall | textfile
    n_samples: int = 1000
    seed: int = 0
    n_symbols: int = 16
    min_len: int = 4  # copy payload length range
    max_len: int = 10
    n_pairs: int = 4  # kv_recall
    n_keys: int = 8
    n_values: int = 8
    path: str = ""  # textfile
    context_len: int = 32

    def tokenizer(self) -> Tokenizer:
        if self.kind == "textfile":
            return Tokenizer("byte")
        if self.kind == "kv_recall":
            return Tokenizer("symbol", self.n_keys + self.n_values)
        return Tokenizer("symbol", self.n_symbols)

    def max_seq_len(self) -> int:
        if self.kind == "copy":
            return 2 * self.max_len + 3
        if self.kind == "kv_recall":
            return 2 * self.n_pairs + 5
        return self.context_len + 1


@dataclass(frozen=True)
class Sample:
    prompt: np.ndarray
    target: np.ndarray


Dataset = list[Sample]


def gen_copy(spec: TaskSpec) -> Dataset:
    """prompt = BOS payload SEP, target = payload EOS."""
    if spec.min_len < 1 or spec.max_len < spec.min_len:
        raise ValueError("payload length must be at least 1")
    tok = spec.tokenizer()
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.n_samples):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        payload = rng.integers(0, tok.data_size, n)
        out.append(Sample(
            np.concatenate([[tok.BOS], payload, [tok.SEP]]).astype(np.int64),
            np.concatenate([payload, [tok.EOS]]).astype(np.int64),
        ))
    return out


def gen_kv_recall(spec: TaskSpec) -> Dataset:
    """prompt = BOS k1 v1 ... kn vn SEP q, target = value(q) EOS.

    Keys are ids ``0..n_keys-1`` (unique within a sample); values are
    ``n_keys..n_keys+n_values-1`` and may repeat.
    """
    if spec.n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    if spec.n_keys < spec.n_pairs:
        raise ValueError(f"{spec.n_keys} keys cannot give {spec.n_pairs} unique keys per sample")
    tok = spec.tokenizer()
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.n_samples):
        keys = rng.choice(spec.n_keys, spec.n_pairs, replace=False)
        values = spec.n_keys + rng.integers(0, spec.n_values, spec.n_pairs)
        q = int(rng.integers(spec.n_pairs))
        body = np.stack([keys, values], axis=1).reshape(-1)
        out.append(Sample(
            np.concatenate([[tok.BOS], body, [tok.SEP, keys[q]]]).astype(np.int64),
            np.array([values[q], tok.EOS], dtype=np.int64),
        ))
    return out


def load_text(path: str | Path, context_len: int) -> Dataset:
    """Byte windows of ``context_len`` inputs with next-byte targets; the remainder is dropped.

    Window ``i`` covers bytes ``[i*c, (i+1)*c]`` inclusive: its first byte is the
    prompt and the following ``c`` bytes are the targets.
    """
    if context_len < 1:
        raise ValueError("context_len must be positive")
    try:
        data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)
    except OSError as e:
        raise ValueError(f"cannot read {path}: {e}") from e
    if data.size < 2:
        raise ValueError(f"{path}: need at least two bytes for a next-token pair")
    n_windows = (data.size - 1) // context_len
    if n_windows == 0:
        raise ValueError(f"{path}: shorter than one window of {context_len}")
    return [
        Sample(data[i * context_len : i * context_len + 1], data[i * context_len + 1 : (i + 1) * context_len + 1])
        for i in range(n_windows)
    ]


def generate(spec: TaskSpec) -> Dataset:
    if spec.kind == "copy":
        return gen_copy(spec)
    if spec.kind == "kv_recall":
        return gen_kv_recall(spec)
    if spec.kind == "textfile":
        return load_text(spec.path, spec.context_len)
    raise ValueError(f"unknown task kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    inputs: np.ndarray  # B, L
    labels: np.ndarray  # B, L
    loss_mask: np.ndarray  # B, L  (1 where the label is a target token)
    valid: np.ndarray  # B, L  (1 where the input is not padding)


def make_batch(samples: Dataset, pad: int) -> Batch:
    seqs = [np.concatenate([s.prompt, s.target]) for s in samples]
    width = max(len(s) for s in seqs) - 1
    b = len(seqs)
    inputs = np.full((b, width), pad, dtype=np.int64)
    labels = np.full((b, width), pad, dtype=np.int64)
    loss_mask = np.zeros((b, width))
    valid = np.zeros((b, width))
    for i, (s, seq) in enumerate(zip(samples, seqs)):
        n = len(seq) - 1
        inputs[i, :n] = seq[:-1]
        labels[i, :n] = seq[1:]
        valid[i, :n] = 1.0
        loss_mask[i, len(s.prompt) - 1 : n] = 1.0
    return Batch(inputs, labels, loss_mask, valid)


# ---------------------------------------------------------------------------
# error rate


@dataclass(frozen=True)
class ErrorRate:
    edits: int
    reference_tokens: int

    @property
    def rate(self) -> float:
        return self.edits / self.reference_tokens


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_error_rate(hyp, ref) -> ErrorRate:
    ref = list(ref)
    if not ref:
        raise ValueError("reference must be non-empty")
    return ErrorRate(edit_distance(hyp, ref), len(ref))


# ---------------------------------------------------------------------------
# on-disk cache: little-endian u32 counts and ids


def save_dataset(ds: Dataset, path: str | Path) -> None:
    parts = [struct.pack("<I", len(ds))]
    for s in ds:
        for arr in (s.prompt, s.target):
            parts.append(struct.pack("<I", len(arr)))
            parts.append(np.asarray(arr, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ValueError(f"{path}: truncated dataset file")
        chunk = raw[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        arrs = []
        for _ in range(2):
            (n,) = struct.unpack("<I", take(4))
            arrs.append(np.frombuffer(take(4 * n), dtype="<u4").astype(np.int64))
        out.append(Sample(*arrs))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after dataset")
    return out
