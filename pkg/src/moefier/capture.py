"""Collect FFN-input hidden states from a host model and persist them."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ForwardHooks, ToyTransformer
from .policy import CorruptFileError

DATASET_MAGIC = b"LDHS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<IIIQI")  # version, layer, d_h, rows, corpus-id length


class Corpus(list):
    """Token-id sequences plus an identifier for provenance."""

    def __init__(self, sequences: Iterable[Sequence[int]] = (), corpus_id: str = ""):
        super().__init__(list(s) for s in sequences)
        self.corpus_id = corpus_id or _corpus_digest(self)

    def chunked(self, max_len: int) -> "Corpus":
        """Split sequences longer than ``max_len`` into consecutive pieces."""
        out = []
        for seq in self:
            for i in range(0, len(seq), max_len):
                out.append(seq[i:i + max_len])
        return Corpus(out, self.corpus_id)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self)


def _corpus_digest(seqs) -> str:
    h = hashlib.sha256()
    for s in seqs:
        h.update(" ".join(map(str, s)).encode())
        h.update(b"\n")
    return "sha256:" + h.hexdigest()[:16]


def load_corpus(path) -> Corpus:
    """UTF-8 text, one sequence per line, token ids separated by whitespace."""
    seqs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            seqs.append([int(t) for t in line.split()])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-integer token") from exc
    corpus = Corpus(seqs)
    corpus.corpus_id = f"{Path(path).name}:{corpus.corpus_id}"
    return corpus


def save_corpus(path, corpus: Iterable[Sequence[int]]) -> None:
    Path(path).write_text("".join(" ".join(map(str, s)) + "\n" for s in corpus), encoding="utf-8")


def synthetic_corpus(n_seqs: int, seq_len: int, vocab: int, seed: int = 0) -> Corpus:
    """Random token sequences with a Zipf-like unigram distribution."""
    rng = np.random.default_rng(seed)
    p = 1.0 / np.arange(1, vocab + 1)
    p /= p.sum()
    return Corpus(rng.choice(vocab, size=(n_seqs, seq_len), p=p).tolist(), f"synthetic-{seed}")


@dataclass
class HiddenStateDataset:
    layer_index: int
    d_h: int
    rows: np.ndarray
    source_corpus_id: str = ""

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[1] != self.d_h:
            raise ValueError(f"rows of shape {self.rows.shape} do not have width d_h={self.d_h}")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def split(self, n_train: int) -> tuple["HiddenStateDataset", "HiddenStateDataset"]:
        a = HiddenStateDataset(self.layer_index, self.d_h, self.rows[:n_train], self.source_corpus_id)
        b = HiddenStateDataset(self.layer_index, self.d_h, self.rows[n_train:], self.source_corpus_id)
        return a, b


class CaptureHooks(ForwardHooks):
    """Append FFN inputs (and optionally outputs) of armed layers to per-layer buffers."""

    def __init__(self, layers: Iterable[int] = (), capture_outputs: bool = False):
        self.inputs: dict[int, list[np.ndarray]] = {}
        self.outputs: dict[int, list[np.ndarray]] = {}
        self.capture_outputs = capture_outputs
        for l in layers:
            self.arm(l)

    def arm(self, layer: int) -> None:
        self.inputs.setdefault(layer, [])
        if self.capture_outputs:
            self.outputs.setdefault(layer, [])

    def disarm(self, layer: int) -> None:
        self.inputs.pop(layer, None)
        self.outputs.pop(layer, None)

    @property
    def armed(self) -> list[int]:
        return sorted(self.inputs)

    def on_ffn_input(self, layer, x):
        if layer in self.inputs:
            self.inputs[layer].append(np.array(x, dtype=np.float32))

    def on_ffn_output(self, layer, y):
        if layer in self.outputs:
            self.outputs[layer].append(np.array(y, dtype=np.float32))

    def count(self, layer: int) -> int:
        return sum(len(a) for a in self.inputs.get(layer, []))

    def rows(self, layer: int, d_h: int) -> np.ndarray:
        chunks = self.inputs.get(layer, [])
        return np.concatenate(chunks) if chunks else np.zeros((0, d_h), np.float32)


def capture_layers(model: ToyTransformer, corpus: Iterable[Sequence[int]], layers: Sequence[int],
                   max_rows: int) -> dict[int, HiddenStateDataset]:
    """One pass over ``corpus`` capturing several layers at once, in corpus order."""
    cfg = model.config
    for l in layers:
        if not 0 <= l < cfg.n_layers:
            raise ValueError(f"layer {l} out of range for {cfg.n_layers} layers")
    if max_rows < 1:
        raise ValueError("max_rows must be >= 1")
    corpus = corpus if isinstance(corpus, Corpus) else Corpus(corpus)
    if not corpus or corpus.n_tokens == 0:
        raise ValueError("empty corpus")
    hooks = CaptureHooks(layers)
    for seq in corpus.chunked(cfg.seq_len):
        if all(hooks.count(l) >= max_rows for l in layers):
            break
        model.forward(seq, hooks)
    return {l: HiddenStateDataset(l, cfg.d_h, hooks.rows(l, cfg.d_h)[:max_rows], corpus.corpus_id) for l in layers}


def capture_layer(model: ToyTransformer, corpus: Iterable[Sequence[int]], layer: int,
                  max_rows: int = 100_000) -> HiddenStateDataset:
    return capture_layers(model, corpus, [layer], max_rows)[layer]


def save_dataset(path, ds: HiddenStateDataset) -> None:
    if ds.rows.shape[1] != ds.d_h:
        raise ValueError(f"row width {ds.rows.shape[1]} != d_h {ds.d_h}")
    cid = ds.source_corpus_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(_HEADER.pack(DATASET_VERSION, ds.layer_index, ds.d_h, len(ds), len(cid)))
        f.write(cid)
        f.write(ds.rows.astype("<f4", copy=False).tobytes())


def load_dataset(path) -> HiddenStateDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise CorruptFileError(f"{path}: not a hidden-state dataset (bad magic)")
    if len(buf) < 4 + _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    version, layer, d_h, n_rows, cid_len = _HEADER.unpack_from(buf, 4)
    if version != DATASET_VERSION:
        raise CorruptFileError(f"{path}: unsupported dataset version {version}")
    off = 4 + _HEADER.size + cid_len
    payload = len(buf) - off
    expected = 4 * n_rows * d_h
    if payload < expected:
        raise CorruptFileError(f"{path}: truncated, {payload} of {expected} data bytes present")
    if payload != expected:
        raise CorruptFileError(f"{path}: {payload} data bytes do not match {n_rows} rows of width {d_h}")
    cid = buf[4 + _HEADER.size:off].decode("utf-8")
    rows = np.frombuffer(buf, dtype="<f4", count=n_rows * d_h, offset=off).reshape(n_rows, d_h)
    return HiddenStateDataset(layer, d_h, rows.astype(np.float32), cid)
