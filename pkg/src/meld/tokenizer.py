"""Byte-level BPE and the unified text/latent/special id space."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

N_BYTES = 256


@dataclass
class BpeModel:
    merges: list[tuple[int, int]]
    vocab: dict[str, int]

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._bytes = [bytes([b]) for b in range(N_BYTES)]
        for a, b in self.merges:
            self._bytes.append(self._bytes[a] + self._bytes[b])
        if sorted(self.vocab.values()) != list(range(len(self._bytes))):
            raise ValueError("BPE vocab ids must be dense and match the merge list")

    @property
    def size(self) -> int:
        return len(self.vocab)

    def token_bytes(self, i: int) -> bytes:
        return self._bytes[i]

    def encode(self, text) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = list(data)
        while len(ids) > 1:
            best = min(
                (self._ranks.get(p, len(self._ranks)), i)
                for i, p in enumerate(zip(ids, ids[1:]))
            )
            rank = best[0]
            if rank == len(self._ranks):
                break
            ids = _merge(ids, self.merges[rank], N_BYTES + rank)
        return ids

    def decode_bytes(self, ids) -> bytes:
        out = []
        for i in ids:
            if not 0 <= i < self.size:
                raise ValueError(f"token id {i} outside text vocabulary of size {self.size}")
            out.append(self._bytes[i])
        return b"".join(out)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="surrogateescape")

    def to_dict(self) -> dict:
        return {"merges": [list(m) for m in self.merges], "vocab": self.vocab}

    @classmethod
    def from_dict(cls, d: dict) -> "BpeModel":
        return cls([tuple(m) for m in d["merges"]], dict(d["vocab"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=True, indent=1))

    @classmethod
    def load(cls, path) -> "BpeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _merge(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out, i = [], 0
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_bpe(corpus, target_vocab: int = 320) -> BpeModel:
    """Greedy most-frequent-pair merging; equal counts go to the lexicographically
    smallest (left bytes, right bytes) pair."""
    lines = [line.encode("utf-8") if isinstance(line, str) else bytes(line) for line in corpus]
    if not lines:
        raise ValueError("cannot train BPE on an empty corpus")
    if target_vocab < N_BYTES:
        raise ConfigError(f"target_vocab {target_vocab} smaller than the {N_BYTES}-byte base alphabet")
    toks = [bytes([b]) for b in range(N_BYTES)]
    seqs = [list(line) for line in lines]
    merges = []
    while len(toks) < target_vocab:
        counts = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            break
        top = max(counts.values())
        if top < 2:
            break
        pair = min(
            (p for p, c in counts.items() if c == top), key=lambda p: (toks[p[0]], toks[p[1]])
        )
        new_id = len(toks)
        toks.append(toks[pair[0]] + toks[pair[1]])
        merges.append(pair)
        seqs = [_merge(s, pair, new_id) for s in seqs]
    vocab = {t.decode("latin-1"): i for i, t in enumerate(toks)}
    if len(vocab) != len(toks):
        # two merge paths produced the same byte string; keep ids dense by suffixing
        vocab = {}
        for i, t in enumerate(toks):
            key = t.decode("latin-1")
            vocab[key if key not in vocab else f"{key}\x00{i}"] = i
    return BpeModel(merges, vocab)


@dataclass(frozen=True)
class UnifiedVocab:
    """Ids: text ``[0, v_text)``, latents ``[v_text, v_text + k_latent)``, then
    ``<TTS>``, ``<STT>``, ``<EOS>``."""

    v_text: int
    k_latent: int

    def __post_init__(self):
        if self.v_text <= 0 or self.k_latent <= 0:
            raise ConfigError("v_text and k_latent must both be positive")

    @property
    def id_tts(self) -> int:
        return self.v_text + self.k_latent

    @property
    def id_stt(self) -> int:
        return self.id_tts + 1

    @property
    def id_eos(self) -> int:
        return self.id_tts + 2

    @property
    def total(self) -> int:
        return self.v_text + self.k_latent + 3

    @property
    def text_range(self) -> range:
        return range(0, self.v_text)

    @property
    def latent_range(self) -> range:
        return range(self.v_text, self.v_text + self.k_latent)

    @property
    def special_ids(self) -> tuple[int, int, int]:
        return (self.id_tts, self.id_stt, self.id_eos)

    def latent_id(self, k: int) -> int:
        if not 0 <= k < self.k_latent:
            raise ValueError(f"latent index {k} outside [0, {self.k_latent})")
        return self.v_text + k

    def latent_index(self, token_id: int) -> int:
        if not self.is_latent(token_id):
            raise ValueError(f"id {token_id} is not a latent id")
        return token_id - self.v_text

    def is_text(self, i: int) -> bool:
        return 0 <= i < self.v_text

    def is_latent(self, i: int) -> bool:
        return self.v_text <= i < self.v_text + self.k_latent

    def validate_ids(self, ids) -> None:
        for i in ids:
            if not 0 <= i < self.total:
                raise ValueError(f"id {i} outside unified vocabulary of size {self.total}")


def make_unified_vocab(v_text: int, k_latent: int) -> UnifiedVocab:
    return UnifiedVocab(v_text, k_latent)
