"""Featurized examples and per-step sequence assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import SpecAugmentConfig, spec_augment
from .dsp import MelConfig, MelSpectrogram, NormStats, extract_mel, fit_norm_stats, normalize, stack_frames
from .sequences import build_stt_sequence, build_tts_sequence, collate
from .tokenizer import BpeModel, UnifiedVocab


@dataclass
class Example:
    utt_id: str
    transcript: str
    tokens: np.ndarray
    frames: np.ndarray  # normalized (and stacked) mel, (T, D)
    speaker_id: int = 0

    @property
    def seq_len(self) -> int:
        return self.tokens.size + 1 + self.frames.shape[0]


def featurize(utterances, mel_cfg: MelConfig) -> list[MelSpectrogram]:
    return [extract_mel(u.wave, mel_cfg) for u in utterances]


def prepare_examples(utterances, mels, stats: NormStats, bpe: BpeModel, stack_factor: int = 1) -> list[Example]:
    out = []
    for u, mel in zip(utterances, mels):
        frames = stack_frames(normalize(mel, stats), stack_factor).frames.astype(np.float32)
        out.append(Example(u.utt_id, u.transcript, np.array(bpe.encode(u.transcript), dtype=np.int64), frames, u.speaker_id))
    return out


def build_examples(utterances, mel_cfg: MelConfig, bpe: BpeModel, stats: NormStats | None = None):
    """Featurize, fit stats when not given, normalize and tokenize."""
    mels = featurize(utterances, mel_cfg)
    stats = stats or fit_norm_stats(mels)
    return prepare_examples(utterances, mels, stats, bpe, mel_cfg.stack_factor), stats


def assemble(examples, mode: str, vocab: UnifiedVocab, specaug: SpecAugmentConfig | None = None, rng=None, batch_id: int = 0):
    items = []
    for ex in examples:
        if mode == "tts":
            items.append(build_tts_sequence(ex.tokens, ex.frames, vocab, ex.utt_id))
        else:
            frames = ex.frames
            if specaug is not None:
                frames = spec_augment(frames, specaug, rng, train=True).astype(np.float32)
            items.append(build_stt_sequence(frames, ex.tokens, vocab, ex.utt_id))
    return collate(items, batch_id)
