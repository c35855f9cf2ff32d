"""Sequence layouts for the two tasks and padding into batches.

TTS: inputs ``[y_1..y_M, <TTS>, x_1..x_T]``; the ``<TTS>`` slot and frames
``x_1..x_{T-1}`` predict the latents of ``x_1..x_T``, and ``x_T`` predicts
``<EOS>``.

STT: inputs ``[x_1..x_T, <STT>, y_1..y_M]``; ``<STT>`` and ``y_1..y_{M-1}``
predict ``y_1..y_M`` and ``y_M`` predicts ``<EOS>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyInputError, ShapeError
from .tokenizer import UnifiedVocab

IGNORE = -100


@dataclass
class SequenceItem:
    mode: str
    input_ids: np.ndarray  # token id, or -1 where the input is a frame
    input_frames: np.ndarray  # (L, D), zero rows at token positions
    target_ids: np.ndarray  # hard target id or IGNORE
    target_frames: np.ndarray  # (L, D), frame whose latent is the target
    target_is_frame: np.ndarray
    utt_id: str = ""

    def __len__(self):
        return self.input_ids.shape[0]

    @property
    def is_frame(self) -> np.ndarray:
        return self.input_ids < 0

    @property
    def n_frames(self) -> int:
        return int(self.is_frame.sum())

    @property
    def n_targets(self) -> int:
        return int((self.target_ids != IGNORE).sum() + self.target_is_frame.sum())


def _check(tokens, frames):
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    frames = np.asarray(frames, dtype=np.float32)
    if tokens.size == 0:
        raise EmptyInputError("transcript has no tokens")
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError("mel has no frames")
    return tokens, frames


def build_tts_sequence(tokens, mel, vocab: UnifiedVocab, utt_id: str = "") -> SequenceItem:
    tokens, frames = _check(tokens, mel)
    m, t, d = tokens.size, frames.shape[0], frames.shape[1]
    n = m + 1 + t
    ids = np.concatenate([tokens, [vocab.id_tts], -np.ones(t, dtype=np.int64)])
    in_frames = np.zeros((n, d), dtype=np.float32)
    in_frames[m + 1 :] = frames
    tgt_ids = np.full(n, IGNORE, dtype=np.int64)
    tgt_ids[n - 1] = vocab.id_eos
    tgt_frames = np.zeros((n, d), dtype=np.float32)
    tgt_frames[m : m + t] = frames
    tgt_is_frame = np.zeros(n, dtype=bool)
    tgt_is_frame[m : m + t] = True
    return SequenceItem("tts", ids, in_frames, tgt_ids, tgt_frames, tgt_is_frame, utt_id)


def build_stt_sequence(mel, tokens, vocab: UnifiedVocab, utt_id: str = "") -> SequenceItem:
    tokens, frames = _check(tokens, mel)
    m, t, d = tokens.size, frames.shape[0], frames.shape[1]
    n = t + 1 + m
    ids = np.concatenate([-np.ones(t, dtype=np.int64), [vocab.id_stt], tokens])
    in_frames = np.zeros((n, d), dtype=np.float32)
    in_frames[:t] = frames
    tgt_ids = np.full(n, IGNORE, dtype=np.int64)
    tgt_ids[t : t + m] = tokens
    tgt_ids[n - 1] = vocab.id_eos
    return SequenceItem(
        "stt", ids, in_frames, tgt_ids, np.zeros((n, d), dtype=np.float32), np.zeros(n, dtype=bool), utt_id
    )


@dataclass
class SequenceBatch:
    """Right-padded batch. Frame-target positions are additionally gathered into
    ``frame_pos`` (B, T_max) so per-utterance frame sequences can be rebuilt."""

    modes: list
    input_ids: torch.Tensor
    input_frames: torch.Tensor
    is_frame: torch.Tensor
    valid: torch.Tensor
    target_ids: torch.Tensor
    target_frames: torch.Tensor
    target_is_frame: torch.Tensor
    frame_pos: torch.Tensor
    frame_mask: torch.Tensor
    utt_ids: list
    batch_id: int = 0

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]

    @property
    def length(self) -> int:
        return self.input_ids.shape[1]

    @property
    def mode(self) -> str:
        modes = set(self.modes)
        return modes.pop() if len(modes) == 1 else "mixed"

    def to(self, dtype) -> "SequenceBatch":
        return SequenceBatch(
            self.modes, self.input_ids, self.input_frames.to(dtype), self.is_frame, self.valid,
            self.target_ids, self.target_frames.to(dtype), self.target_is_frame,
            self.frame_pos, self.frame_mask, self.utt_ids, self.batch_id,
        )


def collate(items, batch_id: int = 0) -> SequenceBatch:
    if not items:
        raise EmptyInputError("cannot collate an empty list of sequences")
    dims = {it.input_frames.shape[1] for it in items}
    if len(dims) != 1:
        raise ShapeError(f"items mix frame dimensions {sorted(dims)}")
    d = dims.pop()
    b, length = len(items), max(len(it) for it in items)
    t_max = max(max(int(it.target_is_frame.sum()) for it in items), 1)
    ids = np.zeros((b, length), dtype=np.int64)
    frames = np.zeros((b, length, d), dtype=np.float32)
    is_frame = np.zeros((b, length), dtype=bool)
    valid = np.zeros((b, length), dtype=bool)
    tgt_ids = np.full((b, length), IGNORE, dtype=np.int64)
    tgt_frames = np.zeros((b, length, d), dtype=np.float32)
    tgt_is_frame = np.zeros((b, length), dtype=bool)
    frame_pos = np.zeros((b, t_max), dtype=np.int64)
    frame_mask = np.zeros((b, t_max), dtype=bool)
    for i, it in enumerate(items):
        n = len(it)
        ids[i, :n] = np.where(it.is_frame, 0, it.input_ids)
        frames[i, :n] = it.input_frames
        is_frame[i, :n] = it.is_frame
        valid[i, :n] = True
        tgt_ids[i, :n] = it.target_ids
        tgt_frames[i, :n] = it.target_frames
        tgt_is_frame[i, :n] = it.target_is_frame
        pos = np.flatnonzero(it.target_is_frame)
        frame_pos[i, : pos.size] = pos
        frame_mask[i, : pos.size] = True
    return SequenceBatch(
        [it.mode for it in items],
        torch.from_numpy(ids),
        torch.from_numpy(frames),
        torch.from_numpy(is_frame),
        torch.from_numpy(valid),
        torch.from_numpy(tgt_ids),
        torch.from_numpy(tgt_frames),
        torch.from_numpy(tgt_is_frame),
        torch.from_numpy(frame_pos),
        torch.from_numpy(frame_mask),
        [it.utt_id for it in items],
        batch_id,
    )
