"""Deterministic synthetic speech-text corpus, SpecAugment and batch planning.

Every word is a fixed sequence of sine tones; a speaker shifts all tone
frequencies by its pitch offset and adds a second harmonic at a
speaker-specific level. Utterances are fully determined by
``(transcript, speaker_id, spec)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import WaveBuffer, read_wav, write_wav
from .errors import ConfigError, EmptyInputError

_CONSONANTS = "bdgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SynthSpec:
    word_vocab_size: int = 8
    tones_per_word: int = 2
    base_f0_hz: float = 300.0
    tone_step_semitones: float = 2.0
    speaker_offsets_hz: tuple = (0.0, 90.0)
    speaker_harmonic_gain: tuple = (0.2, 0.6)
    tone_dur_ms: float = 64.0
    gap_ms: float = 32.0
    lead_silence_ms: float = 48.0
    tail_silence_ms: float = 160.0
    utterance_len_words: tuple = (2, 4)
    amplitude: float = 0.4
    sample_rate_hz: int = 16000
    fmax_hz: float = 7600.0
    seed: int = 0

    def validate(self) -> "SynthSpec":
        positive = ("word_vocab_size", "tones_per_word", "base_f0_hz", "tone_dur_ms", "sample_rate_hz")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"synth.{name} must be positive")
        if len(set(self.speaker_offsets_hz)) != len(self.speaker_offsets_hz):
            raise ConfigError("synth.speaker_offsets_hz must be distinct")
        if len(self.speaker_harmonic_gain) != len(self.speaker_offsets_hz):
            raise ConfigError("synth.speaker_harmonic_gain needs one entry per speaker")
        lo, hi = self.utterance_len_words
        if not 1 <= lo <= hi:
            raise ConfigError("synth.utterance_len_words must be a range 1 <= lo <= hi")
        if self.word_vocab_size > len(_CONSONANTS) * len(_VOWELS):
            raise ConfigError("synth.word_vocab_size exceeds the available word names")
        top = tone_frequencies(self).max() + max(self.speaker_offsets_hz)
        if 2 * top >= min(self.fmax_hz, self.sample_rate_hz / 2):
            raise ConfigError(
                f"synth vocabulary needs tones up to {2 * top:.0f} Hz (with harmonic), above fmax"
            )
        return self

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_offsets_hz)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    transcript: str
    wave: WaveBuffer
    speaker_id: int


@dataclass(frozen=True)
class SpecAugmentConfig:
    n_freq_masks: int = 2
    max_freq_bands: int = 30
    n_time_masks: int = 10
    max_frames_per_mask: int = 50
    time_mask_cap_ratio: float = 0.1

    def validate(self) -> "SpecAugmentConfig":
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"specaugment.{k} must be non-negative")
        if not 0.0 < self.time_mask_cap_ratio <= 1.0:
            raise ConfigError("specaugment.time_mask_cap_ratio must be in (0, 1]")
        return self

    @classmethod
    def joint_preset(cls) -> "SpecAugmentConfig":
        return cls(n_freq_masks=2, n_time_masks=2)


def word_list(spec: SynthSpec) -> list[str]:
    names = [c + v for v in _VOWELS for c in _CONSONANTS]
    return names[: spec.word_vocab_size]


def tone_frequencies(spec: SynthSpec) -> np.ndarray:
    """(word_vocab_size, tones_per_word) base frequencies before speaker offset."""
    n = spec.word_vocab_size * spec.tones_per_word
    grid = spec.base_f0_hz * 2.0 ** (spec.tone_step_semitones * np.arange(n) / 12.0)
    perm = np.random.default_rng(spec.seed).permutation(n)
    return grid[perm].reshape(spec.word_vocab_size, spec.tones_per_word)


def _tone(freq: float, n: int, sr: int, harmonic_gain: float, amp: float) -> np.ndarray:
    t = np.arange(n) / sr
    sig = np.sin(2 * np.pi * freq * t) + harmonic_gain * np.sin(2 * np.pi * 2 * freq * t)
    ramp = min(n // 2, int(0.005 * sr))
    env = np.ones(n)
    if ramp > 0:
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
    return amp * env * sig / (1.0 + harmonic_gain)


def synthesize_utterance(transcript: str, speaker_id: int, spec: SynthSpec) -> WaveBuffer:
    spec.validate()
    words = transcript.split()
    if not words:
        raise EmptyInputError("transcript has no words")
    index = {w: i for i, w in enumerate(word_list(spec))}
    freqs = tone_frequencies(spec)
    sr = spec.sample_rate_hz
    ms = lambda v: int(round(v * sr / 1000.0))  # noqa: E731
    offset = spec.speaker_offsets_hz[speaker_id]
    gain = spec.speaker_harmonic_gain[speaker_id]
    parts = [np.zeros(ms(spec.lead_silence_ms))]
    for wi, w in enumerate(words):
        if w not in index:
            raise ValueError(f"unknown word {w!r}")
        if wi:
            parts.append(np.zeros(ms(spec.gap_ms)))
        for f in freqs[index[w]]:
            parts.append(_tone(f + offset, ms(spec.tone_dur_ms), sr, gain, spec.amplitude))
    parts.append(np.zeros(ms(spec.tail_silence_ms)))
    return WaveBuffer(np.concatenate(parts), sr)


def generate_corpus(spec: SynthSpec, n_utterances: int) -> list[Utterance]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    words = word_list(spec)
    lo, hi = spec.utterance_len_words
    out = []
    for i in range(n_utterances):
        n = int(rng.integers(lo, hi + 1))
        transcript = " ".join(words[j] for j in rng.integers(0, len(words), size=n))
        speaker = int(rng.integers(spec.n_speakers))
        out.append(Utterance(f"utt{i:05d}", transcript, synthesize_utterance(transcript, speaker, spec), speaker))
    return out


# -- manifests ----------------------------------------------------------------


def write_corpus(directory, utterances) -> Path:
    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w") as f:
        for u in utterances:
            rel = f"wav/{u.utt_id}.wav"
            write_wav(directory / rel, u.wave)
            f.write(json.dumps({"utt_id": u.utt_id, "transcript": u.transcript, "wav": rel, "speaker_id": u.speaker_id}) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    for r in rows:
        r["wav_path"] = str((path.parent / r["wav"]).resolve())
    return rows


def load_utterances(path) -> list[Utterance]:
    return [
        Utterance(r["utt_id"], r["transcript"], read_wav(r["wav_path"]), int(r.get("speaker_id", 0)))
        for r in read_manifest(path)
    ]


# -- SpecAugment --------------------------------------------------------------


@dataclass
class MaskRecord:
    axis: str
    start: int
    width: int


def spec_augment(frames, cfg: SpecAugmentConfig, rng: np.random.Generator, train: bool = True, return_masks: bool = False):
    """Zero random time spans and frequency bands of a (T, D) normalized mel."""
    x = np.array(frames, copy=True)
    masks: list[MaskRecord] = []
    if train:
        cfg.validate()
        t, d = x.shape
        t_cap = min(cfg.max_frames_per_mask, int(np.floor(cfg.time_mask_cap_ratio * t)))
        for _ in range(cfg.n_freq_masks):
            width = int(rng.integers(0, min(cfg.max_freq_bands, d) + 1))
            start = int(rng.integers(0, d - width + 1))
            x[:, start : start + width] = 0.0
            masks.append(MaskRecord("freq", start, width))
        for _ in range(cfg.n_time_masks):
            width = int(rng.integers(0, max(t_cap, 0) + 1))
            start = int(rng.integers(0, t - width + 1))
            x[start : start + width, :] = 0.0
            masks.append(MaskRecord("time", start, width))
    return (x, masks) if return_masks else x


# -- batching -----------------------------------------------------------------


@dataclass
class BatchPlan:
    mode: str
    indices: list = field(default_factory=list)
    padded_size: int = 0


def make_batches(lengths, max_frames_per_batch: int, mode_mix: str = "tts", seed: int = 0) -> list[BatchPlan]:
    """Plan one epoch: length-bucketed batches whose padded size (B x L_max)
    stays within the budget, shuffled, each assigned a mode. ``joint`` draws
    TTS or STT per batch with probability 1/2."""
    lengths = [int(n) for n in lengths]
    if not lengths:
        raise EmptyInputError("no items to batch")
    if mode_mix not in ("tts", "stt", "joint"):
        raise ConfigError(f"unknown mode_mix {mode_mix!r}")
    if max(lengths) > max_frames_per_batch:
        raise ConfigError(f"an item of length {max(lengths)} exceeds the batch budget {max_frames_per_batch}")
    rng = np.random.default_rng(seed)
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    plans, cur = [], []
    for i in order:
        cand = cur + [i]
        if len(cand) * max(lengths[j] for j in cand) > max_frames_per_batch:
            plans.append(cur)
            cand = [i]
        cur = cand
    plans.append(cur)
    out = []
    for k in rng.permutation(len(plans)):
        idx = plans[k]
        mode = mode_mix if mode_mix != "joint" else ("tts" if rng.random() < 0.5 else "stt")
        out.append(BatchPlan(mode, list(idx), len(idx) * max(lengths[j] for j in idx)))
    return out
