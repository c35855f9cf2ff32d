"""Waveform <-> normalized log-mel conversion.

Frames are taken without centering, so a wave of ``n`` samples yields
``(n - win) // hop + 1`` frames. Inversion goes mel -> linear power via
non-negative least squares, then Griffin-Lim phase recovery.
"""

from __future__ import annotations

import json
import struct
import wave as _wave
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import nnls
from scipy.signal import get_window

from .errors import ConfigError, EmptyInputError, ShapeError

LOG_EPS = 1e-10
STD_FLOOR = 1e-5

MEL_MAGIC = b"MELD"
MEL_VERSION = 1


@dataclass(frozen=True)
class WaveBuffer:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("wave contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    hop_ms: float = 16.0
    win_ms: float = 64.0
    fft_size: int = 1024
    fmin_hz: float = 80.0
    fmax_hz: float = 7600.0
    window: str = "hann"
    stack_factor: int = 1
    sample_rate_hz: int = 16000

    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000.0))

    def win_length(self) -> int:
        return int(round(self.win_ms * self.sample_rate_hz / 1000.0))

    @property
    def frame_rate_hz(self) -> float:
        return 1000.0 / self.hop_ms / self.stack_factor

    @property
    def frame_dim(self) -> int:
        return self.n_mels * self.stack_factor

    def validate(self) -> "MelConfig":
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sr/2, got fmin={self.fmin_hz} fmax={self.fmax_hz}"
            )
        if self.hop_ms <= 0 or self.win_ms < self.hop_ms:
            raise ConfigError("need 0 < hop_ms <= win_ms")
        if self.fft_size < self.win_length():
            raise ConfigError(
                f"fft_size {self.fft_size} shorter than window of {self.win_length()} samples"
            )
        if self.stack_factor < 1:
            raise ConfigError("stack_factor must be >= 1")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ShapeError("mean and std must have the same length")
        if np.any(std <= 0):
            raise ValueError("std entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)
    normalized: bool = False

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ShapeError(f"frames must be 2-D (T, D), got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("mel frames contain non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of every triangular filter."""
    pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters of shape (n_mels, fft_size // 2 + 1), peak value 1."""
    cfg.validate()
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    )
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate_hz / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


def _analysis_window(cfg: MelConfig) -> np.ndarray:
    win = get_window(cfg.window, cfg.win_length(), fftbins=True)
    return np.pad(win, (0, cfg.fft_size - win.shape[0]))


def num_frames(n_samples: int, cfg: MelConfig) -> int:
    win = cfg.win_length()
    if n_samples < win:
        return 0
    return (n_samples - win) // cfg.hop_length() + 1


def stft(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Complex STFT, shape (T, fft_size // 2 + 1), uncentered frames."""
    hop, n_fft = cfg.hop_length(), cfg.fft_size
    t = num_frames(samples.shape[0], cfg)
    padded = np.pad(samples, (0, max(0, (t - 1) * hop + n_fft - samples.shape[0])))
    idx = np.arange(n_fft)[None, :] + hop * np.arange(t)[:, None]
    return np.fft.rfft(padded[idx] * _analysis_window(cfg)[None, :], axis=-1)


def istft(spec: np.ndarray, cfg: MelConfig, length: int | None = None) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add)."""
    hop, n_fft = cfg.hop_length(), cfg.fft_size
    t = spec.shape[0]
    win = _analysis_window(cfg)
    n = (t - 1) * hop + n_fft
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * win[None, :]
    out = np.zeros(n)
    norm = np.zeros(n)
    for i in range(t):
        out[i * hop : i * hop + n_fft] += frames[i]
        norm[i * hop : i * hop + n_fft] += win**2
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    if length is not None:
        out = np.pad(out, (0, max(0, length - n)))[:length]
    return out


def extract_mel(wave: WaveBuffer, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Unnormalized log-mel frames ``log(fb @ |STFT|^2 + eps)`` (unstacked)."""
    cfg = (cfg or MelConfig()).validate()
    if wave.sample_rate_hz != cfg.sample_rate_hz:
        raise ConfigError(
            f"wave sample rate {wave.sample_rate_hz} != config {cfg.sample_rate_hz}"
        )
    if len(wave) < cfg.win_length():
        raise EmptyInputError(
            f"wave has {len(wave)} samples, shorter than one window ({cfg.win_length()})"
        )
    power = np.abs(stft(wave.samples, cfg)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(mel + LOG_EPS), replace(cfg, stack_factor=1), False)


def fit_norm_stats(corpus) -> NormStats:
    mats = [m.frames for m in corpus if m.n_frames > 0]
    if not mats:
        raise EmptyInputError("cannot fit normalization statistics on an empty corpus")
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ShapeError(f"corpus mixes frame dimensions {sorted(dims)}")
    allf = np.concatenate(mats, axis=0)
    return NormStats(allf.mean(axis=0), np.maximum(allf.std(axis=0), STD_FLOOR))


def _check_dims(mel: MelSpectrogram, stats: NormStats):
    if mel.dim != stats.dim:
        raise ShapeError(f"mel dim {mel.dim} != stats dim {stats.dim}")


def normalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    _check_dims(mel, stats)
    return MelSpectrogram((mel.frames - stats.mean) / stats.std, mel.config, True)


def denormalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    _check_dims(mel, stats)
    return MelSpectrogram(mel.frames * stats.std + stats.mean, mel.config, False)


def stack_frames(mel: MelSpectrogram, factor: int) -> MelSpectrogram:
    """Concatenate every ``factor`` consecutive frames; a partial tail group is dropped."""
    if factor < 1:
        raise ConfigError("stack factor must be >= 1")
    if factor == 1:
        return mel
    t = mel.n_frames // factor
    frames = mel.frames[: t * factor].reshape(t, factor * mel.dim)
    cfg = replace(mel.config, stack_factor=mel.config.stack_factor * factor)
    return MelSpectrogram(frames, cfg, mel.normalized)


def unstack_frames(mel: MelSpectrogram, factor: int) -> MelSpectrogram:
    if factor < 1:
        raise ConfigError("stack factor must be >= 1")
    if factor == 1:
        return mel
    if mel.dim % factor:
        raise ShapeError(f"frame dim {mel.dim} not divisible by {factor}")
    frames = mel.frames.reshape(mel.n_frames * factor, mel.dim // factor)
    cfg = replace(mel.config, stack_factor=max(1, mel.config.stack_factor // factor))
    return MelSpectrogram(frames, cfg, mel.normalized)


def nnls_batched(a: np.ndarray, b: np.ndarray, iters: int = 300) -> np.ndarray:
    """Solve min ||x @ a.T - b||^2 s.t. x >= 0 for every row of ``b`` (FISTA)."""
    lipschitz = np.linalg.norm(a, 2) ** 2
    x = np.clip(b @ np.linalg.pinv(a).T, 0.0, None)
    y, k = x.copy(), 1.0
    for _ in range(iters):
        grad = (y @ a.T - b) @ a
        x_next = np.clip(y - grad / lipschitz, 0.0, None)
        k_next = (1.0 + np.sqrt(1.0 + 4.0 * k * k)) / 2.0
        y = x_next + ((k - 1.0) / k_next) * (x_next - x)
        x, k = x_next, k_next
    return x


def mel_to_linear_power(log_mel: np.ndarray, cfg: MelConfig, exact: bool = False) -> np.ndarray:
    """Non-negative least-squares lift of mel power back to linear-frequency power.

    ``exact=True`` solves every frame with an active-set NNLS solver, which is
    much slower; the default runs a batched projected-gradient solver.
    """
    fb = mel_filterbank(cfg)
    mel_power = np.clip(np.exp(log_mel) - LOG_EPS, 0.0, None)
    scale = np.maximum(mel_power.max(axis=1, keepdims=True), 1e-300)
    if exact:
        out = np.zeros((log_mel.shape[0], fb.shape[1]))
        for t, row in enumerate(mel_power / scale):
            if row.max() > 0.0:
                out[t], _ = nnls(fb, row)
    else:
        out = nnls_batched(fb, mel_power / scale)
    out[mel_power.max(axis=1) <= 0.0] = 0.0
    return out * scale


def spectral_convergence(target_mag: np.ndarray, samples: np.ndarray, cfg: MelConfig) -> float:
    """||S - |STFT(x)|||_F / ||S||_F."""
    est = np.abs(stft(samples, cfg))
    t = min(est.shape[0], target_mag.shape[0])
    denom = np.linalg.norm(target_mag[:t])
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(target_mag[:t] - est[:t]) / denom)


def griffin_lim(magnitude: np.ndarray, cfg: MelConfig, iters: int, seed: int = 0) -> np.ndarray:
    if iters < 1:
        raise ConfigError("Griffin-Lim needs iters >= 1")
    rng = np.random.default_rng(seed)
    length = (magnitude.shape[0] - 1) * cfg.hop_length() + cfg.fft_size
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    samples = istft(magnitude * phase, cfg, length)
    for _ in range(iters - 1):
        spec = stft(samples, cfg)
        phase = np.exp(1j * np.angle(spec))
        samples = istft(magnitude * phase, cfg, length)
    return samples


def invert_mel_griffin_lim(
    mel: MelSpectrogram, stats: NormStats, iters: int = 32, seed: int = 0
) -> WaveBuffer:
    """Approximate waveform for a normalized (possibly stacked) mel spectrogram."""
    if iters < 1:
        raise ConfigError("Griffin-Lim needs iters >= 1")
    if not mel.normalized:
        raise ValueError("invert_mel_griffin_lim expects a normalized mel spectrogram")
    cfg = mel.config
    if cfg.stack_factor > 1:
        mel = unstack_frames(mel, cfg.stack_factor)
        cfg = mel.config
    raw = denormalize(mel, stats)
    if raw.n_frames == 0:
        return WaveBuffer(np.zeros(0), cfg.sample_rate_hz)
    mag = np.sqrt(mel_to_linear_power(raw.frames, cfg))
    samples = griffin_lim(mag, cfg, iters, seed)
    return WaveBuffer(np.clip(samples, -1.0, 1.0), cfg.sample_rate_hz)


# -- file formats -------------------------------------------------------------


def read_wav(path) -> WaveBuffer:
    with _wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        sr = f.getframerate()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return WaveBuffer(data.astype(np.float64) / 32768.0, sr)


def write_wav(path, wave: WaveBuffer) -> None:
    pcm = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave.sample_rate_hz)
        f.writeframes(pcm.tobytes())


def save_mel(path, mel: MelSpectrogram, extra: dict | None = None) -> None:
    """Binary mel container: header, f32 row-major payload, trailing JSON metadata."""
    t, d = mel.frames.shape
    meta = {"config": mel.config.to_dict(), "normalized": mel.normalized}
    if extra:
        meta.update(extra)
    with open(path, "wb") as f:
        f.write(MEL_MAGIC + struct.pack("<III", MEL_VERSION, t, d))
        f.write(mel.frames.astype("<f4").tobytes())
        f.write(json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_mel(path) -> tuple[MelSpectrogram, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MEL_MAGIC:
        raise ValueError(f"{path}: not a mel container")
    version, t, d = struct.unpack("<III", raw[4:16])
    if version != MEL_VERSION:
        raise ValueError(f"{path}: unsupported mel container version {version}")
    end = 16 + 4 * t * d
    frames = np.frombuffer(raw[16:end], dtype="<f4").reshape(t, d).astype(np.float64)
    meta = json.loads(raw[end:].decode("utf-8")) if len(raw) > end else {}
    cfg = MelConfig(**meta["config"]) if "config" in meta else MelConfig()
    return MelSpectrogram(frames, cfg, bool(meta.get("normalized", False))), meta
