"""Frozen k-means codebook and the soft-VQ posterior over its codewords.

``q(k | x) = softmax_k(-||x - c_k||^2 / tau)``. The codebook is fit once with
k-means++ seeded Lloyd iterations and never modified afterwards.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ShapeError

CODEBOOK_MAGIC = b"MCBK"


@dataclass
class Codebook:
    codewords: np.ndarray
    tau: float = 1.0
    frozen: bool = True
    seed: int | None = None
    distortion_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        cw = np.array(self.codewords, dtype=np.float64)
        if cw.ndim != 2 or cw.shape[0] < 2:
            raise ShapeError(f"codebook needs shape (K>=2, d), got {cw.shape}")
        if not np.all(np.isfinite(cw)):
            raise ValueError("codewords must be finite")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.frozen:
            cw.setflags(write=False)
        self.codewords = cw

    @property
    def k(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.codewords).tobytes()).hexdigest()

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.codewords, dtype=dtype)

    def save(self, path) -> None:
        header = json.dumps(
            {"K": self.k, "d": self.dim, "tau": self.tau, "seed": self.seed}, sort_keys=True
        ).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CODEBOOK_MAGIC + struct.pack("<I", len(header)) + header)
            f.write(self.codewords.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        raw = Path(path).read_bytes()
        if raw[:4] != CODEBOOK_MAGIC:
            raise ValueError(f"{path}: not a codebook file")
        (n,) = struct.unpack("<I", raw[4:8])
        head = json.loads(raw[8 : 8 + n])
        cw = np.frombuffer(raw[8 + n :], dtype="<f4").reshape(head["K"], head["d"])
        return cls(cw.astype(np.float64), head["tau"], True, head.get("seed"))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # exact pairwise ||x - c||^2; the expanded form loses precision near zero
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.shape[0])]]
    d2 = _sq_dists(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(x.shape[0])
        else:
            idx = rng.choice(x.shape[0], p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.stack(centers)


def kmeans_fit(frames, k: int, max_iters: int = 100, seed: int = 0, tau: float = 1.0) -> Codebook:
    """Lloyd's algorithm from k-means++ seeds. Returns a frozen codebook.

    Stops when the relative distortion change drops below 1e-6 or after
    ``max_iters`` iterations. Clusters that go empty are re-seeded with the
    point currently farthest from its centroid.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"frames must be (N, d), got {x.shape}")
    if x.shape[0] < k:
        raise ValueError(f"need at least K={k} frames, got {x.shape[0]}")
    if k < 2:
        raise ConfigError("K must be >= 2")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    history = []
    for _ in range(max_iters):
        d2 = _sq_dists(x, centers)
        assign = d2.argmin(axis=1)
        point_d2 = d2[np.arange(x.shape[0]), assign]
        counts = np.bincount(assign, minlength=k)
        while np.any(counts == 0):
            j = int(np.flatnonzero(counts == 0)[0])
            donors = counts[assign] > 1
            far = int(np.where(donors, point_d2, -1.0).argmax())
            assign[far] = j
            point_d2[far] = 0.0
            counts = np.bincount(assign, minlength=k)
        distortion = float(point_d2.sum() / x.shape[0])
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        centers = sums / counts[:, None]
        prev = history[-1] if history else None
        history.append(distortion)
        if prev is not None and abs(prev - distortion) <= 1e-6 * max(prev, 1e-300):
            break
    final = float(_sq_dists(x, centers).min(axis=1).mean())
    history.append(final)
    # round through float32 so the in-memory codebook equals its on-disk copy
    cw = centers.astype(np.float32).astype(np.float64)
    return Codebook(cw, tau=tau, frozen=True, seed=seed, distortion_history=history)


def _as_frames(cb: Codebook, frame) -> tuple[np.ndarray, bool]:
    x = np.asarray(frame, dtype=np.float64)
    single = x.ndim == 1
    x = x[None, :] if single else x
    if x.shape[-1] != cb.dim:
        raise ShapeError(f"frame dim {x.shape[-1]} != codebook dim {cb.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("frame contains non-finite values")
    return x, single


def log_soft_assign(cb: Codebook, frame) -> np.ndarray:
    x, single = _as_frames(cb, frame)
    logits = -_sq_dists(x, cb.codewords) / cb.tau
    logits -= logits.max(axis=1, keepdims=True)
    out = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return out[0] if single else out


def soft_assign(cb: Codebook, frame) -> np.ndarray:
    """Posterior over codewords for one frame ``(d,)`` or a batch ``(N, d)``."""
    return np.exp(log_soft_assign(cb, frame))


def sample_latent(cb: Codebook, frame, rng: np.random.Generator) -> int:
    probs = soft_assign(cb, np.asarray(frame).reshape(-1))
    return int(rng.choice(cb.k, p=probs / probs.sum()))


def assignment_entropy(probs) -> float | np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def log_soft_assign_torch(codewords: torch.Tensor, frames: torch.Tensor, tau: float) -> torch.Tensor:
    """Batched log q over codewords; ``frames`` is ``(..., d)``, result ``(..., K)``."""
    diff = frames.unsqueeze(-2) - codewords
    return torch.log_softmax(-(diff * diff).sum(-1) / tau, dim=-1)
