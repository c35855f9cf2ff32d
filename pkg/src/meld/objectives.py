"""Training objectives.

TTS minimizes, per frame, ``KL(q(z|x_t) || p(z|x_<t, y))`` plus the two-stage
reconstruction error of the frame decoded from a latent ``z_t ~ q``, with a
hard cross-entropy on ``<EOS>`` after the last frame. The KL uses the full
``q`` vector as a soft target; the sampled ``z_t`` only feeds reconstruction.
STT minimizes hard-target cross-entropy over text ids and ``<EOS>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from . import numerics as nx
from .codebook import Codebook, log_soft_assign_torch
from .errors import ShapeError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LossReport:
    vlb_total: float = 0.0
    kl_term: float = 0.0
    reconstruction_mse: float = 0.0
    entropy_q: float = 0.0
    stt_ce: float = 0.0
    slowness: float = 0.0
    weighted_total: float = 0.0
    n_frames: int = 0
    n_targets: int = 0
    mode: str = ""
    loss: torch.Tensor | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "loss"}


FIELDS = [
    "vlb_total", "kl_term", "reconstruction_mse", "entropy_q", "stt_ce", "slowness",
    "weighted_total", "n_frames", "n_targets",
]


# -- elementary terms ---------------------------------------------------------


def entropy(q: torch.Tensor) -> torch.Tensor:
    """-sum q log q over the last axis, with 0 log 0 = 0."""
    safe = torch.where(q > 0, q, torch.ones_like(q))
    return -(q * torch.log(safe)).sum(-1)


def soft_cross_entropy(q: torch.Tensor, log_p: torch.Tensor) -> torch.Tensor:
    return -(q * log_p).sum(-1)


def kl_q_p(q, log_p):
    """KL(q || p) computed as cross-entropy(q, p) - entropy(q).

    ``log_p`` holds log-probabilities over the same K latents as ``q``; they may
    sum to less than one when p also puts mass on other vocabulary entries.
    """
    q = torch.as_tensor(q)
    log_p = torch.as_tensor(log_p, dtype=q.dtype)
    if q.shape != log_p.shape:
        raise ShapeError(f"q {tuple(q.shape)} and log_p {tuple(log_p.shape)} differ")
    if bool(((q > 0) & torch.isneginf(log_p)).any()):
        raise ValueError("p has zero mass on a code supported by q")
    return soft_cross_entropy(q, log_p) - entropy(q)


def reconstruction_mse(x, x_hat, x_post_residual, mask=None):
    """(1/T) sum_t ||x_t - x_hat_t||^2 + ||x_t - (conv(x_hat)_t + x_hat_t)||^2.

    Arrays are (..., T, D); ``mask`` (..., T) drops padded frames from the sum
    and from T.
    """
    if not (x.shape == x_hat.shape == x_post_residual.shape):
        raise ShapeError("x, x_hat and conv(x_hat) must share a shape")
    per = ((x - x_hat) ** 2).sum(-1) + ((x - (x_post_residual + x_hat)) ** 2).sum(-1)
    if mask is None:
        return per.mean()
    m = mask.to(per.dtype)
    return (per * m).sum() / m.sum().clamp_min(1.0)


def slowness_penalty(x_hat, mask=None):
    """-(1/(T-1)) sum_t ||x_hat_t - x_hat_{t+1}||^2 for a (T, D) sequence, or the
    mean over sequences for (B, T, D) with a (B, T) validity mask. 0 when T < 2."""
    if x_hat.dim() == 2:
        x_hat = x_hat.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if mask is None:
        mask = torch.ones(x_hat.shape[:2], dtype=torch.bool)
    step = ((x_hat[:, 1:] - x_hat[:, :-1]) ** 2).sum(-1)
    pair = (mask[:, 1:] & mask[:, :-1]).to(step.dtype)
    n_pairs = pair.sum(-1)
    per_seq = torch.where(
        n_pairs > 0, -(step * pair).sum(-1) / n_pairs.clamp_min(1.0), torch.zeros_like(n_pairs)
    )
    return per_seq.mean()


def gaussian_nll(x, mean) -> float:
    """-log N(x; mean, I) including the normalization constant."""
    x, mean = np.asarray(x, dtype=np.float64), np.asarray(mean, dtype=np.float64)
    return float(0.5 * np.sum((x - mean) ** 2) + 0.5 * x.size * LOG_2PI)


# -- task losses --------------------------------------------------------------


def _gather_frames(values: torch.Tensor, batch) -> torch.Tensor:
    """Pick rows at ``batch.frame_pos`` -> (B, T_max, ...)."""
    idx = batch.frame_pos
    expand = idx.view(*idx.shape, *([1] * (values.dim() - 2))).expand(*idx.shape, *values.shape[2:])
    return values.gather(1, expand)


def tts_loss(
    batch,
    model,
    cb: Codebook,
    rng: torch.Generator | None = None,
    slow_weight: float = 0.2,
    kl_weight: float = 1.0,
    train: bool = True,
    gmel_dropout: bool = True,
    zero_codeword: bool = False,
) -> LossReport:
    dtype = next(model.parameters()).dtype
    vocab = model.vocab
    codewords = cb.as_tensor(dtype)
    h = model.forward_hidden(batch, train=train, gmel_dropout=gmel_dropout, rng=rng)
    log_p = torch.log_softmax(model.head(h), dim=-1)

    # latent targets, gathered per utterance into (B, T, ...)
    frame_mask = batch.frame_mask
    x = _gather_frames(batch.target_frames.to(dtype), batch)
    log_q = log_soft_assign_torch(codewords, x, cb.tau)
    q = log_q.exp()
    lp_lat = _gather_frames(log_p, batch)[..., vocab.latent_range.start : vocab.latent_range.stop]
    kl = kl_q_p(q, lp_lat)
    fm = frame_mask.to(dtype)
    n_frames = fm.sum()

    eos_pos = batch.target_ids == vocab.id_eos
    eos_nll = -log_p[..., vocab.id_eos][eos_pos]
    n_targets = n_frames + eos_pos.sum()
    kl_term = ((kl * fm).sum() + eos_nll.sum()) / n_targets.clamp_min(1.0)

    # reconstruction through a single sample z_t ~ q
    z = torch.multinomial(q.detach().reshape(-1, cb.k).float(), 1, generator=rng).view(q.shape[:-1])
    h_frames = _gather_frames(h, batch)
    x_hat = model.specnet_predict(h_frames, z, codewords, gmel_dropout, rng, zero_codeword)
    x_hat = x_hat * fm.unsqueeze(-1)
    post = model.postnet_refine(x_hat, frame_mask, train=train)
    recon = reconstruction_mse(x, x_hat, post, frame_mask)
    slow = slowness_penalty(x_hat, frame_mask)

    vlb = kl_weight * kl_term + recon
    total = vlb + slow_weight * slow
    ent = (entropy(q) * fm).sum() / n_frames.clamp_min(1.0)
    return LossReport(
        vlb_total=vlb.item(), kl_term=kl_term.item(), reconstruction_mse=recon.item(),
        entropy_q=ent.item(), slowness=slow.item(), weighted_total=total.item(),
        n_frames=int(n_frames), n_targets=int(n_targets), mode="tts", loss=total,
    )


def stt_loss(batch, model, rng: torch.Generator | None = None, train: bool = True) -> LossReport:
    logits = model.forward_latent_logits(batch, train=train, gmel_dropout=False, rng=rng)
    mask = batch.target_ids != -100
    targets = torch.where(mask, batch.target_ids, torch.zeros_like(batch.target_ids))
    ce = nx.cross_entropy(logits, targets, mask)
    return LossReport(
        stt_ce=ce.item(), weighted_total=ce.item(), n_targets=int(mask.sum()), mode="stt", loss=ce
    )


def task_loss(batch, model, cb, rng=None, slow_weight=0.2, kl_weight=1.0, train=True, gmel_dropout=True):
    if batch.mode == "tts":
        return tts_loss(batch, model, cb, rng, slow_weight, kl_weight, train, gmel_dropout)
    if batch.mode == "stt":
        return stt_loss(batch, model, rng, train)
    raise ValueError("a batch must hold a single mode")


# -- enumerable toy instances -------------------------------------------------


def toy_vlb(q, log_p, x, means, post_means) -> float:
    """VLB (nats) of one frame under p(x|k) = N(x; means_k, I) N(x; post_means_k, I)."""
    q = np.asarray(q, dtype=np.float64)
    nll = np.array([gaussian_nll(x, m) + gaussian_nll(x, pm) for m, pm in zip(means, post_means)])
    kl = float(kl_q_p(torch.tensor(q), torch.tensor(np.asarray(log_p, dtype=np.float64))))
    return kl + float(q @ nll)


def toy_neg_log_marginal(log_p, x, means, post_means) -> float:
    """-log sum_k p(k) p(x|k) by enumeration over k."""
    terms = np.array(
        [lp - gaussian_nll(x, m) - gaussian_nll(x, pm) for lp, m, pm in zip(log_p, means, post_means)]
    )
    top = terms.max()
    return float(-(top + np.log(np.exp(terms - top).sum())))
