"""Autoregressive generation: zero-shot TTS continuation and beam-search STT."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import numerics as nx
from .codebook import Codebook
from .errors import ConfigError, EmptyInputError
from .model import MeldModel


@dataclass(frozen=True)
class GenerationConfig:
    mode: str = "tts"
    top_k: int = 60
    top_p: float = 0.9
    repetition_penalty_on: bool = True
    rep_penalty_value: float = -1.0
    max_frames: int = 200
    beam_size: int = 5
    max_text_tokens: int = 64
    test_time_gmel_dropout: bool = True
    ablate_zero_codeword: bool = False
    prompt_fraction: float = 0.25
    min_prompt_frames: int = 4
    seed: int = 0

    def validate(self) -> "GenerationConfig":
        if self.mode not in ("tts", "stt"):
            raise ConfigError("generation.mode must be tts or stt")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("generation.top_p must be in (0, 1]")
        if self.top_k < 1 or self.max_frames < 1 or self.beam_size < 1:
            raise ConfigError("generation.top_k, max_frames and beam_size must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationTrace:
    sampled_ids: list = field(default_factory=list)
    candidate_sets: list = field(default_factory=list)
    logits_summary: list = field(default_factory=list)
    termination: str = ""
    n_frames: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- sampling controls --------------------------------------------------------


def filter_top_k_top_p(logits, k: int, p: float):
    """Keep the ``k`` largest logits, then the shortest prefix (descending
    probability, lower index first on ties) whose renormalized mass reaches
    ``p``. Returns ``(probs, candidates)`` with ``probs`` zero off the set."""
    x = np.asarray(logits, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(x.size), -x))[: max(1, min(k, x.size))]
    kept = x[order]
    w = np.exp(kept - kept.max())
    probs_sorted = w / w.sum()
    cum = np.cumsum(probs_sorted)
    reach = np.flatnonzero(cum >= p)
    n = int(reach[0]) + 1 if reach.size else order.size
    chosen = order[:n]
    probs = np.zeros_like(x)
    probs[chosen] = probs_sorted[:n] / probs_sorted[:n].sum()
    return probs, sorted(int(i) for i in chosen)


def apply_repetition_penalty(logits, previous_candidates, penalty: float = -1.0, exempt=()):
    """Add ``penalty`` to every previous-step candidate except ``exempt`` ids."""
    out = np.array(logits, dtype=np.float64, copy=True)
    for i in previous_candidates:
        if i not in exempt:
            out[i] += penalty
    return out


def prompt_length(n_frames: int, cfg: GenerationConfig) -> int:
    return min(n_frames, max(cfg.min_prompt_frames, int(math.floor(cfg.prompt_fraction * n_frames))))


# -- TTS ----------------------------------------------------------------------


@torch.no_grad()
def generate_tts(model: MeldModel, cb: Codebook, text_tokens, prompt_frames, cfg: GenerationConfig):
    """Continue ``prompt_frames`` (normalized) given the full transcript tokens.

    Returns ``(continuation, trace)`` where ``continuation`` is ``x_hat +
    conv(x_hat)`` for the generated frames only, shape (T', D).
    """
    cfg.validate()
    vocab = model.vocab
    text = torch.as_tensor(np.asarray(text_tokens, dtype=np.int64))
    if text.numel() == 0:
        raise EmptyInputError("text prompt is empty")
    dtype = next(model.parameters()).dtype
    prompt = torch.as_tensor(np.asarray(prompt_frames), dtype=dtype).reshape(-1, model.cfg.d_mel_in)
    prefix = text.numel() + 1 + prompt.shape[0]
    if prefix >= model.cfg.max_seq_len:
        raise ValueError(f"prompt of {prefix} positions leaves no room under max_seq_len {model.cfg.max_seq_len}")
    budget = min(cfg.max_frames, model.cfg.max_seq_len - prefix)

    g = nx.make_generator(cfg.seed)
    drop = cfg.test_time_gmel_dropout
    codewords = cb.as_tensor(dtype)
    parts = [model.embed_ids(torch.cat([text, torch.tensor([vocab.id_tts])]))]
    if prompt.shape[0]:
        parts.append(model.encode_mel(prompt, drop, g))
    emb = torch.cat(parts, dim=0)

    allowed = list(vocab.latent_range) + [vocab.id_eos]
    eos_slot = len(allowed) - 1
    trace = GenerationTrace()
    frames, prev = [], []
    for _ in range(budget):
        h = model.trunk(model.add_positions(emb)[None], False)[0, -1]
        logits = model.head(h)[allowed].double().numpy()
        if cfg.repetition_penalty_on and prev:
            logits = apply_repetition_penalty(logits, prev, cfg.rep_penalty_value, exempt=(eos_slot,))
        probs, cands = filter_top_k_top_p(logits, cfg.top_k, cfg.top_p)
        slot = int(torch.multinomial(torch.from_numpy(probs), 1, generator=g))
        trace.candidate_sets.append([allowed[i] for i in cands])
        trace.logits_summary.append({"max": float(logits.max()), "eos_prob": float(probs[eos_slot]), "n_candidates": len(cands)})
        trace.sampled_ids.append(allowed[slot])
        if slot == eos_slot:
            trace.termination = "eos"
            break
        x_hat = model.specnet_predict(h, torch.tensor(slot), codewords, drop, g, cfg.ablate_zero_codeword)
        frames.append(x_hat)
        emb = torch.cat([emb, model.encode_mel(x_hat[None], drop, g)], dim=0)
        prev = cands
    else:
        trace.termination = "max_frames"
    trace.n_frames = len(frames)
    if not frames:
        return np.zeros((0, model.cfg.d_mel_in)), trace
    x_hat = torch.stack(frames)[None]
    refined = x_hat + model.postnet_refine(x_hat, train=False)
    return refined[0].double().numpy(), trace


def regeneration_mse(generated, reference) -> float:
    """Squared error per reference element, missing frames on either side taken
    as the corpus-mean frame (zero in normalized space)."""
    gen, ref = np.asarray(generated, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    n, d = max(gen.shape[0], ref.shape[0]), ref.shape[1]
    a, b = np.zeros((n, d)), np.zeros((n, d))
    a[: gen.shape[0]], b[: ref.shape[0]] = gen, ref
    return float(((a - b) ** 2).sum() / (ref.shape[0] * d))


def mean_frame_baseline(reference) -> float:
    return regeneration_mse(np.zeros((0, np.asarray(reference).shape[1])), reference)


def regenerate(model, cb, example, cfg: GenerationConfig):
    """Prompt with the head of a training utterance and continue it.

    Returns ``(continuation, reference_tail, trace)``."""
    n_prompt = prompt_length(example.frames.shape[0], cfg)
    cont, trace = generate_tts(model, cb, example.tokens, example.frames[:n_prompt], cfg)
    return cont, example.frames[n_prompt:], trace


# -- STT ----------------------------------------------------------------------


@dataclass
class BeamHypothesis:
    tokens: list
    logprob: float
    finished: bool = False

    @property
    def score(self) -> float:
        return self.logprob / max(1, len(self.tokens))


@torch.no_grad()
def transcribe_beam(model: MeldModel, mel_frames, beam_size: int = 5, max_tokens: int = 64) -> BeamHypothesis:
    """Length-normalized beam search over text ids and ``<EOS>``.

    The returned hypothesis includes the trailing ``<EOS>`` when it finished.
    """
    frames = np.asarray(mel_frames)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError("mel input is empty")
    vocab = model.vocab
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(frames, dtype=dtype)
    prefix = torch.cat([model.encode_mel(x, False), model.embed_ids(torch.tensor([vocab.id_stt]))], dim=0)
    max_tokens = min(max_tokens, model.cfg.max_seq_len - prefix.shape[0])
    allowed = torch.tensor(list(vocab.text_range) + [vocab.id_eos])

    alive = [BeamHypothesis([], 0.0)]
    done: list[BeamHypothesis] = []
    for step in range(max_tokens):
        seqs = []
        for hyp in alive:
            ids = torch.tensor(hyp.tokens, dtype=torch.int64)
            seqs.append(torch.cat([prefix, model.embed_ids(ids)], dim=0) if hyp.tokens else prefix)
        h = model.trunk(model.add_positions(torch.stack(seqs)), False)[:, -1]
        logp = torch.log_softmax(model.head(h)[:, allowed].double(), dim=-1)
        pool = []
        for b, hyp in enumerate(alive):
            top = torch.topk(logp[b], min(beam_size, allowed.numel()))
            for lp, j in zip(top.values.tolist(), top.indices.tolist()):
                tok = int(allowed[j])
                pool.append(BeamHypothesis(hyp.tokens + [tok], hyp.logprob + lp, tok == vocab.id_eos))
        pool.sort(key=lambda hp: -hp.logprob)
        alive = []
        for hyp in pool[:beam_size]:
            (done if hyp.finished else alive).append(hyp)
        if not alive or len(done) >= beam_size:
            break
    done.extend(alive)
    return max(done, key=lambda hp: hp.score)


def hypothesis_text(hyp: BeamHypothesis, bpe, vocab) -> str:
    # an undertrained model can stop mid-character; show U+FFFD rather than fail
    return bpe.decode_bytes([t for t in hyp.tokens if vocab.is_text(t)]).decode("utf-8", errors="replace")


def transcribe(model, bpe, mel_frames, beam_size: int = 5, max_tokens: int = 64) -> str:
    return hypothesis_text(transcribe_beam(model, mel_frames, beam_size, max_tokens), bpe, model.vocab)


# -- reporting ----------------------------------------------------------------


def duration_report(traces, frame_rate_hz: float = 62.5) -> dict:
    if not traces:
        raise EmptyInputError("duration_report needs at least one trace")
    frames = sum(t.n_frames for t in traces)
    seconds = frames / frame_rate_hz
    return {
        "total_frames": frames,
        "total_seconds": seconds,
        "total_minutes": seconds / 60.0,
        "termination": dict(Counter(t.termination for t in traces)),
    }
