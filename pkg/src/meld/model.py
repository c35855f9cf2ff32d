"""Decoder-only transformer over interleaved text tokens and mel frames.

Pieces:

* ``g_text``: lookup table for text ids and the three special ids.
* ``g_mel``: 3-layer MLP (GELU then dropout after every layer). It embeds
  input frames and, inside SpecNet, the sampled codeword ``c_z``.
* pre-norm causal transformer trunk producing ``h``.
* ``head``: linear map from ``h`` to logits over the whole unified vocabulary.
* SpecNet: ``x_hat = Linear(u) + MLP(u)`` with ``u = h + g_mel(c_z)``.
* postnet: 3 same-padded conv layers with batch norm, tanh on all but the
  last; it predicts the residual ``conv(x_hat)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from . import numerics as nx
from .errors import CheckpointError, ConfigError, ShapeError
from .tokenizer import UnifiedVocab


@dataclass(frozen=True)
class ModelConfig:
    v_text: int = 320
    k_latent: int = 32
    d_mel_in: int = 80
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ffn: int = 256
    dropout: float = 0.1
    gmel_dropout: float = 0.5
    max_seq_len: int = 512
    postnet_channels: int = 64
    postnet_kernel: int = 5
    postnet_layers: int = 3
    bn_momentum: float = 0.1

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"model.d_model={self.d_model} is not divisible by model.n_heads={self.n_heads}"
            )
        for name in ("v_text", "k_latent", "d_mel_in", "n_layers", "n_heads", "d_ffn", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        for name in ("dropout", "gmel_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"model.{name} must be in [0, 1)")
        if self.postnet_kernel % 2 != 1 or self.postnet_layers < 1:
            raise ConfigError("postnet needs an odd kernel width and at least one layer")
        return self

    @property
    def vocab(self) -> UnifiedVocab:
        return UnifiedVocab(self.v_text, self.k_latent)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe


class MelEncoder(nn.Module):
    def __init__(self, d_in: int, d_model: int, rate: float):
        super().__init__()
        self.layers = nn.ModuleList(
            [nn.Linear(d_in, d_model), nn.Linear(d_model, d_model), nn.Linear(d_model, d_model)]
        )
        self.rate = rate

    def forward(self, x, dropout_on: bool = False, rng=None):
        for layer in self.layers:
            x = nx.dropout(nx.gelu(layer(x)), self.rate, rng, dropout_on)
        return x


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.d_ffn)
        self.ff2 = nn.Linear(cfg.d_ffn, d)
        self.rate = cfg.dropout

    def attention(self, x):
        b, n, d = x.shape
        dh = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.view(b, n, self.n_heads, dh).transpose(1, 2) for t in (q, k, v))
        scores = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
        future = torch.ones(n, n, dtype=torch.bool).triu(1)
        att = nx.softmax(nx.masked_fill(scores, future, float("-inf")), axis=-1)
        out = nx.matmul(att, v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)

    def forward(self, x, dropout_on=False, rng=None):
        ln1 = nx.layer_norm(x, self.ln1.weight, self.ln1.bias)
        x = x + nx.dropout(self.attention(ln1), self.rate, rng, dropout_on)
        ln2 = nx.layer_norm(x, self.ln2.weight, self.ln2.bias)
        hidden = nx.dropout(nx.gelu(self.ff1(ln2)), self.rate, rng, dropout_on)
        return x + nx.dropout(self.ff2(hidden), self.rate, rng, dropout_on)


class SpecNet(nn.Module):
    def __init__(self, d_model: int, d_mel: int):
        super().__init__()
        self.linear = nn.Linear(d_model, d_mel)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, d_model), nn.GELU(), nn.Linear(d_model, d_model), nn.GELU(), nn.Linear(d_model, d_mel)
        )

    def forward(self, u):
        return self.linear(u) + self.mlp(u)


class Postnet(nn.Module):
    def __init__(self, d_mel: int, channels: int, kernel: int, n_layers: int, momentum: float):
        super().__init__()
        widths = [d_mel] + [channels] * (n_layers - 1) + [d_mel]
        self.convs = nn.ModuleList(
            [nn.Conv1d(widths[i], widths[i + 1], kernel) for i in range(n_layers)]
        )
        self.bn_weight = nn.ParameterList([nn.Parameter(torch.ones(w)) for w in widths[1:]])
        self.bn_bias = nn.ParameterList([nn.Parameter(torch.zeros(w)) for w in widths[1:]])
        for i, w in enumerate(widths[1:]):
            self.register_buffer(f"running_mean_{i}", torch.zeros(w))
            self.register_buffer(f"running_var_{i}", torch.ones(w))
        self.momentum = momentum

    @property
    def receptive_field(self) -> int:
        return sum(c.kernel_size[0] - 1 for c in self.convs) + 1

    def forward(self, x, mask=None, train: bool = False):
        """``x`` is (B, T, D); returns the residual conv(x) with the same shape."""
        y = x.transpose(1, 2)
        if mask is not None:
            y = y * mask[:, None, :].to(y.dtype)
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            y = nx.conv1d(y, conv.weight, conv.bias)
            y = nx.batch_norm_1d(
                y, self.bn_weight[i], self.bn_bias[i],
                getattr(self, f"running_mean_{i}"), getattr(self, f"running_var_{i}"),
                train=train, mask=mask, momentum=self.momentum,
            )
            if i < last:
                y = nx.tanh(y)
            if mask is not None:
                y = y * mask[:, None, :].to(y.dtype)
        return y.transpose(1, 2)


class MeldModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.vocab = cfg.vocab
        d = cfg.d_model
        self.g_text = nn.Embedding(cfg.v_text + 3, d)
        self.g_mel = MelEncoder(cfg.d_mel_in, d, cfg.gmel_dropout)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, self.vocab.total)
        self.specnet = SpecNet(d, cfg.d_mel_in)
        self.postnet = Postnet(cfg.d_mel_in, cfg.postnet_channels, cfg.postnet_kernel, cfg.postnet_layers, cfg.bn_momentum)
        self.register_buffer("pos_table", sinusoidal_positions(cfg.max_seq_len, d).float(), persistent=False)
        nn.init.normal_(self.g_text.weight, std=0.02)

    # -- embedding ------------------------------------------------------------

    def text_rows(self, ids: torch.Tensor) -> torch.Tensor:
        """Map unified ids (text or special) to rows of the text table."""
        v = self.vocab
        if ids.numel() and bool(((ids >= v.v_text) & (ids < v.id_tts)).any()):
            raise ValueError("latent ids are never embedded through the text table")
        return torch.where(ids >= v.id_tts, ids - v.k_latent, ids)

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return nx.embedding_lookup(self.g_text.weight, self.text_rows(ids))

    def encode_mel(self, frames: torch.Tensor, dropout_on: bool = False, rng=None) -> torch.Tensor:
        if frames.shape[-1] != self.cfg.d_mel_in:
            raise ShapeError(f"frame dim {frames.shape[-1]} != d_mel_in {self.cfg.d_mel_in}")
        return self.g_mel(frames, dropout_on, rng)

    def add_positions(self, emb: torch.Tensor) -> torch.Tensor:
        n = emb.shape[-2]
        if n > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len {self.cfg.max_seq_len}")
        return emb + self.pos_table[:n].to(emb.dtype)

    def embed_sequence(self, batch, gmel_dropout: bool = False, rng=None) -> torch.Tensor:
        """(B, L, d_model) input embeddings including positions."""
        ids = torch.where(batch.is_frame, torch.zeros_like(batch.input_ids), batch.input_ids)
        tok = self.embed_ids(ids)
        mel = self.encode_mel(batch.input_frames.to(tok.dtype), gmel_dropout, rng)
        emb = torch.where(batch.is_frame.unsqueeze(-1), mel, tok)
        return self.add_positions(emb)

    # -- trunk and heads ------------------------------------------------------

    def trunk(self, emb: torch.Tensor, dropout_on: bool = False, rng=None) -> torch.Tensor:
        x = nx.dropout(emb, self.cfg.dropout, rng, dropout_on)
        for block in self.blocks:
            x = block(x, dropout_on, rng)
        return nx.layer_norm(x, self.ln_f.weight, self.ln_f.bias)

    def forward_hidden(self, batch, train: bool = False, gmel_dropout: bool = False, rng=None):
        return self.trunk(self.embed_sequence(batch, gmel_dropout, rng), train, rng)

    def forward_latent_logits(self, batch, train: bool = False, gmel_dropout: bool = False, rng=None):
        """Logits over the unified vocabulary at every position, (B, L, |V|)."""
        return self.head(self.forward_hidden(batch, train, gmel_dropout, rng))

    def codeword_embedding(self, z, codewords: torch.Tensor, dropout_on=False, rng=None, zero_codeword=False):
        z = torch.as_tensor(z)
        if z.numel() and (int(z.min()) < 0 or int(z.max()) >= codewords.shape[0]):
            raise ValueError(f"latent index outside [0, {codewords.shape[0]})")
        cz = codewords[z]
        if zero_codeword:
            cz = torch.zeros_like(cz)
        return self.encode_mel(cz, dropout_on, rng)

    def specnet_predict(self, h, z, codewords, dropout_on=False, rng=None, zero_codeword=False):
        """``x_hat = SpecNet(h + g_mel(c_z))``; ``zero_codeword`` replaces c_z by 0."""
        u = h + self.codeword_embedding(z, codewords.to(h.dtype), dropout_on, rng, zero_codeword)
        return self.specnet(u)

    def postnet_refine(self, x_hat, mask=None, train: bool = False):
        return self.postnet(x_hat, mask, train)

    def param_groups(self) -> dict:
        """Parameter names grouped by component, for isolation checks."""
        groups = {"specnet": [], "postnet": [], "g_mel": [], "g_text": [], "trunk": [], "head": []}
        for name, _ in self.named_parameters():
            key = name.split(".")[0]
            if key in ("blocks", "ln_f"):
                key = "trunk"
            groups[key].append(name)
        return groups


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, model: MeldModel, adam: nx.AdamState | None = None, meta: dict | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in model.named_parameters()}
    tensors.update({f"buffer/{k}": v for k, v in model.named_buffers() if k != "pos_table"})
    if adam is not None:
        tensors.update({f"adam_m/{k}": v for k, v in adam.exp_avg.items()})
        tensors.update({f"adam_v/{k}": v for k, v in adam.exp_avg_sq.items()})
    info = dict(meta or {})
    info.update(
        model_config=model.cfg.to_dict(),
        config_hash=model.cfg.digest(),
        adam_step=adam.step if adam is not None else None,
        dtype=str(next(model.parameters()).dtype).replace("torch.", ""),
    )
    nx.save_tensors(path, tensors, info)


def load_checkpoint(path, expected_hash: str | None = None):
    """Returns ``(model, adam_state_or_None, meta)``."""
    tensors, meta = nx.load_tensors(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    if cfg.digest() != meta.get("config_hash"):
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected_hash is not None and expected_hash != meta["config_hash"]:
        raise CheckpointError(
            f"{path}: config hash {meta['config_hash']} does not match expected {expected_hash}"
        )
    model = MeldModel(cfg)
    if meta.get("dtype") == "float64":
        model = model.double()
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    with torch.no_grad():
        for key, t in tensors.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                params[name].copy_(t)
            elif kind == "buffer":
                buffers[name].copy_(t)
    adam = None
    if meta.get("adam_step") is not None:
        adam = nx.AdamState(step=meta["adam_step"])
        for key, t in tensors.items():
            kind, name = key.split("/", 1)
            if kind == "adam_m":
                adam.exp_avg[name] = t.clone()
            elif kind == "adam_v":
                adam.exp_avg_sq[name] = t.clone()
    return model, adam, meta
