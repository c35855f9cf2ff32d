"""Differentiable primitives, Adam, and the named-tensor snapshot container.

Forward values and reverse-mode gradients come from torch autograd. This
module pins down the behaviour the rest of the package relies on: explicit
random generators for dropout, masked batch statistics, a one-shot
``backward``, a hand-written Adam update, and a central finite-difference
oracle used to check gradients in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, ShapeError

TENSOR_MAGIC = b"MELT"
TENSOR_VERSION = 1

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "bool": torch.bool,
}
_NP_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "bool": "|b1"}


def set_deterministic(seed: int | None = None, threads: int = 1) -> None:
    """Single-worker, bit-reproducible mode used by tests and ``--deterministic`` runs."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


def make_generator(*seed_parts: int) -> torch.Generator:
    """Generator seeded from a tuple of integers, e.g. ``(run_seed, step)``."""
    seq = np.random.SeedSequence([int(s) & 0xFFFFFFFF for s in seed_parts])
    g = torch.Generator()
    g.manual_seed(int(seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF))
    return g


# -- primitives ---------------------------------------------------------------


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def tanh(x):
    return torch.tanh(x)


def gelu(x):
    return F.gelu(x)


def softmax(x, axis: int = -1):
    return torch.softmax(x, dim=axis)


def log_softmax(x, axis: int = -1):
    return torch.log_softmax(x, dim=axis)


def layer_norm(x, weight, bias, eps: float = 1e-5):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def dropout(x, rate: float, generator: torch.Generator | None = None, train: bool = True):
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = torch.bernoulli(torch.full(x.shape, keep, dtype=x.dtype), generator=generator)
    return x * mask / keep


def embedding_lookup(table, ids):
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return F.embedding(ids, table)


def conv1d(x, weight, bias=None):
    """``x`` is (B, C_in, T); odd kernel width, symmetric zero padding keeps length."""
    width = weight.shape[-1]
    if width % 2 != 1:
        raise ShapeError("same-padding conv1d needs an odd kernel width")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d channels {x.shape[1]} != weight {weight.shape[1]}")
    return F.conv1d(x, weight, bias, padding=width // 2)


def batch_norm_1d(
    x,
    weight,
    bias,
    running_mean=None,
    running_var=None,
    train: bool = True,
    mask=None,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Batch norm over (B, C, T); ``mask`` (B, T) marks frames that count toward
    the batch statistics. Running statistics are used when ``train`` is false."""
    if train:
        if mask is None:
            mask = torch.ones(x.shape[0], x.shape[2], dtype=torch.bool)
        m = mask.to(x.dtype).unsqueeze(1)
        n = m.sum().clamp_min(1.0)
        mean = (x * m).sum(dim=(0, 2)) / n
        var = (((x - mean[None, :, None]) ** 2) * m).sum(dim=(0, 2)) / n
        if running_mean is not None:
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(momentum * mean.detach().to(running_mean.dtype))
                running_var.mul_(1 - momentum).add_(momentum * var.detach().to(running_var.dtype))
    else:
        mean, var = running_mean, running_var
    y = (x - mean[None, :, None]) / torch.sqrt(var[None, :, None] + eps)
    return y * weight[None, :, None] + bias[None, :, None]


def mse(a, b, mask=None):
    """Mean over unmasked rows of the per-row squared L2 distance."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = ((a - b) ** 2).sum(-1)
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype)
    return (sq * m).sum() / m.sum().clamp_min(1.0)


def cross_entropy(logits, target, mask=None):
    """Mean cross-entropy; ``target`` is class indices (hard) or a distribution (soft)."""
    logp = torch.log_softmax(logits, dim=-1)
    if target.dtype in (torch.int64, torch.int32):
        per = -logp.gather(-1, target.long().unsqueeze(-1)).squeeze(-1)
    else:
        if target.shape != logits.shape:
            raise ShapeError("soft targets must match the logits shape")
        per = -(target * logp).sum(-1)
    if mask is None:
        return per.mean()
    m = mask.to(per.dtype)
    return (per * m).sum() / m.sum().clamp_min(1.0)


def masked_fill(x, mask, value):
    return x.masked_fill(mask, value)


def concat(xs, axis: int = 0):
    return torch.cat(list(xs), dim=axis)


def slice_(x, start: int, stop: int, axis: int = 0):
    return x.narrow(axis, start, stop - start)


# -- gradients ----------------------------------------------------------------


def backward(loss: torch.Tensor) -> None:
    """Reverse accumulation from a scalar. A graph may be consumed only once."""
    if loss.dim() != 0:
        raise ShapeError("backward needs a scalar loss")
    if getattr(loss, "_meld_consumed", False):
        raise RuntimeError("backward called twice on the same forward graph")
    loss.backward()
    loss._meld_consumed = True


def finite_difference_grad(fn, param: torch.Tensor, indices, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``param.flatten()[i]``."""
    out = []
    flat = param.data.view(-1)
    with torch.no_grad():
        for i in indices:
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn())
            flat[i] = orig - step
            lo = float(fn())
            flat[i] = orig
            out.append((hi - lo) / (2 * step))
    return np.array(out)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def global_grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad.double() ** 2).sum())
    return sq**0.5


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad.mul_(scale)
    return norm


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adam_step(named_params, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """Adam with bias correction, applied in place to every parameter with a gradient."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m / c1, denom, value=-lr)


# -- snapshot container -------------------------------------------------------


def _dtype_name(t: torch.Tensor) -> str:
    for name, dt in _DTYPES.items():
        if t.dtype == dt:
            return name
    raise CheckpointError(f"unsupported dtype {t.dtype}")


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """``MELT`` | version u32 | manifest length u64 | manifest JSON | raw payload."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        dname = _dtype_name(t)
        blob = t.numpy().astype(_NP_DTYPES[dname], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dname, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC + struct.pack("<IQ", TENSOR_VERSION, len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_tensors(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise CheckpointError(f"{path}: not a tensor container")
    version, n = struct.unpack("<IQ", raw[4:16])
    if version != TENSOR_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    manifest = json.loads(raw[16 : 16 + n])
    base = 16 + n
    out = {}
    for e in manifest["tensors"]:
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_NP_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        out[e["name"]] = torch.from_numpy(arr).to(_DTYPES[e["dtype"]])
    return out, manifest.get("meta", {})
