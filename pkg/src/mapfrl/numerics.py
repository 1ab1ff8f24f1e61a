"""Dense layer library for the policy network.

Layer math is written out here; reverse-mode differentiation is delegated to
torch autograd, and :func:`grad_check` compares it against central finite
differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

GRU_GATE_BIAS = 2.0


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def softmax(x: torch.Tensor, dim: int = -1, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Max-shifted softmax; ``mask`` False entries get exactly zero weight."""
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    x = x - x.amax(dim=dim, keepdim=True)
    e = torch.exp(x)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    x = x - x.amax(dim=dim, keepdim=True)
    return x - torch.log(torch.exp(x).sum(dim=dim, keepdim=True))


def dense(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    y = x @ weight.transpose(0, 1)
    return y if bias is None else y + bias


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Stride-1 convolution with size-preserving zero padding (odd kernels)."""
    return F.conv2d(x, weight, bias, padding=weight.shape[-1] // 2)


def maxpool2d(x: torch.Tensor, size: int = 2) -> torch.Tensor:
    return F.max_pool2d(x, size)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def lstm_cell(x, h, c, w_ih, w_hh, bias) -> Tuple[torch.Tensor, torch.Tensor]:
    """One LSTM step; gate order (input, forget, cell, output)."""
    gates = dense(x, w_ih) + dense(h, w_hh) + bias
    i, f, g, o = gates.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def gru_gate(x, y, w_r, u_r, w_z, u_z, w_h, u_h, b_g) -> torch.Tensor:
    """GRU-style gate replacing a residual connection.

    ``x`` is the sublayer input (treated as the hidden state), ``y`` the
    sublayer output.  A positive ``b_g`` starts the gate near the identity.
    """
    if x.shape != y.shape:
        raise ValueError(f"gru_gate shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    r = torch.sigmoid(dense(y, w_r) + dense(x, u_r))
    z = torch.sigmoid(dense(y, w_z) + dense(x, u_z) - b_g)
    h = torch.tanh(dense(y, w_h) + dense(r * x, u_h))
    return (1 - z) * x + z * h


def multihead_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    n_heads: int,
    d_k: int,
    mask: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over the agent axis.

    x: (..., n, dm); w_q/w_k/w_v: (n_heads*d_k, dm); w_o: (dm, n_heads*d_k);
    mask: (..., n, n) bool, True where agent i may read agent j.
    """
    *lead, n, _ = x.shape

    def split(t):
        return t.reshape(*lead, n, n_heads, d_k).transpose(-3, -2)  # (..., h, n, d_k)

    q, k, v = split(dense(x, w_q)), split(dense(x, w_k)), split(dense(x, w_v))
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_k)
    alpha = softmax(logits, dim=-1, mask=None if mask is None else mask.unsqueeze(-3))
    heads = (alpha @ v).transpose(-3, -2).reshape(*lead, n, n_heads * d_k)
    out = dense(heads, w_o)
    return (out, alpha) if return_weights else out


def sinusoidal_embedding(ids: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer position encoding evaluated at integer ``ids``."""
    ids = ids.to(torch.float64).unsqueeze(-1)
    half = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    pe = torch.zeros(*ids.shape[:-1], dim, dtype=torch.float64)
    pe[..., 0::2] = torch.sin(ids * freq)
    pe[..., 1::2] = torch.cos(ids * freq)[..., : dim // 2]
    return pe


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

def _uniform(shape, fan_in: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound))


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = _uniform((d_out, d_in), d_in)
        self.bias = _uniform((d_out,), d_in) if bias else None

    def forward(self, x):
        return dense(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = _uniform((c_out, c_in, kernel, kernel), fan_in)
        self.bias = _uniform((c_out,), fan_in)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class LSTMCell(nn.Module):
    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.w_ih = _uniform((4 * d_hidden, d_in), d_hidden)
        self.w_hh = _uniform((4 * d_hidden, d_hidden), d_hidden)
        self.bias = _uniform((4 * d_hidden,), d_hidden)

    def forward(self, x, h, c):
        return lstm_cell(x, h, c, self.w_ih, self.w_hh, self.bias)


class GRUGate(nn.Module):
    def __init__(self, dim: int, gate_bias: float = GRU_GATE_BIAS):
        super().__init__()
        for name in ("w_r", "u_r", "w_z", "u_z", "w_h", "u_h"):
            setattr(self, name, _uniform((dim, dim), dim))
        self.b_g = nn.Parameter(torch.full((dim,), float(gate_bias)))

    def forward(self, x, y):
        return gru_gate(x, y, self.w_r, self.u_r, self.w_z, self.u_z, self.w_h, self.u_h, self.b_g)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_k: int):
        super().__init__()
        self.n_heads, self.d_k = n_heads, d_k
        inner = n_heads * d_k
        self.w_q = _uniform((inner, d_model), d_model)
        self.w_k = _uniform((inner, d_model), d_model)
        self.w_v = _uniform((inner, d_model), d_model)
        self.w_o = _uniform((d_model, inner), inner)

    def forward(self, x, mask=None, return_weights=False):
        return multihead_attention(
            x, self.w_q, self.w_k, self.w_v, self.w_o, self.n_heads, self.d_k, mask, return_weights
        )


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    errors: Dict[str, float] = field(default_factory=dict)

    def __str__(self):
        return f"max relative error {self.max_rel_error:.3e} at {self.worst!r}"


def grad_check(
    fn: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
    inputs: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd gradients of scalar ``fn(inputs)`` with central differences.

    The error of a tensor is ``max |g_ad - g_fd| / max(max |g_ad|, max |g_fd|)``
    over the checked entries; ``max_entries`` samples that many entries per
    tensor.  Inputs are promoted to float64.
    """
    params = {k: v.detach().to(torch.float64).clone() for k, v in inputs.items()}
    leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    loss = fn(leaves)
    if loss.numel() != 1:
        raise ValueError("grad_check needs a scalar function")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    analytic = {k: (torch.zeros_like(params[k]) if g is None else g.detach()) for k, g in zip(names, grads)}

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    with torch.no_grad():
        for k in names:
            flat = params[k].view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            ad = analytic[k].view(-1)[idx].numpy()
            fd = np.empty(len(idx))
            for n, j in enumerate(idx):
                old = flat[j].item()
                flat[j] = old + h
                up = fn(params).item()
                flat[j] = old - h
                down = fn(params).item()
                flat[j] = old
                fd[n] = (up - down) / (2 * h)
            scale = max(np.abs(ad).max(initial=0.0), np.abs(fd).max(initial=0.0))
            errors[k] = 0.0 if scale == 0 else float(np.abs(ad - fd).max() / scale)
    worst = max(errors, key=errors.get) if errors else ""
    return GradCheckResult(errors.get(worst, 0.0), worst, errors)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MAPFRLCK"
CHECKPOINT_VERSION = 1
_DTYPES = {b"f": ("<f4", torch.float32), b"d": ("<f8", torch.float64)}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, params: Mapping[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """Binary layout: magic, u32 version, u32 meta length + JSON, u32 count,
    then per tensor: u16 name length, name, dtype byte, u8 ndim, u32 dims, raw LE values."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        t = t.detach().cpu()
        code = b"d" if t.dtype == torch.float64 else b"f"
        arr = t.numpy().astype(_DTYPES[code][0])
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + code + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, meta_len = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    off += 8
    meta = json.loads(data[off: off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off: off + name_len].decode()
        off += name_len
        np_dtype, _ = _DTYPES[data[off: off + 1]]
        (ndim,) = struct.unpack_from("<B", data, off + 1)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(data, dtype=np_dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        params[name] = torch.from_numpy(arr.copy())
    return params, meta
