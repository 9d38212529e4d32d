"""Convolution, attention, and partial self-attention building blocks.

Everything here is a plain record of Tensors plus a forward function; there
is no module/graph machinery. Parameters are created by the init_* helpers
and updated in place by an optimizer.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


# ---------------------------------------------------------------------------
# conv + batchnorm unit
# ---------------------------------------------------------------------------

class BatchNorm:
    """Per-channel affine normalization state."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            eps=self.eps, momentum=self.momentum, training=training,
        )


class ConvUnit:
    """Convolution followed by optional batch norm and activation.

    A unit with batch norm carries no conv bias: the bias would be cancelled
    by the normalization and is folded into beta instead.
    """

    def __init__(
        self,
        weight: Tensor,
        bias: Optional[Tensor] = None,
        bn: Optional[BatchNorm] = None,
        act: str = "none",
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
    ):
        if bn is not None and bias is not None:
            raise ValueError("conv bias is redundant under batch norm")
        if act not in ("none", "silu"):
            raise ValueError(f"unknown activation {act!r}")
        if bn is not None and bn.gamma.shape[0] != weight.shape[0]:
            raise ValueError(
                f"norm channels {bn.gamma.shape[0]} do not match Cout={weight.shape[0]}"
            )
        self.weight = weight
        self.bias = bias
        self.bn = bn
        self.act = act
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, stride=self.stride,
                     padding=self.padding, groups=self.groups)
        if self.bn is not None:
            y = self.bn(y, training=training)
        if self.act == "silu":
            y = y.silu()
        return y

    def named_tensors(self, prefix: str) -> list:
        out = [(prefix + ".weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + ".bias", self.bias))
        if self.bn is not None:
            out += [
                (prefix + ".bn.gamma", self.bn.gamma),
                (prefix + ".bn.beta", self.bn.beta),
                (prefix + ".bn.running_mean", self.bn.running_mean),
                (prefix + ".bn.running_var", self.bn.running_var),
            ]
        return out


def init_conv_unit(
    cin: int,
    cout: int,
    kernel: int,
    rng: np.random.Generator,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    norm: bool = True,
    act: str = "none",
    bias: bool = False,
) -> ConvUnit:
    """Build a ConvUnit with uniform(-a, a) weights, a = sqrt(6 / fan_in)."""
    if cin % groups or cout % groups:
        raise ValueError(f"channels not divisible by groups: Cin={cin} Cout={cout} g={groups}")
    fan_in = (cin // groups) * kernel * kernel
    a = math.sqrt(6.0 / fan_in)
    w = Tensor(rng.uniform(-a, a, size=(cout, cin // groups, kernel, kernel)),
               requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True) if bias else None
    bn = BatchNorm(cout) if norm else None
    return ConvUnit(w, bias=b, bn=bn, act=act, stride=stride, padding=padding,
                    groups=groups)


# ---------------------------------------------------------------------------
# attention block
# ---------------------------------------------------------------------------

def heads_from_channels(channels: int) -> int:
    """Head count from channel width: one head per 64 channels, at least one."""
    if channels < 1:
        raise ValueError(f"channels must be positive, got {channels}")
    m = max(1, channels // 64)
    if channels % m:
        raise ValueError(f"channels {channels} not divisible by {m} heads")
    return m


@dataclass(frozen=True)
class AttentionConfig:
    """Width arithmetic for one multi-head attention block."""

    channels: int
    num_heads: int
    attn_ratio: float = 0.5
    head_dim: int = field(init=False)
    key_dim: int = field(init=False)

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.channels % self.num_heads:
            raise ValueError(
                f"channels {self.channels} not divisible by {self.num_heads} heads"
            )
        if not 0.0 < self.attn_ratio <= 1.0:
            raise ValueError(f"attn_ratio must be in (0, 1], got {self.attn_ratio}")
        d = self.channels // self.num_heads
        # round half up, floored at 1, so fractional ratios stay usable
        kd = max(1, int(math.floor(d * self.attn_ratio + 0.5)))
        object.__setattr__(self, "head_dim", d)
        object.__setattr__(self, "key_dim", kd)


class AttentionParams:
    """Parameters for one attention block.

    qkv: 1x1 conv C -> M*(2*key_dim + head_dim), batch norm, no activation.
    pe:  depthwise 3x3 over C channels with bias, no norm, no activation.
    proj: 1x1 conv C -> C, batch norm, no activation.
    """

    def __init__(self, config: AttentionConfig, qkv: ConvUnit, pe: ConvUnit,
                 proj: ConvUnit):
        self.config = config
        self.qkv = qkv
        self.pe = pe
        self.proj = proj

    def named_tensors(self, prefix: str = "attn") -> list:
        return (self.qkv.named_tensors(prefix + ".qkv")
                + self.pe.named_tensors(prefix + ".pe")
                + self.proj.named_tensors(prefix + ".proj"))


def init_attention_params(config: AttentionConfig,
                          rng: np.random.Generator) -> AttentionParams:
    c = config.channels
    qkv_out = config.num_heads * (2 * config.key_dim + config.head_dim)
    qkv = init_conv_unit(c, qkv_out, 1, rng, norm=True, act="none")
    pe = init_conv_unit(c, c, 3, rng, padding=1, groups=c, norm=False,
                        act="none", bias=True)
    proj = init_conv_unit(c, c, 1, rng, norm=True, act="none")
    return AttentionParams(config, qkv, pe, proj)


def qkv_project(x: Tensor, p: AttentionParams, training: bool = False):
    """Project input to per-head query, key, and value sequences.

    Returns (Q, K, V) shaped (B, M, key_dim, N), (B, M, key_dim, N),
    (B, M, head_dim, N) where N = H*W.
    """
    cfg = p.config
    b, c, h, w = x.shape
    if c != cfg.channels:
        raise ValueError(f"input has {c} channels, config expects {cfg.channels}")
    n = h * w
    y = p.qkv(x, training=training)
    y = y.reshape(b, cfg.num_heads, 2 * cfg.key_dim + cfg.head_dim, n)
    q, k, v = T.split(y, (cfg.key_dim, cfg.key_dim, cfg.head_dim), axis=2)
    return q, k, v


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, config: AttentionConfig,
                     return_weights: bool = False):
    """Attend over positions: softmax(Q^T K / sqrt(key_dim)) applied to V.

    Output column n is a convex combination of V's columns weighted by
    softmax row n. With return_weights, also returns the (B, M, N, N)
    weight matrix.
    """
    if q.shape != k.shape:
        raise ValueError(f"query shape {q.shape} does not match key shape {k.shape}")
    if v.shape[:2] != q.shape[:2] or v.shape[3] != q.shape[3]:
        raise ValueError(f"value shape {v.shape} inconsistent with query {q.shape}")
    scale = 1.0 / math.sqrt(config.key_dim)
    scores = T.mul_scalar(T.matmul(q.permute(0, 1, 3, 2), k), scale)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(v, weights.permute(0, 1, 3, 2))
    if return_weights:
        return out, weights
    return out


def attention_block_forward(x: Tensor, p: AttentionParams,
                            training: bool = False) -> Tensor:
    """Full attention block: attended values plus positional conv, projected."""
    cfg = p.config
    b, c, h, w = x.shape
    if cfg.num_heads * cfg.head_dim != c:
        raise ValueError(
            f"heads*head_dim = {cfg.num_heads * cfg.head_dim} does not match C={c}"
        )
    q, k, v = qkv_project(x, p, training=training)
    att = scaled_attention(q, k, v, cfg).reshape(b, c, h, w)
    pos = p.pe(v.reshape(b, c, h, w), training=training)
    return p.proj(att + pos, training=training)


# ---------------------------------------------------------------------------
# partial self-attention block
# ---------------------------------------------------------------------------

class PsaParams:
    """Parameters for one partial self-attention block over C channels.

    entry/exit: 1x1 C -> C with norm and SiLU. The branch width is C/2;
    attention and a two-layer feed-forward (C/2 -> C -> C/2) each add a
    residual onto the second half before the halves are re-joined.
    """

    def __init__(self, channels: int, entry: ConvUnit, attention: AttentionParams,
                 ffn1: ConvUnit, ffn2: ConvUnit, exit_unit: ConvUnit):
        self.channels = channels
        self.entry = entry
        self.attention = attention
        self.ffn1 = ffn1
        self.ffn2 = ffn2
        self.exit_unit = exit_unit

    def named_tensors(self, prefix: str = "psa") -> list:
        return (self.entry.named_tensors(prefix + ".entry")
                + self.attention.named_tensors(prefix + ".attn")
                + self.ffn1.named_tensors(prefix + ".ffn1")
                + self.ffn2.named_tensors(prefix + ".ffn2")
                + self.exit_unit.named_tensors(prefix + ".exit"))


def init_psa_params(channels: int, attn_ratio: float,
                    rng: np.random.Generator) -> PsaParams:
    if channels % 2:
        raise ValueError(f"channel count must be even, got {channels}")
    half = channels // 2
    cfg = AttentionConfig(half, heads_from_channels(half), attn_ratio)
    entry = init_conv_unit(channels, channels, 1, rng, norm=True, act="silu")
    attention = init_attention_params(cfg, rng)
    ffn1 = init_conv_unit(half, channels, 1, rng, norm=True, act="silu")
    ffn2 = init_conv_unit(channels, half, 1, rng, norm=True, act="none")
    exit_unit = init_conv_unit(channels, channels, 1, rng, norm=True, act="silu")
    return PsaParams(channels, entry, attention, ffn1, ffn2, exit_unit)


def psa_forward(x: Tensor, p: PsaParams, training: bool = False) -> Tensor:
    """Split-and-attend: one half passes through, the other gains attention."""
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"channel count must be even, got {c}")
    if c != p.channels:
        raise ValueError(f"input has {c} channels, params expect {p.channels}")
    t = p.entry(x, training=training)
    a, b = T.split(t, (c // 2, c // 2), axis=1)
    b = b + attention_block_forward(b, p.attention, training=training)
    b = b + p.ffn2(p.ffn1(b, training=training), training=training)
    return p.exit_unit(T.concat((a, b), axis=1), training=training)


# ---------------------------------------------------------------------------
# flat binary parameter container
# ---------------------------------------------------------------------------

_MAGIC = b"PVD1"


def write_tensors(path, named: Sequence, sidecar_extra: Optional[dict] = None) -> None:
    """Write named tensors to a flat binary container plus a JSON sidecar.

    Layout: magic "PVD1", little-endian u32 tensor count, then per tensor a
    u32 rank, u32 dims, and raw little-endian float64 values. The sidecar at
    <path>.json lists tensor roles in file order.
    """
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(named)))
        for _, t in named:
            arr = np.ascontiguousarray(np.asarray(t.data, dtype="<f8"))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    meta = {"tensors": [name for name, _ in named]}
    if sidecar_extra:
        meta.update(sidecar_extra)
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def read_tensors(path):
    """Read a tensor container written by write_tensors.

    Returns (list of (name, ndarray), sidecar dict).
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    names = meta["tensors"]
    off = 4
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    if count != len(names):
        raise ValueError(f"container holds {count} tensors, sidecar names {len(names)}")
    out = []
    for i in range(count):
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out.append((names[i], arr.astype(np.float64)))
    if off != len(raw):
        raise ValueError(f"trailing bytes: file has {len(raw)}, parsed {off}")
    return out, meta


def assign_tensors(named_params: Sequence, named_values: Sequence) -> None:
    """Copy loaded arrays into parameter tensors, matching by position and name."""
    if len(named_params) != len(named_values):
        raise ValueError(
            f"parameter count {len(named_params)} != stored count {len(named_values)}"
        )
    for (pname, t), (vname, arr) in zip(named_params, named_values):
        if pname != vname:
            raise ValueError(f"tensor role mismatch: {pname!r} vs stored {vname!r}")
        if t.shape != arr.shape:
            raise ValueError(f"{pname}: shape {t.shape} != stored {arr.shape}")
        t.data[...] = arr


def trainable(named: Sequence) -> list:
    """Trainable tensors from a named list (running statistics excluded)."""
    return [t for name, t in named if not name.endswith(("running_mean", "running_var"))]
