"""Encoder-Process-Decoder convolutional network, Adam, EMA and checkpoints.

Tensors are channel-last: ``(batch, *spatial, channels)``. Every layer is a
periodic convolution (see :mod:`spectral_hybrid.kernels`), so the network is
exactly translation-equivariant on the grid.

Layout, with ``C`` the hidden width::

    encoder   conv k=5 (in -> C), ReLU
    block     h = x; for each dilation d: h = conv k=3 dilated by d (C -> C),
              ReLU between convs; x = ReLU(x + h)
    decoder   conv k=5 (C -> out), no activation
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad

INIT_TRUNCATION = 2.0


@dataclass(frozen=True)
class EpdConfig:
    ndim: int = 1
    in_channels: int = 1
    out_channels: int = 1
    channels: int = 128
    encoder_kernel: int = 5
    process_kernel: int = 3
    decoder_kernel: int = 5
    blocks: tuple = ((1, 1, 1), (1, 1, 1), (1, 1, 1))
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(d) for d in b) for b in self.blocks))
        if self.ndim not in (1, 2):
            raise ValueError("ndim must be 1 or 2")
        if min(self.in_channels, self.out_channels, self.channels) < 1:
            raise ValueError("channel counts must be positive")
        for k in (self.encoder_kernel, self.process_kernel, self.decoder_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        if any(len(b) == 0 or min(b) < 1 for b in self.blocks):
            raise ValueError("every block needs at least one dilation >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def for_1d(cls, in_channels=1, out_channels=1, channels=128, **kw):
        return cls(1, in_channels, out_channels, channels, **kw)

    @classmethod
    def for_2d(cls, in_channels=2, out_channels=1, channels=64, blocks=((1, 2), (1, 2)), **kw):
        return cls(2, in_channels, out_channels, channels, blocks=blocks, **kw)

    def check_grid(self, n: int) -> None:
        widest = max(max(b) * (self.process_kernel - 1) for b in self.blocks)
        widest = max(widest, self.encoder_kernel - 1, self.decoder_kernel - 1)
        if widest >= n:
            raise ValueError(f"dilation too large for grid: receptive span {widest} >= {n}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpdConfig":
        return cls(**d)


def layer_shapes(cfg: EpdConfig) -> dict:
    """Name -> shape for every parameter, in a fixed order."""
    nd, c = cfg.ndim, cfg.channels
    shapes = {
        "encoder/w": (cfg.encoder_kernel,) * nd + (cfg.in_channels, c),
        "encoder/b": (c,),
    }
    for i, block in enumerate(cfg.blocks):
        for j, _ in enumerate(block):
            shapes[f"block{i}/conv{j}/w"] = (cfg.process_kernel,) * nd + (c, c)
            shapes[f"block{i}/conv{j}/b"] = (c,)
    shapes["decoder/w"] = (cfg.decoder_kernel,) * nd + (c, cfg.out_channels)
    shapes["decoder/b"] = (cfg.out_channels,)
    return shapes


def parameter_count(cfg: EpdConfig) -> int:
    return int(sum(np.prod(s) for s in layer_shapes(cfg).values()))


def init_params(cfg: EpdConfig, seed: int) -> dict:
    """Zero biases; weights truncated-normal with std 1/sqrt(fan_in), cut at 2 std."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith("/b"):
            params[name] = np.zeros(shape, dtype=cfg.dtype)
            continue
        std = 1.0 / np.sqrt(np.prod(shape[:-1]))
        w = truncnorm.rvs(-INIT_TRUNCATION, INIT_TRUNCATION, scale=std, size=shape, random_state=rng)
        params[name] = w.astype(cfg.dtype)
    return params


def zeros_like_params(cfg: EpdConfig) -> dict:
    return {k: np.zeros(s, dtype=cfg.dtype) for k, s in layer_shapes(cfg).items()}


def periodic_conv(x, w, dilation: int = 1, b=None):
    out = ad.conv(x, w, dilation)
    return out if b is None else out + b


def epd_forward(params: dict, cfg: EpdConfig, x):
    """Channel-last input ``(batch, *grid, in_channels)`` -> ``(batch, *grid, out_channels)``."""
    shape = ad.value(x).shape
    if len(shape) != cfg.ndim + 2 or shape[-1] != cfg.in_channels:
        raise ValueError(
            f"shape mismatch: expected (batch, *grid[{cfg.ndim}], {cfg.in_channels}), got {shape}")
    cfg.check_grid(min(shape[1:-1]))
    x = ad.astype(x, cfg.dtype)
    h = ad.relu(periodic_conv(x, params["encoder/w"], 1, params["encoder/b"]))
    for i, block in enumerate(cfg.blocks):
        r = h
        for j, d in enumerate(block):
            if j:
                r = ad.relu(r)
            r = periodic_conv(r, params[f"block{i}/conv{j}/w"], d, params[f"block{i}/conv{j}/b"])
        h = ad.relu(h + r)
    return periodic_conv(h, params["decoder/w"], 1, params["decoder/b"])


# -- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_update(state: AdamState, params: dict, grads: dict):
    """One bias-corrected Adam step; returns new ``(params, state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[k] = (p - step).astype(p.dtype)
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, replace(state, step=t, m=new_m, v=new_v)


def ema_update(ema: dict, params: dict, decay: float = 0.98) -> dict:
    return {k: (decay * ema[k] + (1 - decay) * params[k]).astype(params[k].dtype) for k in params}


# -- checkpoints --------------------------------------------------------------
#
# File layout (all integers little-endian):
#   8 bytes   magic b"SHCKPT01"
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header, sorted keys; "arrays" lists name/dtype/shape/offset/nbytes
#   ...       raw array bytes, C order, little-endian, concatenated in header order
#   32 bytes  sha256 of everything above

CKPT_MAGIC = b"SHCKPT01"


def save_checkpoint(path, arrays: dict, header: dict) -> str:
    """Write a checkpoint; returns the hex sha256 trailer."""
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "arrays": index}, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(body + digest)
    return digest.hex()


def load_checkpoint(path):
    """Return ``(header, arrays)``; raises ValueError on a corrupt or foreign file."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checkpoint checksum mismatch")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16:16 + hlen].decode())
    base = 16 + hlen
    arrays = {}
    for e in header.pop("arrays"):
        start = base + e["offset"]
        a = np.frombuffer(body[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return header, arrays
