"""Dual-head CRNN: shared conv + Bi-GRU trunk, SED head, occurrence/overlap head.

Everything runs in float64 on CPU. torch provides the layers and
reverse-mode gradients; initialization, the optimizer, and the warmup
schedule are implemented here so training is bit-reproducible from a seed.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

_CKPT_MAGIC = b"SEDCKPT1"


@dataclass(frozen=True)
class ArchConfig:
    n_mels: int = 64
    n_classes: int = 9
    sod_classes: int = 4
    conv_channels: tuple[int, ...] = (16, 32, 64)
    freq_pools: tuple[int, ...] = (4, 4, 4)
    gru_layers: int = 1
    gru_hidden: int = 32

    def __post_init__(self):
        if len(self.conv_channels) < 1 or len(self.conv_channels) != len(self.freq_pools):
            raise ValueError("need >= 1 conv block with matching freq_pools")
        if self.gru_hidden < 1 or self.gru_layers < 1:
            raise ValueError("gru_hidden and gru_layers must be positive")
        if self.sod_classes != 4:
            raise ValueError("occurrence/overlap head is a 4-way classifier")
        f = self.n_mels
        for p in self.freq_pools:
            if p < 1 or f % p != 0:
                raise ValueError(f"freq pool {p} does not divide mel axis {f}")
            f //= p

    @property
    def reduced_mels(self) -> int:
        f = self.n_mels
        for p in self.freq_pools:
            f //= p
        return f

    @property
    def gru_input(self) -> int:
        return self.conv_channels[-1] * self.reduced_mels

    @property
    def embedding_dim(self) -> int:
        return 2 * self.gru_hidden

    def to_dict(self) -> dict:
        return {
            "n_mels": self.n_mels, "n_classes": self.n_classes,
            "sod_classes": self.sod_classes,
            "conv_channels": list(self.conv_channels),
            "freq_pools": list(self.freq_pools),
            "gru_layers": self.gru_layers, "gru_hidden": self.gru_hidden,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        return ArchConfig(
            n_mels=d["n_mels"], n_classes=d["n_classes"],
            sod_classes=d["sod_classes"],
            conv_channels=tuple(d["conv_channels"]),
            freq_pools=tuple(d["freq_pools"]),
            gru_layers=d["gru_layers"], gru_hidden=d["gru_hidden"],
        )


@dataclass
class ForwardOutput:
    sed_logits: torch.Tensor   # (T, C) or (B, T, C)
    sod_logits: torch.Tensor   # (T, 4) or (B, T, 4)
    embeddings: torch.Tensor   # (T, D) or (B, T, D)


class ConvBlock(nn.Module):
    """3x3 conv, learned per-channel scale/shift (no batch statistics),
    ReLU, frequency-only max pool. Time resolution is preserved."""

    def __init__(self, in_ch: int, out_ch: int, freq_pool: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.scale = nn.Parameter(torch.ones(out_ch))
        self.shift = nn.Parameter(torch.zeros(out_ch))
        self.pool = nn.MaxPool2d((1, freq_pool))

    def forward(self, x):
        x = self.conv(x)
        x = x * self.scale[None, :, None, None] + self.shift[None, :, None, None]
        return self.pool(torch.relu(x))


class CRNN(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        blocks, in_ch = [], 1
        for ch, p in zip(arch.conv_channels, arch.freq_pools):
            blocks.append(ConvBlock(in_ch, ch, p))
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.gru = nn.GRU(arch.gru_input, arch.gru_hidden,
                          num_layers=arch.gru_layers,
                          batch_first=True, bidirectional=True)
        self.sed_head = nn.Linear(arch.embedding_dim, arch.n_classes)
        self.sod_head = nn.Linear(arch.embedding_dim, arch.sod_classes)
        self.double()

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        """x: (B, T, F) or (T, F) feature matrix; logits keep the time axis."""
        single = x.dim() == 2
        if single:
            x = x[None]
        if x.shape[-1] != self.arch.n_mels:
            raise ValueError(f"expected {self.arch.n_mels} mel bins, got {x.shape[-1]}")
        h = x[:, None]                      # (B, 1, T, F)
        for block in self.blocks:
            h = block(h)
        b, ch, t, f = h.shape
        h = h.permute(0, 2, 1, 3).reshape(b, t, ch * f)
        emb, _ = self.gru(h)                # (B, T, D)
        out = ForwardOutput(self.sed_head(emb), self.sod_head(emb), emb)
        if single:
            out = ForwardOutput(out.sed_logits[0], out.sod_logits[0], out.embeddings[0])
        return out


def init_params(arch: ArchConfig, seed: int) -> CRNN:
    """Deterministic init: fan-in-scaled uniform weights, zero biases,
    identity scale/shift."""
    model = CRNN(arch)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".scale"):
                p.fill_(1.0)
            elif name.endswith(".shift") or "bias" in name:
                p.zero_()
            else:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 2 else 1)
                # uniform on [-sqrt(3/fan_in), sqrt(3/fan_in)] has variance 1/fan_in
                bound = math.sqrt(3.0 / fan_in)
                p.uniform_(-bound, bound, generator=gen)
    return model


def param_vector(model: CRNN) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).numpy()


def load_param_vector(model: CRNN, vec: np.ndarray) -> None:
    vec = torch.as_tensor(np.array(vec, dtype=np.float64))
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(vec[offset:offset + n].reshape(p.shape))
            offset += n
    if offset != len(vec):
        raise ValueError(f"parameter vector length {len(vec)} != model size {offset}")


def save_checkpoint(path, model: CRNN) -> None:
    """Versioned container: magic, JSON arch header, flat float64 parameters
    in declaration order."""
    header = json.dumps(model.arch.to_dict(), sort_keys=True).encode()
    vec = param_vector(model)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<q", len(vec)))
        fh.write(vec.astype("<f8").tobytes())


def load_checkpoint(path) -> CRNN:
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<q", fh.read(8))
        arch = ArchConfig.from_dict(json.loads(fh.read(hlen).decode()))
        (n,) = struct.unpack("<q", fh.read(8))
        vec = np.frombuffer(fh.read(8 * n), dtype="<f8")
    model = CRNN(arch)
    load_param_vector(model, vec)
    return model


# ---------------------------------------------------------------------------
# optimizer and schedule

class Adam:
    """Adam with bias correction. Raises on non-finite gradients so a
    diverged run halts loudly instead of poisoning the parameters."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.step_count = 0

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if not torch.isfinite(g).all():
                raise FloatingPointError("non-finite gradient in Adam step")
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt() + self.eps, value=-lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def warmup_lr(epoch: int, base_lr: float = 1e-3, warmup_epochs: int = 50) -> float:
    """Exponential ramp exp(-5*(1 - e/warmup)^2) up to base_lr."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch >= warmup_epochs:
        return base_lr
    frac = epoch / warmup_epochs
    return base_lr * math.exp(-5.0 * (1.0 - frac) ** 2)
