"""CNN encoder, spatial self-attention block, GAP and LSTM pose regressor.

Frames come in as ``(B, N+1, 3, H, W)``; consecutive frames are stacked on the
channel axis into ``N`` six-channel pairs, each pair is encoded to a feature
map, optionally refined by self-attention, pooled to a motion vector and fed
through a two-layer LSTM whose outputs a small head maps to twists.
"""

from dataclasses import asdict, dataclass, field
import logging
import math
import os

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidArgumentError, NumericError, ShapeError

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1
MIN_IMAGE_SIDE = 64


@dataclass
class EncoderConfig:
    kernel_sizes: list = field(default_factory=lambda: [7, 5, 5, 3, 3, 3, 3, 3, 3, 3])
    strides: list = field(default_factory=lambda: [2, 2, 2, 1, 2, 1, 2, 1, 2, 1])
    channels: list = field(
        default_factory=lambda: [64, 128, 256, 256, 512, 512, 512, 512, 1024, 1024]
    )
    input_channels: int = 6

    def validate(self):
        if not (len(self.kernel_sizes) == len(self.strides) == len(self.channels) == 10):
            raise InvalidArgumentError("encoder needs exactly 10 kernel sizes, strides and channels")
        if list(self.kernel_sizes[:3]) != [7, 5, 5] or list(self.strides[:3]) != [2, 2, 2]:
            raise InvalidArgumentError("first three stages must be 7/5/5 kernels with stride 2")
        for i, s in enumerate(self.strides[3:]):
            if s != (1 if i % 2 == 0 else 2):
                raise InvalidArgumentError("strides after stage 3 must alternate 1, 2")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise InvalidArgumentError("kernel sizes must be odd for same padding")

    def output_shape(self, height, width):
        """Spatial size after all stages (same padding, ceil for stride 2)."""
        for s in self.strides:
            height = -(-height // s)
            width = -(-width // s)
        return self.channels[-1], height, width


@dataclass
class AttentionConfig:
    d_in: int = 1024
    d_k: int = 128
    d_v: int = 128
    heads: int = 1
    gamma_init: float = 0.0

    def validate(self):
        if self.d_k <= 0 or self.d_v <= 0 or self.d_in <= 0:
            raise InvalidArgumentError("attention dimensions must be positive")
        if self.heads < 1:
            raise InvalidArgumentError("heads must be >= 1")
        if self.d_k % self.heads or self.d_v % self.heads:
            raise InvalidArgumentError("d_k and d_v must be divisible by heads")


@dataclass
class NetworkConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    attention_enabled: bool = True
    hidden_size: int = 1024
    lstm_layers: int = 2
    # 2 = affine -> leaky -> affine, 1 = single affine layer
    head_layers: int = 2
    head_hidden: int = 128

    @classmethod
    def desk(cls, width_divisor=8, hidden_size=128, d_k=16, attention_enabled=True):
        """Scaled-down variant for CPU experiments and tests."""
        enc = EncoderConfig()
        enc.channels = [max(1, c // width_divisor) for c in enc.channels]
        att = AttentionConfig(d_in=enc.channels[-1], d_k=d_k, d_v=d_k)
        return cls(encoder=enc, attention=att, attention_enabled=attention_enabled,
                   hidden_size=hidden_size)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        att = AttentionConfig(**d.pop("attention", {}))
        return cls(encoder=enc, attention=att, **d)


@dataclass
class AttentionInternals:
    Q: torch.Tensor
    K: torch.Tensor
    V: torch.Tensor
    attention: torch.Tensor  # (heads, n, n), rows sum to one
    O: torch.Tensor
    W_q: torch.Tensor
    W_k: torch.Tensor
    W_v: torch.Tensor
    W_o: torch.Tensor
    gamma: torch.Tensor


def self_attention(x, W_q, W_k, W_v, W_o, gamma, heads=1, return_internals=False):
    """Residual spatial self-attention on a feature map.

    Args:
        x: ``(C, H, W)`` or ``(B, C, H, W)`` feature map.
        W_q, W_k: ``(d_k, C)`` projections; W_v: ``(d_v, C)``; W_o: ``(C, d_v)``.
        gamma: scalar residual gain.
        heads: number of heads; d_k and d_v are split evenly.

    Returns:
        Output with the same shape as ``x``, plus an ``AttentionInternals`` when
        ``return_internals`` is set (tensors carry the batch axis).
    """
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W) feature map, got {tuple(x.shape)}")
    b, c, h, w = x.shape
    n = h * w
    d_k, d_v = W_q.shape[0], W_v.shape[0]
    X = x.reshape(b, c, n)
    Q = W_q @ X
    K = W_k @ X
    V = W_v @ X
    dk_h, dv_h = d_k // heads, d_v // heads
    Qh = Q.reshape(b, heads, dk_h, n)
    Kh = K.reshape(b, heads, dk_h, n)
    Vh = V.reshape(b, heads, dv_h, n)
    logits = Qh.transpose(-1, -2) @ Kh / math.sqrt(dk_h)
    lam = torch.softmax(logits, dim=-1)
    # per head: lam @ V^T is (n, dv_h); transpose back to (dv_h, n) and concat heads
    O = (lam @ Vh.transpose(-1, -2)).transpose(-1, -2).reshape(b, d_v, n)
    out = X + gamma * (W_o @ O)
    if not torch.isfinite(out).all():
        raise NumericError("non-finite activations in self-attention block output")
    out = out.reshape(b, c, h, w)
    if unbatched:
        out = out[0]
    if return_internals:
        internals = AttentionInternals(Q, K, V, lam, O, W_q, W_k, W_v, W_o, gamma)
        return out, internals
    return out


class SelfAttentionBlock(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.W_q = nn.Parameter(torch.empty(cfg.d_k, cfg.d_in))
        self.W_k = nn.Parameter(torch.empty(cfg.d_k, cfg.d_in))
        self.W_v = nn.Parameter(torch.empty(cfg.d_v, cfg.d_in))
        self.W_o = nn.Parameter(torch.empty(cfg.d_in, cfg.d_v))
        self.gamma = nn.Parameter(torch.tensor(float(cfg.gamma_init)))
        self.reset_parameters()

    def reset_parameters(self):
        for W in (self.W_q, self.W_k, self.W_v, self.W_o):
            nn.init.normal_(W, std=1.0 / math.sqrt(W.shape[1]))
        with torch.no_grad():
            self.gamma.fill_(self.cfg.gamma_init)

    def forward(self, x, return_internals=False):
        return self_attention(x, self.W_q, self.W_k, self.W_v, self.W_o, self.gamma,
                              heads=self.cfg.heads, return_internals=return_internals)


def global_average_pool(x):
    """Spatial mean per channel: ``(..., C, H, W) -> (..., C)``."""
    if x.dim() < 3:
        raise InvalidArgumentError(f"feature map needs (C, H, W) axes, got {tuple(x.shape)}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise InvalidArgumentError("feature map has empty spatial extent")
    return x.mean(dim=(-2, -1))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers = []
        c_in = cfg.input_channels
        for i, (k, s, c) in enumerate(zip(cfg.kernel_sizes, cfg.strides, cfg.channels)):
            conv = nn.Conv2d(c_in, c, kernel_size=k, stride=s, padding=k // 2)
            self.add_module(f"conv{i + 1}", conv)
            layers.append(conv)
            c_in = c
        self.n_stages = len(layers)
        self.reset_parameters()

    def convs(self):
        return [getattr(self, f"conv{i + 1}") for i in range(self.n_stages)]

    def reset_parameters(self):
        for conv in self.convs():
            nn.init.kaiming_normal_(conv.weight, a=LEAKY_SLOPE, mode="fan_in",
                                    nonlinearity="leaky_relu")
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeError(
                f"encoder expects (B, {self.cfg.input_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-2] < MIN_IMAGE_SIDE or x.shape[-1] < MIN_IMAGE_SIDE:
            raise ShapeError(f"image {tuple(x.shape[-2:])} smaller than {MIN_IMAGE_SIDE}px")
        for conv in self.convs():
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
        return x


class PoseHead(nn.Module):
    def __init__(self, in_features, layers=2, hidden=128):
        super().__init__()
        if layers not in (1, 2):
            raise InvalidArgumentError("pose head supports 1 or 2 layers")
        if layers == 2:
            self.net = nn.Sequential(nn.Linear(in_features, hidden), nn.LeakyReLU(LEAKY_SLOPE),
                                     nn.Linear(hidden, 6))
        else:
            self.net = nn.Sequential(nn.Linear(in_features, 6))

    def forward(self, h):
        return self.net(h)


class TemporalModel(nn.Module):
    """Stacked LSTM plus pose head, stateful across calls."""

    def __init__(self, input_size, hidden_size=1024, layers=2, head_layers=2, head_hidden=128):
        super().__init__()
        self.hidden_size = hidden_size
        self.layers = layers
        self.lstm = nn.LSTM(input_size, hidden_size, num_layers=layers, batch_first=True)
        self.head = PoseHead(hidden_size, head_layers, head_hidden)

    def forward(self, motions, state=None):
        """``motions``: (B, N, C) or (N, C). Returns twists and the new (h, c) state."""
        unbatched = motions.dim() == 2
        if unbatched:
            motions = motions.unsqueeze(0)
        if motions.shape[1] == 0:
            raise InvalidArgumentError("temporal model needs a nonempty sequence")
        if state is not None:
            expected = (self.layers, motions.shape[0], self.hidden_size)
            if tuple(state[0].shape) != expected or tuple(state[1].shape) != expected:
                raise InvalidArgumentError(
                    f"recurrent state shape {tuple(state[0].shape)} != {expected}")
        out, state = self.lstm(motions, state)
        twists = self.head(out)
        if unbatched:
            twists = twists[0]
        return twists, state


class VisualOdometryNet(nn.Module):
    def __init__(self, cfg: NetworkConfig = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        c = cfg.encoder.channels[-1]
        if cfg.attention_enabled:
            if cfg.attention.d_in != c:
                raise InvalidArgumentError(
                    f"attention d_in={cfg.attention.d_in} != encoder channels {c}")
            self.attention = SelfAttentionBlock(cfg.attention)
        else:
            self.attention = None
        self.temporal = TemporalModel(c, cfg.hidden_size, cfg.lstm_layers, cfg.head_layers,
                                      cfg.head_hidden)

    @property
    def attention_enabled(self):
        return self.attention is not None

    def encode_pairs(self, pairs, return_internals=False):
        """(M, 6, H, W) stacked pairs -> (M, C) motion vectors."""
        feats = self.encoder(pairs)
        internals = None
        if self.attention is not None:
            if return_internals:
                feats, internals = self.attention(feats, return_internals=True)
            else:
                feats = self.attention(feats)
        motions = global_average_pool(feats)
        return (motions, internals) if return_internals else motions

    def forward(self, frames, state=None, return_internals=False):
        """Predict ``N`` twists for ``N+1`` frames.

        Args:
            frames: ``(B, N+1, 3, H, W)`` or ``(N+1, 3, H, W)``.
            state: LSTM ``(h, c)`` carried from a previous window, or None.

        Returns:
            ``(twists, state)`` with twists ``(B, N, 6)``; with ``return_internals``
            a third element holds the attention internals over all ``B*N`` pairs.
        """
        unbatched = frames.dim() == 4
        if unbatched:
            frames = frames.unsqueeze(0)
        if frames.dim() != 5 or frames.shape[2] != 3:
            raise ShapeError(f"expected (B, N+1, 3, H, W) frames, got {tuple(frames.shape)}")
        b, n1 = frames.shape[:2]
        if n1 < 2:
            raise InvalidArgumentError("a window needs at least 2 frames")
        pairs = torch.cat([frames[:, :-1], frames[:, 1:]], dim=2)
        pairs = pairs.reshape(b * (n1 - 1), 6, *frames.shape[-2:])
        if return_internals:
            motions, internals = self.encode_pairs(pairs, return_internals=True)
        else:
            motions = self.encode_pairs(pairs)
        motions = motions.reshape(b, n1 - 1, -1)
        twists, state = self.temporal(motions, state)
        if unbatched:
            twists = twists[0]
        if return_internals:
            return twists, state, internals
        return twists, state


def parameter_count(model):
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: NetworkConfig, seed=None):
    """Construct a model with per-submodule seeding.

    Shared submodules get identical weights whether or not attention is
    enabled, so the ablation pair starts from the same point.
    """
    if seed is None:
        return VisualOdometryNet(cfg)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VisualOdometryNet(cfg)
        for i, part in enumerate(("encoder", "attention", "temporal")):
            torch.manual_seed(seed * 1000 + i)
            module = getattr(model, part)
            if module is None:
                continue
            if hasattr(module, "reset_parameters"):
                module.reset_parameters()
            if part == "temporal":
                for sub in module.modules():
                    if sub is not module and hasattr(sub, "reset_parameters"):
                        sub.reset_parameters()
    return model


# ---------------------------------------------------------------------------
# pretrained encoder weights: flat npz archive of little-endian float32 arrays
# keyed "encoder.conv{1..10}.weight" / "encoder.conv{1..10}.bias"


def encoder_weight_keys(n_stages=10):
    keys = []
    for i in range(1, n_stages + 1):
        keys += [f"encoder.conv{i}.weight", f"encoder.conv{i}.bias"]
    return keys


def save_encoder_weights(model, path):
    arrays = {}
    for key in encoder_weight_keys(model.encoder.n_stages):
        _, conv, name = key.split(".")
        t = getattr(getattr(model.encoder, conv), name)
        arrays[key] = t.detach().cpu().numpy().astype("<f4")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_encoder_weights(model, path):
    """Copy encoder weights from an archive; returns False if the file is absent."""
    if not path or not os.path.exists(path):
        log.warning("no pretrained encoder archive at %s; keeping random init", path)
        return False
    with np.load(path) as archive:
        for key in encoder_weight_keys(model.encoder.n_stages):
            if key not in archive:
                raise InvalidArgumentError(f"{path}: missing key {key}")
            _, conv, name = key.split(".")
            target = getattr(getattr(model.encoder, conv), name)
            arr = archive[key]
            if tuple(arr.shape) != tuple(target.shape):
                raise ShapeError(f"{key}: archive shape {arr.shape} != model {tuple(target.shape)}")
            with torch.no_grad():
                target.copy_(torch.from_numpy(arr.astype(np.float32)))
    return True
