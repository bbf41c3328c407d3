"""Visual and semantic feature extractors at desk scale.

The visual encoder is trainable and comes in two reference architectures:
a narrow 4-block convnet and a tiny tanh MLP. The semantic encoder is frozen:
either a lookup over precomputed description vectors or a deterministic
hash-based toy text encoder, both followed by a fixed projection into the
visual embedding dimension so cosine similarities are well defined.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteError, ShapeMismatchError, UnknownArchitectureError

_DTYPE = torch.float64

ARCHITECTURES = ("reference-conv4-small", "mlp-tiny")

_TOKEN_SALT = b"protoalign-tok"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass
class EncoderConfig:
    architecture: str = "reference-conv4-small"
    input_shape: tuple = (16, 16, 1)
    conv_widths: tuple = (8, 16, 32, 64)
    mlp_hidden: int = 32
    output_dim: int = 64  # honored by mlp-tiny; the convnet derives its own

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_widths = tuple(int(v) for v in self.conv_widths)
        if len(self.input_shape) != 3 or any(v <= 0 for v in self.input_shape):
            raise ValueError(f"bad input_shape {self.input_shape}")
        if len(self.conv_widths) != 4 or any(v <= 0 for v in self.conv_widths):
            raise ValueError(f"need 4 positive conv widths, got {self.conv_widths}")
        if self.mlp_hidden <= 0 or self.output_dim <= 0:
            raise ValueError("mlp_hidden and output_dim must be positive")


class VisualEncoder(nn.Module):
    """Trainable image embedding module with shape metadata."""

    def __init__(self, architecture: str, input_shape: tuple, net: nn.Module, output_dim: int):
        super().__init__()
        self.architecture = architecture
        self.input_shape = tuple(input_shape)
        self.net = net
        self.output_dim = output_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _fill_normal(tensor: torch.Tensor, std: float, generator: torch.Generator):
    with torch.no_grad():
        tensor.copy_(torch.randn(tensor.shape, generator=generator, dtype=_DTYPE) * std)


def _init_weights(module: nn.Module, generator: torch.Generator, gain_mode: str):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            _fill_normal(m.weight, (2.0 / fan_in) ** 0.5, generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            fan_in, fan_out = m.in_features, m.out_features
            if gain_mode == "tanh":
                std = (2.0 / (fan_in + fan_out)) ** 0.5
            else:
                std = (2.0 / fan_in) ** 0.5
            _fill_normal(m.weight, std, generator)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _conv4_net(config: EncoderConfig) -> tuple[nn.Sequential, int]:
    h, w, c = config.input_shape
    hf, wf = h // 16, w // 16
    if hf < 1 or wf < 1:
        raise ValueError(f"input {h}x{w} too small for four 2x pooling stages")
    layers = []
    in_ch = c
    for width in config.conv_widths:
        layers += [
            nn.Conv2d(in_ch, width, kernel_size=3, padding=1),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.MaxPool2d(2),
        ]
        in_ch = width
    layers.append(nn.Flatten())
    return nn.Sequential(*layers), config.conv_widths[-1] * hf * wf


def _mlp_net(config: EncoderConfig) -> tuple[nn.Sequential, int]:
    h, w, c = config.input_shape
    net = nn.Sequential(
        nn.Flatten(),
        nn.Linear(h * w * c, config.mlp_hidden),
        nn.Tanh(),
        nn.Linear(config.mlp_hidden, config.output_dim),
    )
    return net, config.output_dim


def init_visual_encoder(config: EncoderConfig, seed: int) -> VisualEncoder:
    """Build a visual encoder with fan-in scaled init, deterministic in seed."""
    if config.architecture == "reference-conv4-small":
        net, output_dim = _conv4_net(config)
        gain_mode = "relu"
    elif config.architecture == "mlp-tiny":
        net, output_dim = _mlp_net(config)
        gain_mode = "tanh"
    else:
        raise UnknownArchitectureError(
            f"unknown architecture {config.architecture!r}; known: {ARCHITECTURES}"
        )
    net = net.to(_DTYPE)
    generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    _init_weights(net, generator, gain_mode)
    return VisualEncoder(config.architecture, config.input_shape, net, output_dim)


def visual_encode(encoder: VisualEncoder, images) -> torch.Tensor:
    """Embed a batch of (B, H, W, C) images into (B, output_dim) vectors.

    Differentiable w.r.t. encoder parameters; raises on shape mismatch or
    non-finite activations.
    """
    t = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    t = t.to(_DTYPE)
    if t.ndim != 4 or tuple(t.shape[1:]) != encoder.input_shape:
        raise ShapeMismatchError(
            f"expected images of shape (B, {', '.join(map(str, encoder.input_shape))}), "
            f"got {tuple(t.shape)}"
        )
    out = encoder(t.permute(0, 3, 1, 2))
    if not bool(torch.isfinite(out.detach()).all()):
        raise NonFiniteError("visual encoder produced non-finite activations")
    return out


def _token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, person=_TOKEN_SALT).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    return rng.standard_normal(dim) / np.sqrt(dim)


class SemanticEncoder:
    """Frozen description embedder with a fixed projection to the visual dim.

    Modes: ``precomputed-lookup`` accepts vectors of length ``embed_dim``;
    ``toy-text`` hashes tokens into stable vectors and mean-pools them. When
    ``embed_dim`` differs from ``output_dim`` a seed-derived linear projection
    bridges the gap; it stays frozen unless ``projection="trainable"`` is
    requested explicitly (a logged deviation from the frozen contract).
    """

    MODES = ("precomputed-lookup", "toy-text")

    def __init__(
        self,
        mode: str,
        embed_dim: int,
        output_dim: int,
        seed: int = 0,
        projection: str = "frozen",
    ):
        if mode not in self.MODES:
            raise ValueError(f"unknown semantic encoder mode {mode!r}")
        if projection not in ("frozen", "trainable"):
            raise ValueError(f"projection must be 'frozen' or 'trainable', got {projection!r}")
        if embed_dim <= 0 or output_dim <= 0:
            raise ValueError("embed_dim and output_dim must be positive")
        self.mode = mode
        self.embed_dim = int(embed_dim)
        self.output_dim = int(output_dim)
        self.seed = int(seed)
        self.projection_mode = projection
        if embed_dim == output_dim and projection == "frozen":
            self.projection = None
        else:
            if embed_dim == output_dim:
                matrix = torch.eye(embed_dim, dtype=_DTYPE)
            else:
                g = torch.Generator().manual_seed((int(seed) * 0x9E3779B1 + 0x5EED) & 0x7FFFFFFF)
                matrix = torch.randn(embed_dim, output_dim, generator=g, dtype=_DTYPE)
                matrix /= embed_dim ** 0.5
            matrix.requires_grad_(projection == "trainable")
            self.projection = matrix

    @classmethod
    def for_corpus(cls, corpus, output_dim: int, seed: int = 0, *,
                   text_embed_dim: int = 512, projection: str = "frozen") -> "SemanticEncoder":
        """Pick the mode matching a description corpus (vector vs raw text)."""
        if corpus.kind == "vector":
            return cls("precomputed-lookup", corpus.embed_dim, output_dim, seed, projection)
        return cls("toy-text", text_embed_dim, output_dim, seed, projection)

    def _project(self, raw: torch.Tensor) -> torch.Tensor:
        if self.projection is None:
            return raw
        return raw @ self.projection

    def _embed_text(self, text: str) -> torch.Tensor:
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            raise ValueError(f"description has no tokens: {text!r}")
        stacked = np.stack([_token_vector(tok, self.embed_dim) for tok in tokens])
        return torch.as_tensor(stacked.mean(axis=0), dtype=_DTYPE)

    def encode(self, description) -> torch.Tensor:
        if isinstance(description, str):
            if self.mode != "toy-text":
                raise ShapeMismatchError("precomputed-lookup mode requires a vector, got text")
            return self._project(self._embed_text(description))
        if self.mode != "precomputed-lookup":
            raise ShapeMismatchError("toy-text mode requires a text description, got a vector")
        vec = torch.as_tensor(np.asarray(description), dtype=_DTYPE)
        if vec.ndim != 1 or vec.shape[0] != self.embed_dim:
            raise ShapeMismatchError(
                f"expected a vector of length {self.embed_dim}, got shape {tuple(vec.shape)}"
            )
        return self._project(vec)

    def encode_batch(self, descriptions) -> torch.Tensor:
        return torch.stack([self.encode(d) for d in descriptions])

    def trainable_parameters(self) -> list:
        if self.projection is not None and self.projection.requires_grad:
            return [self.projection]
        return []

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(
            f"{self.mode}|{self.embed_dim}|{self.output_dim}|{self.projection_mode}".encode()
        )
        if self.projection is None:
            h.update(b"identity")
        else:
            h.update(self.projection.detach().numpy().tobytes())
        return h.hexdigest()


def semantic_encode(encoder: SemanticEncoder, description) -> torch.Tensor:
    """Frozen embedding of one description (text or precomputed vector)."""
    return encoder.encode(description)


def params_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameter and buffer bytes, in named order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    for name, b in sorted(module.named_buffers()):
        h.update(name.encode())
        h.update(b.detach().numpy().tobytes())
    return h.hexdigest()
