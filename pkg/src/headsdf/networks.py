"""Coordinate-based field networks.

Geometry network: latent-conditioned SDF MLP (8 layers x 512, skip into
layer 4, Softplus, latent size 256) with sphere geometric initialization.
Render networks: a feature MLP with the same decoder shape and a smaller
ReLU/tanh radiance MLP mapping (feature, encoded point, normal, view
direction) to RGB. Sizes are configurable; defaults follow the reference
architecture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class PositionalEncodingConfig:
    """Per-coordinate sin/cos features at frequencies 2^k * pi, k=0..L-1."""

    num_frequencies: int = 6
    include_raw_input: bool = True

    def output_dim(self, input_dim: int = 3) -> int:
        return input_dim * (self.include_raw_input + 2 * self.num_frequencies)


def positional_encode(x: torch.Tensor, config: PositionalEncodingConfig) -> torch.Tensor:
    """Encode (..., D) coordinates to (..., D*(raw + 2L)) Fourier features."""
    parts = [x] if config.include_raw_input else []
    for k in range(config.num_frequencies):
        freq = (2.0 ** k) * math.pi
        parts.append(torch.sin(freq * x))
        parts.append(torch.cos(freq * x))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


@dataclass(frozen=True)
class GeometryNetworkConfig:
    depth: int = 8                      # affine layers
    width: int = 512
    latent_size: int = 256
    skip_layer: int = 4                 # decoder input re-joins the output of this layer
    encoding: PositionalEncodingConfig = field(default_factory=PositionalEncodingConfig)
    softplus_beta: float = 100.0
    sphere_radius: float = 1.0          # geometric init target

    @property
    def input_dim(self) -> int:
        return self.encoding.output_dim(3) + self.latent_size

    def layer_widths(self) -> Tuple[Tuple[int, int], ...]:
        """(in, out) per affine layer; post-skip concatenation restores `width`."""
        dims = [self.input_dim] + [self.width] * (self.depth - 1) + [1]
        pairs = []
        for l in range(self.depth):
            out = dims[l + 1]
            if l + 1 == self.skip_layer:
                out = dims[l + 1] - dims[0]
            pairs.append((dims[l], out))
        return tuple(pairs)


class GeometryNetwork(nn.Module):
    """Latent-conditioned SDF decoder F_{z,theta}(x)."""

    def __init__(self, config: GeometryNetworkConfig = GeometryNetworkConfig()):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            nn.Linear(i, o) for i, o in config.layer_widths()
        )
        self.activation = nn.Softplus(beta=config.softplus_beta)
        self.geometric_init_()

    def geometric_init_(self) -> None:
        """Initialize so the untrained field approximates a unit-sphere SDF.

        Raw-coordinate columns of the first (and skip) layer get the sphere
        init; Fourier-feature and latent columns start at zero so encoding
        and conditioning perturb the sphere only once trained.
        """
        cfg = self.config
        in_dim = cfg.input_dim
        for l, lin in enumerate(self.layers):
            if l == cfg.depth - 1:
                nn.init.normal_(
                    lin.weight, mean=math.sqrt(math.pi) / math.sqrt(lin.in_features),
                    std=1e-4,
                )
                nn.init.constant_(lin.bias, -cfg.sphere_radius)
            elif l == 0:
                nn.init.constant_(lin.bias, 0.0)
                nn.init.constant_(lin.weight, 0.0)
                nn.init.normal_(
                    lin.weight[:, :3], 0.0, math.sqrt(2) / math.sqrt(lin.out_features)
                )
            elif l + 1 == cfg.skip_layer:
                nn.init.constant_(lin.bias, 0.0)
                nn.init.normal_(
                    lin.weight, 0.0, math.sqrt(2) / math.sqrt(lin.out_features)
                )
            else:
                nn.init.constant_(lin.bias, 0.0)
                nn.init.normal_(
                    lin.weight, 0.0, math.sqrt(2) / math.sqrt(lin.out_features)
                )
        # skip target layer: zero the columns that receive the re-injected
        # encoded input beyond the raw coordinates (matches the first layer)
        skip_lin = self.layers[cfg.skip_layer]
        with torch.no_grad():
            skip_lin.weight[:, -(in_dim - 3):] = 0.0

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """x: (..., 3); z: (latent,) or broadcastable (..., latent). Returns (...,)."""
        cfg = self.config
        enc = positional_encode(x, cfg.encoding)
        if z.dim() == 1:
            z = z.expand(*x.shape[:-1], z.shape[-1])
        h = torch.cat([enc, z], dim=-1)
        inp = h
        for l, lin in enumerate(self.layers):
            if l == cfg.skip_layer:
                h = torch.cat([h, inp], dim=-1) / math.sqrt(2)
            h = lin(h)
            if l < cfg.depth - 1:
                h = self.activation(h)
        return h.squeeze(-1)

    def field(self, z: torch.Tensor):
        """Closure x -> F_{z,theta}(x) with the current parameters."""
        return lambda x: self.forward(x, z)


@dataclass(frozen=True)
class RenderNetworkConfig:
    feature_depth: int = 8
    feature_width: int = 512
    feature_dim: int = 256              # d, the Q output width
    feature_skip_layer: int = 4
    feature_encoding: PositionalEncodingConfig = field(
        default_factory=lambda: PositionalEncodingConfig(num_frequencies=6)
    )
    radiance_depth: int = 4
    radiance_width: int = 512
    radiance_encoding: PositionalEncodingConfig = field(
        default_factory=lambda: PositionalEncodingConfig(num_frequencies=4)
    )
    softplus_beta: float = 100.0


class FeatureNetwork(nn.Module):
    """Q: encoded surface point -> d-dim feature; same decoder shape as F."""

    def __init__(self, config: RenderNetworkConfig):
        super().__init__()
        self.config = config
        in_dim = config.feature_encoding.output_dim(3)
        dims = [in_dim] + [config.feature_width] * (config.feature_depth - 1) \
            + [config.feature_dim]
        layers = []
        for l in range(config.feature_depth):
            out = dims[l + 1]
            if l + 1 == config.feature_skip_layer:
                out = dims[l + 1] - dims[0]
            layers.append(nn.Linear(dims[l], out))
        self.layers = nn.ModuleList(layers)
        self.activation = nn.Softplus(beta=config.softplus_beta)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        enc = positional_encode(x, self.config.feature_encoding)
        h = enc
        for l, lin in enumerate(self.layers):
            if l == self.config.feature_skip_layer:
                h = torch.cat([h, enc], dim=-1) / math.sqrt(2)
            h = lin(h)
            if l < self.config.feature_depth - 1:
                h = self.activation(h)
        return h


class RadianceNetwork(nn.Module):
    """R: (feature, encoded x, n, v) -> RGB in [-1, 1] via tanh; no skips."""

    def __init__(self, config: RenderNetworkConfig):
        super().__init__()
        self.config = config
        in_dim = config.feature_dim + config.radiance_encoding.output_dim(3) + 6
        dims = [in_dim] + [config.radiance_width] * (config.radiance_depth - 1) + [3]
        self.layers = nn.ModuleList(
            nn.Linear(dims[l], dims[l + 1]) for l in range(config.radiance_depth)
        )

    def forward(
        self,
        feature: torch.Tensor,
        x: torch.Tensor,
        n: torch.Tensor,
        v: torch.Tensor,
    ) -> torch.Tensor:
        enc = positional_encode(x, self.config.radiance_encoding)
        h = torch.cat([feature, enc, n, v], dim=-1)
        for l, lin in enumerate(self.layers):
            h = lin(h)
            if l < self.config.radiance_depth - 1:
                h = torch.relu(h)
        return torch.tanh(h)


class RenderNetworks(nn.Module):
    """G_phi = R(Q(gamma_Q(x)), gamma_R(x), n, v), with phi = (rho, eta)."""

    def __init__(self, config: RenderNetworkConfig = RenderNetworkConfig()):
        super().__init__()
        self.config = config
        self.feature_net = FeatureNetwork(config)
        self.radiance_net = RadianceNetwork(config)

    def forward(self, x: torch.Tensor, n: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Color in [0, 1]^3 for surface points x with normals n, view dirs v."""
        feat = self.feature_net(x)
        raw = self.radiance_net(feat, x, n, v)
        return (raw + 1.0) * 0.5


def radiance_eval(render: RenderNetworks, x_s, n, v) -> torch.Tensor:
    x_s = torch.as_tensor(np.asarray(x_s), dtype=torch.float32) if not torch.is_tensor(x_s) else x_s
    n = torch.as_tensor(np.asarray(n), dtype=x_s.dtype) if not torch.is_tensor(n) else n
    v = torch.as_tensor(np.asarray(v), dtype=x_s.dtype) if not torch.is_tensor(v) else v
    return render(x_s, n, v)
