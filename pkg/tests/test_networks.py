"""Field networks: encoding, geometric initialization, shapes, ranges."""

import math

import numpy as np
import pytest
import torch

from headsdf.networks import (
    FeatureNetwork,
    GeometryNetwork,
    GeometryNetworkConfig,
    PositionalEncodingConfig,
    RadianceNetwork,
    RenderNetworkConfig,
    RenderNetworks,
    positional_encode,
)


class TestPositionalEncoding:
    def test_output_dim(self):
        cfg = PositionalEncodingConfig(num_frequencies=6)
        assert cfg.output_dim(3) == 3 * (1 + 12)
        x = torch.randn(5, 3)
        assert positional_encode(x, cfg).shape == (5, 39)

    def test_raw_coordinates_prefixed(self):
        cfg = PositionalEncodingConfig(num_frequencies=2)
        x = torch.randn(4, 3)
        enc = positional_encode(x, cfg)
        assert torch.equal(enc[:, :3], x)

    def test_frequencies_are_powers_of_two_times_pi(self):
        cfg = PositionalEncodingConfig(num_frequencies=3)
        x = torch.tensor([[0.25, 0.0, 0.0]])
        enc = positional_encode(x, cfg)
        # layout: raw(3), sin(f0)(3), cos(f0)(3), sin(f1)(3), ...
        for k in range(3):
            freq = (2.0 ** k) * math.pi
            assert enc[0, 3 + 6 * k] == pytest.approx(math.sin(freq * 0.25), abs=1e-6)
            assert enc[0, 6 + 6 * k] == pytest.approx(math.cos(freq * 0.25), abs=1e-6)

    def test_no_raw_input_variant(self):
        cfg = PositionalEncodingConfig(num_frequencies=2, include_raw_input=False)
        assert cfg.output_dim(3) == 12
        assert positional_encode(torch.randn(2, 3), cfg).shape == (2, 12)


class TestGeometryNetwork:
    def test_layer_widths_account_for_skip(self, tiny_geo_config):
        widths = tiny_geo_config.layer_widths()
        assert len(widths) == tiny_geo_config.depth
        # the layer before the skip emits width - input_dim so concat restores width
        pre_skip = widths[tiny_geo_config.skip_layer - 1]
        assert pre_skip[1] == tiny_geo_config.width - tiny_geo_config.input_dim
        assert widths[-1][1] == 1

    def test_geometric_init_approximates_sphere(self):
        torch.manual_seed(0)
        geo = GeometryNetwork(GeometryNetworkConfig(
            depth=8, width=256, latent_size=32, skip_layer=4,
        ))
        z = torch.zeros(32)
        pts = torch.rand(4096, 3) * 3.0 - 1.5
        with torch.no_grad():
            f = geo(pts, z)
        target = torch.linalg.norm(pts, dim=-1) - 1.0
        assert (f - target).abs().mean() < 0.25
        with torch.no_grad():
            center = geo(torch.zeros(1, 3), z)
        assert center.item() < 0.0

    def test_latent_has_no_effect_at_init(self, tiny_geo_config):
        torch.manual_seed(0)
        geo = GeometryNetwork(tiny_geo_config)
        pts = torch.randn(16, 3)
        with torch.no_grad():
            f0 = geo(pts, torch.zeros(tiny_geo_config.latent_size))
            f1 = geo(pts, torch.randn(tiny_geo_config.latent_size))
        assert torch.allclose(f0, f1, atol=1e-6)

    def test_forward_shapes_and_broadcast(self, tiny_geo_config):
        geo = GeometryNetwork(tiny_geo_config)
        x = torch.randn(7, 3)
        z1 = torch.zeros(tiny_geo_config.latent_size)
        z2 = torch.zeros(7, tiny_geo_config.latent_size)
        assert geo(x, z1).shape == (7,)
        assert geo(x, z2).shape == (7,)

    def test_field_closure_tracks_parameters(self, tiny_geo_config):
        geo = GeometryNetwork(tiny_geo_config)
        f = geo.field(torch.zeros(tiny_geo_config.latent_size))
        x = torch.randn(4, 3)
        before = f(x).detach().clone()
        with torch.no_grad():
            geo.layers[-1].bias += 0.5
        assert torch.allclose(f(x).detach(), before + 0.5, atol=1e-6)


class TestRenderNetworks:
    def test_color_in_unit_cube(self, tiny_render_config):
        torch.manual_seed(1)
        nets = RenderNetworks(tiny_render_config)
        x = torch.randn(32, 3)
        n = torch.randn(32, 3)
        v = torch.randn(32, 3)
        with torch.no_grad():
            c = nets(x, n, v)
        assert c.shape == (32, 3)
        assert c.min() >= 0.0 and c.max() <= 1.0

    def test_feature_dim(self, tiny_render_config):
        feat = FeatureNetwork(tiny_render_config)
        with torch.no_grad():
            out = feat(torch.randn(5, 3))
        assert out.shape == (5, tiny_render_config.feature_dim)

    def test_radiance_input_composition(self, tiny_render_config):
        rad = RadianceNetwork(tiny_render_config)
        expected = (
            tiny_render_config.feature_dim
            + tiny_render_config.radiance_encoding.output_dim(3) + 6
        )
        assert rad.layers[0].in_features == expected

    def test_init_deterministic_under_seed(self, tiny_render_config):
        torch.manual_seed(5)
        a = RenderNetworks(tiny_render_config)
        torch.manual_seed(5)
        b = RenderNetworks(tiny_render_config)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
