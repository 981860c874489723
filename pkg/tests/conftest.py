"""Shared fixtures: tiny network configs and a small trained prior.

Everything here is deliberately desk-scale (narrow networks, few scans,
short schedules) so the full suite stays fast; the acceptance module owns
the longer trend runs.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from headsdf.autodiff import deterministic_mode
from headsdf.networks import (
    GeometryNetworkConfig,
    PositionalEncodingConfig,
    RenderNetworkConfig,
)
from headsdf.prior import PriorTrainConfig, ScanScene, train_prior
from headsdf.synth import (
    make_head_sdf,
    make_view_ring,
    render_scene,
    sample_head_params,
    sample_surface,
    value_noise_albedo,
)


@pytest.fixture(autouse=True)
def _deterministic():
    deterministic_mode(0)


@pytest.fixture(scope="session")
def tiny_geo_config() -> GeometryNetworkConfig:
    return GeometryNetworkConfig(
        depth=4, width=64, latent_size=16, skip_layer=2,
        encoding=PositionalEncodingConfig(num_frequencies=6),
    )


@pytest.fixture(scope="session")
def tiny_render_config() -> RenderNetworkConfig:
    return RenderNetworkConfig(
        feature_depth=3, feature_width=64, feature_dim=32, feature_skip_layer=2,
        radiance_depth=3, radiance_width=64,
    )


@pytest.fixture(scope="session")
def family_scans():
    """Four synthetic head scans for prior training tests."""
    scans = []
    for i in range(4):
        field = make_head_sdf(sample_head_params(np.random.default_rng(i)))
        pts = sample_surface(field, 3000, np.random.default_rng(100 + i))
        scans.append(ScanScene(f"scan_{i:02d}", pts, i))
    return scans


@pytest.fixture(scope="session")
def tiny_prior(family_scans, tiny_geo_config):
    """A briefly trained prior shared by latent-fitting and recon tests."""
    torch.set_num_threads(1)
    cfg = PriorTrainConfig(
        epochs=40, lr=1e-3, lr_decay_every=20, scenes_per_step=4,
        n_surface=256, n_volume=256, seed=7,
    )
    return train_prior(family_scans, cfg, tiny_geo_config)


@pytest.fixture(scope="session")
def head_field():
    return make_head_sdf(sample_head_params(np.random.default_rng(0)))


@pytest.fixture(scope="session")
def head_scene(head_field):
    """Three rendered 48x48 views of the first family member."""
    cams = make_view_ring(3, width=48, height=48)
    return render_scene(head_field, value_noise_albedo(0), cams)
