import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from immunolab.data import render_shapes  # noqa: E402
from immunolab.diffusion import BundleConfig, ToyLdmBundle, pretrain_toy  # noqa: E402


@pytest.fixture(scope="session")
def tiny_bundle():
    """Untrained bundle: random weights, cheap, good for shape and identity checks."""
    b = ToyLdmBundle(BundleConfig(seed=3))
    b.latent_scale = 1.0
    return b


@pytest.fixture(scope="session")
def small_bundle():
    """Briefly pretrained bundle for tests that need meaningful gradients."""
    images, recs = render_shapes(40, 32, 11)
    return pretrain_toy(images, [r.prompt for r in recs], steps=150, vae_steps=150, seed=1)


@pytest.fixture(scope="session")
def toy_bundle(tmp_path_factory):
    """Full pretraining on 200 shapes, shared by the slow tests and the acceptance suite.

    Set IMMUNO_BUNDLE_CACHE to a checkpoint path to reuse a bundle across sessions.
    """
    cache = os.environ.get("IMMUNO_BUNDLE_CACHE")
    if cache and Path(cache).exists():
        return ToyLdmBundle.load(cache)
    images, recs = render_shapes(200, 32, 0)
    bundle = pretrain_toy(images, [r.prompt for r in recs], steps=2000, seed=0)
    bundle.save(cache or tmp_path_factory.mktemp("bundle") / "bundle.ckpt")
    return bundle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
