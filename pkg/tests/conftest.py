import logging
import sys

import numpy as np
import pytest

from fedack.data import synth_dataset
from fedack.models import (
    DiscriminatorConfig,
    ExtractorConfig,
    GeneratorConfig,
    init_discriminator,
    init_extractor,
    init_generator,
    tensorize,
)

SMALL_E = ExtractorConfig(prop_dim=3, embed_dim=4, hidden_dim=5, feature_dim=3, attention_dim=3)
SMALL_D = DiscriminatorConfig(feature_dim=3, hidden=(4,))
SMALL_G = GeneratorConfig(feature_dim=3, noise_dim=2, hidden=(4,))


@pytest.fixture(autouse=True)
def _quiet_client_warnings():
    logging.getLogger("fedack.client").setLevel(logging.ERROR)
    yield


def small_batch(n=4, seed=0, tweets_range=(1, 3)):
    ds = synth_dataset(n, SMALL_E.prop_dim, SMALL_E.embed_dim, tweets_range, (2, 4), 1.0, seed)
    return tensorize(ds.users, SMALL_E.prop_dim, SMALL_E.embed_dim)


def small_nets(seed=0):
    rng = np.random.default_rng(seed)
    return (init_extractor(SMALL_E, rng), init_discriminator(SMALL_D, rng), init_discriminator(SMALL_D, rng),
            init_generator(SMALL_G, rng))


def jitter(ps, rng, scale=0.3):
    """Push every parameter (biases included) off its initial value."""
    for _, t in ps:
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return ps


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
