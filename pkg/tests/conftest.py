import numpy as np
import pytest

from hashsdf import geometry as geo, network as net
from hashsdf.encoding import EncoderConfig

SMALL = EncoderConfig(levels=3, features=2, table_size=2 ** 8)


class FieldCache:
    def __init__(self, d, grad, rgb):
        self.d, self.grad, self.rgb = d, grad, rgb


class AnalyticModel:
    """Duck-typed stand-in for a FieldModel, backed by a closed-form field."""

    def __init__(self, fn, grad_fn, rgb_fn=None):
        self.fn, self.grad_fn = fn, grad_fn
        self.rgb_fn = rgb_fn or (lambda x: np.zeros((len(x), 3)))

    def evaluate(self, x, spatial_grad=True):
        x = np.atleast_2d(x)
        return FieldCache(self.fn(x), self.grad_fn(x) if spatial_grad else None, self.rgb_fn(x))


def random_small_model(seed, hidden=8, table_scale=0.3):
    m = net.init_model(SMALL, hidden, seed)
    rng = np.random.default_rng(seed + 100)
    m.tables[:] = rng.uniform(-table_scale, table_scale, m.tables.shape)
    m.b1[:] = rng.normal(0, 0.5, m.b1.shape)
    m.bc[:] = rng.normal(0, 0.5, 3)
    return m


@pytest.fixture(scope="session")
def sphere_cloud():
    """20k-point sphere of radius 0.5 mapped into the unit cube."""
    cloud = geo.synthesize_cloud(geo.AnalyticShape("sphere", (0.5,)), 20000, seed=42)
    return geo.normalize_cloud(cloud)


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Store the one-line verdict printed in the terminal summary."""
    line = "criterion %2d: %s  %s" % (number, "PASS" if passed else "FAIL", detail)
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
