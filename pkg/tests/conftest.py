import pytest

from tracesynth import backend as bk
from tracesynth import catalog as cat
from tracesynth import costmodel as cm


@pytest.fixture(scope="session")
def demo():
    """The fixed 2-table demo dataset (orders 1000 rows, customer 100)."""
    catalog, dataset = cat.gen_synthetic_catalog(2, 1000, seed=7)
    return catalog, dataset


@pytest.fixture(scope="session")
def demo_catalog(demo):
    return demo[0]


@pytest.fixture(scope="session")
def demo_backend(demo):
    catalog, dataset = demo
    return bk.SimulatedBackend(catalog, dataset)


@pytest.fixture(scope="session")
def demo_model(demo, demo_backend):
    catalog, _ = demo
    samples = cm.collect_profiles(catalog, demo_backend, 200, seed=11)
    return cm.fit(samples)


@pytest.fixture()
def fresh_backend(demo):
    catalog, dataset = demo
    return bk.SimulatedBackend(catalog, dataset)
