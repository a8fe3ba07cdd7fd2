import numpy as np
import pytest

from nlosloc import model


@pytest.fixture(scope="session")
def noisy_scenario():
    return model.make_random_scenario(seed=42, sigma=10.0, eta0=np.deg2rad(7.0))


@pytest.fixture(scope="session")
def noiseless_scenario():
    return model.make_random_scenario(seed=42, sigma=0.0, eta0=0.0, support_points=1)


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels(noisy_scenario):
    """Trigger numba compilation once so individual tests measure algorithm time."""
    from nlosloc import em_centralized, em_distributed

    meas = model.synthesize_measurements(noisy_scenario, seed=0)
    prob = noisy_scenario.problem(meas)
    em_centralized.run(prob, opts=em_centralized.EMOptions(max_iter=2, max_cycles=1))
    em_distributed.run_distributed(
        prob, opts=em_distributed.DistEMOptions(max_iter=3), seed=0
    )
    yield
