import numpy as np
import pytest

from flowcouple.coupling import EditInstance


def small_instance(rng, d_s=4, d_v=2, task_id=0):
    mask = np.zeros(d_s, dtype=bool)
    mask[: max(1, d_s // 2)] = True
    return EditInstance(
        x_src=rng.standard_normal(d_s),
        x_tgt=rng.standard_normal(d_s),
        x_text=rng.standard_normal(d_s),
        x_vit=rng.standard_normal(d_v),
        edit_mask=mask,
        task_id=task_id,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def inst(rng):
    return small_instance(rng)


# -- expensive experiments shared by several test modules -------------------

@pytest.fixture(scope="session")
def method_level_result():
    from flowcouple.experiments import method_level
    return method_level(seeds=range(20))


@pytest.fixture(scope="session")
def gaussian_result():
    from flowcouple.experiments import gaussian_oracle
    return gaussian_oracle(seed=0)


@pytest.fixture(scope="session")
def reflow_result():
    from flowcouple.experiments import reflow_experiment
    return reflow_experiment(seed=0, rounds=2)
