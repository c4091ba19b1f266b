import os

import pytest
from hypothesis import HealthCheck, settings

from seizurenet.config import RunConfig
from seizurenet.pipeline import fit_model
from seizurenet.signal_data import generate_synthetic_dataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Small but complete configuration for fast end-to-end tests.
QUICK = {
    "n_interictal": "4", "n_preictal": "4", "duration_s": "4.0", "batch_size": "8",
    "dimred_sweeps": "40", "dimred_burn_in": "10",
    "pretrain_epochs": "20", "softmax_epochs": "30", "finetune_epochs": "20",
}


@pytest.fixture(scope="session")
def quick_config():
    return RunConfig().with_overrides(QUICK).validate()


@pytest.fixture(scope="session")
def quick_segments(quick_config):
    return generate_synthetic_dataset(quick_config.gen_config())


@pytest.fixture(scope="session")
def quick_model(quick_config, quick_segments):
    return fit_model(quick_segments, quick_config.pipeline_config().with_seed(quick_config.seed))
