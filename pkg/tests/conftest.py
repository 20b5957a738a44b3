import pytest

from excitonforge import config


@pytest.fixture(autouse=True)
def mock_config_paths(mocker, tmp_path):
    """
    A fixture that automatically mocks the global and local config file paths for all tests.
    This prevents tests from accidentally using or modifying the real config files.
    """
    mocker.patch.object(config, "GLOBAL_CONFIG_FILE", tmp_path / "global" / "config.json")
    mocker.patch.object(config, "LOCAL_CONFIG_FILE", tmp_path / "local" / "exciton-forge" / "config.json")
    yield


@pytest.fixture
def run_config(tmp_path):
    """A desk-sized run configuration writing into the test's temporary directory."""
    return config.RunConfig(
        n_samples=300,
        batch_size=100,
        efficiency_threshold=0.5,
        displacement_trials=20,
        output_dir=str(tmp_path / "run"),
    )
