import logging
from pathlib import Path

import pytest

from cli import load_corpus, train_module
from config import RunConfig
from neural import ConvNetModule, Role, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


@pytest.fixture(scope="session")
def outputs(pytestconfig: pytest.Config, tmp_path_factory: pytest.TempPathFactory):
    """Pytest fixture to return the directory for modules and run outputs."""
    keep = pytestconfig.getoption("--keep-outputs")
    if keep:
        path = Path(keep)
        path.mkdir(parents=True, exist_ok=True)
        yield path
        return
    yield tmp_path_factory.mktemp("outputs")


@pytest.fixture(scope="session")
def training_config(pytestconfig: pytest.Config):
    """Pytest fixture with the reduced training settings of the session modules."""
    yield RunConfig.from_text(
        "\n".join(
            [
                "seed=0",
                "corpus-size=16",
                "patch-size=32",
                "width=8",
                "gm-depth=5",
                "dm-depth=3",
                "batch-size=4",
                f"epochs={pytestconfig.getoption('--epochs')}",
                "noise-levels=2,3",
            ]
        )
    )


def _module(
    role: Role, option: str, pytestconfig: pytest.Config, cfg: RunConfig, outputs: Path
) -> ConvNetModule:
    checkpoint = pytestconfig.getoption(option)
    if checkpoint:
        module = load_checkpoint(checkpoint)
        assert module.role is role, f"{checkpoint} does not hold a {role.value} module"
        return module
    result = train_module(cfg, role, load_corpus(cfg))
    path = save_checkpoint(outputs / f"{role.value}.gdcw", result.module)
    logger.info("Trained %s in %d epochs, saved to %s", role.value, len(result.losses) - 1, path)
    return result.module


@pytest.fixture(scope="session")
def gm(pytestconfig: pytest.Config, training_config: RunConfig, outputs: Path):
    """Pytest fixture to return the session GM, trained unless --gm-checkpoint is set."""
    yield _module(Role.GM, "--gm-checkpoint", pytestconfig, training_config, outputs)


@pytest.fixture(scope="session")
def dm(pytestconfig: pytest.Config, training_config: RunConfig, outputs: Path):
    """Pytest fixture to return the session DM, trained unless --dm-checkpoint is set."""
    yield _module(Role.DM, "--dm-checkpoint", pytestconfig, training_config, outputs)
