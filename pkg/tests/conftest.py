import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stylerec.datamodel import temporal_split  # noqa: E402
from stylerec.encoding import build_schema  # noqa: E402
from stylerec.model import ModelConfig, TowerConfig, TwoTowerModel  # noqa: E402
from stylerec.studies import DESK_THRESHOLDS, desk_train_config  # noqa: E402
from stylerec.trainer import ClickDataset, train  # noqa: E402
from stylerec.synthgen import GeneratorConfig, generate  # noqa: E402

# acceptance criteria append (criterion, passed, detail) here; printed at the end of the run
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda t: int(t[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


SMALL_MODEL = ModelConfig(TowerConfig([64]), TowerConfig([64], cross_layer_count=1), seed=0)

SMALL = dict(n_users=60, n_orgs=12, n_images=240, n_clicks=4000, n_semantic_topics=12,
             n_style_archetypes=6, n_countries=6, n_languages=3, seed=3)


@pytest.fixture(scope="session")
def small_config():
    return GeneratorConfig(**SMALL)


@pytest.fixture(scope="session")
def small_world(small_config):
    users, images, interactions, gt = generate(small_config)
    return users, images, interactions, gt


@pytest.fixture(scope="session")
def small_split(small_world):
    return temporal_split(small_world[2], 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def setup(small_world, small_split):
    users, images, _, _ = small_world
    schema = build_schema(small_split.train, users, images, thresholds=DESK_THRESHOLDS)
    dataset = ClickDataset(small_split.train, users, images)
    return schema, dataset


@pytest.fixture(scope="session")
def trained(setup):
    schema, dataset = setup
    model = TwoTowerModel(schema, SMALL_MODEL)
    cfg = desk_train_config(batch_size=128, max_epochs=12)
    model, history = train(model, dataset, cfg)
    return model, history, cfg
