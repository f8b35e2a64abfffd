from __future__ import annotations

import pytest

import helpers
from bcr import StubGroundingService


@pytest.fixture(scope="session")
def seed7():
    """Canonical regression setup: (encoder, image, roi, config)."""
    return helpers.seed7_fixture()


@pytest.fixture(scope="session")
def eval_dataset(tmp_path_factory):
    """Materialized 3-item toy manifest directory."""
    root = tmp_path_factory.mktemp("eval_data")
    manifest_path = helpers.write_eval_manifest(root)
    return manifest_path


@pytest.fixture(scope="session")
def grounding_stub():
    """Running stub grounding service answering from the shared table."""
    with StubGroundingService(helpers.GROUNDING_TABLE) as service:
        yield service
