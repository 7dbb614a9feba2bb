import os
import tempfile

import pytest

os.environ.setdefault("SMR_LOG_DIR", tempfile.mkdtemp(prefix="smr-logs-"))
os.environ.setdefault("SMR_LOG_LEVEL", "WARNING")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or desk-scale test")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
