from typing import Any, List

import pytest


def pytest_addoption(parser: Any) -> None:
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="Run long acceptance experiments.")


def pytest_collection_modifyitems(config: Any, items: List[Any]) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
