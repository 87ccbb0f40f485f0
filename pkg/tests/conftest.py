# Copyright 2025 The gdc-propagation authors.
"""Module for pytest configuration."""

import pytest


def pytest_addoption(parser: pytest.Parser):
    parser.addoption(
        "--gm-checkpoint",
        action="store",
        help="Trained GM checkpoint to use."
        "If not provided, a small GM is trained once per test session.",
    )
    parser.addoption(
        "--dm-checkpoint",
        action="store",
        help="Trained DM checkpoint to use."
        "If not provided, a small DM is trained once per test session.",
    )
    parser.addoption(
        "--epochs",
        action="store",
        type=int,
        default=5,
        help="Training epochs of the session modules",
    )
    parser.addoption(
        "--keep-outputs",
        action="store",
        help="Directory in which to keep trained modules and run outputs",
    )
