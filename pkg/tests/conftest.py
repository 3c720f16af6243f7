import numpy as np
import pytest

from deepcaps.autodiff import current_tape, get_default_dtype, set_default_dtype
from deepcaps.data import Dataset

TINY_ARCH = {
    "input_shape": [8, 8, 1],
    "stem": {"filters": 8, "kernel": 3},
    "cells": [
        {"layers": [{"types": 4, "dim": 4, "stride": 2}, {"types": 4, "dim": 4}, {"types": 4, "dim": 4}],
         "skip_from": 1, "routed": True},
    ],
    "class_caps": {"classes": 10, "dim": 8, "sources": [0], "share_types": True},
    "decoder": {"kind": "fc", "hidden": [32, 64]},
}


@pytest.fixture(autouse=True)
def clean_tape():
    current_tape().clear()
    yield
    current_tape().clear()


@pytest.fixture
def float64():
    old = get_default_dtype()
    set_default_dtype(np.float64)
    yield
    set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    import copy
    return copy.deepcopy(TINY_ARCH)


def digits_split(n_train=300, n_test=200):
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images / 16.0).astype(np.float32)[..., None]
    y = d.target.astype(np.int64)
    train = Dataset(x[:n_train], y[:n_train], 10, "digits", "train")
    test = Dataset(x[n_train:n_train + n_test], y[n_train:n_train + n_test], 10, "digits", "test")
    return train, test


@pytest.fixture(scope="session")
def digits():
    return digits_split()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
