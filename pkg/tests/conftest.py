import json
import os
import sys

import numpy as np
import pytest

from qtk import CalibSet, Layer, Model, Tensor

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        status = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::", 1)[-1]
        sys.stderr.write(f"[{status}] {name}\n")


def fixture_path(*parts) -> str:
    return os.path.join(FIXTURES, *parts)


@pytest.fixture(scope="session")
def pinned():
    with open(fixture_path("pinned.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_calib(prefix: str, batch_size: int = 256) -> CalibSet:
    return CalibSet.from_files(
        fixture_path("data", f"{prefix}_inputs.qtn"),
        fixture_path("data", f"{prefix}_labels.qtn"),
        batch_size=batch_size,
    )


def tiny_mlp(rng: np.random.Generator, quantize_all: bool = True) -> Model:
    """Two dense layers with a relu between; small enough to hand-verify."""
    w1 = Tensor(rng.normal(size=(6, 4)))
    b1 = Tensor(rng.normal(size=6) * 0.1)
    w2 = Tensor(rng.normal(size=(3, 6)))
    b2 = Tensor(rng.normal(size=3) * 0.1)
    return Model(
        "tiny",
        [
            Layer("dense", w1, b1, quantize_weights=quantize_all),
            Layer("relu", quantize_activations=quantize_all),
            Layer("dense", w2, b2, quantize_weights=quantize_all),
        ],
        num_classes=3,
        skip_first_last=False,
    )


def tiny_calib(rng: np.random.Generator, n: int = 32, dim: int = 4, classes: int = 3) -> CalibSet:
    return CalibSet(
        inputs=Tensor(rng.normal(size=(n, dim))),
        labels=rng.integers(0, classes, size=n),
        batch_size=8,
    )
