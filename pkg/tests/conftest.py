import os

import numpy as np
import pytest

from gapdecomp.data import ObservationTable
from gapdecomp.synth import load_spec

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

ACCEPTANCE = []


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def spec_fixture(name, **overrides):
    spec = load_spec(fixture_path(name))
    if overrides:
        raw = dict(spec.raw)
        raw.update(overrides)
        spec = type(spec).from_dict(raw)
    return spec


def make_table(y, group, x=None, weight=None, kind="continuous", name="x", labels=("W", "B")):
    y = np.asarray(y, float)
    weight = np.ones(y.size) if weight is None else np.asarray(weight, float)
    covs, schema = {}, ()
    if x is not None:
        covs = {name: np.asarray(x)}
        schema = ((name, kind),)
    return ObservationTable(y, np.asarray(group), weight, covs, schema, labels)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return record
