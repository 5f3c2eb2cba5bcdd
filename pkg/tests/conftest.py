import json

import pytest

import treegen
from treedual import exponential_utility, market_from_dict, two_power_utility


@pytest.fixture
def bin1():
    return treegen.bin1()


@pytest.fixture
def tri1():
    return treegen.tri1()


@pytest.fixture
def exp_pair():
    return exponential_utility(1.0, 2.0)


@pytest.fixture
def exp_pair_raw():
    # unshifted variant used by closed-form checks
    return exponential_utility(1.0, 0.0)


@pytest.fixture
def tp_pair():
    return two_power_utility(0.5, 1.0, 1.0)


@pytest.fixture
def tri1_file(tmp_path):
    path = tmp_path / "tri1.json"
    doc = treegen.tri1_dict()
    doc["endowment"] = {"a": "0.3", "b": "-0.2", "c": "0.1"}
    path.write_text(json.dumps(doc))
    return path
