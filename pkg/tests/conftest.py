import pytest

from gridval.case_io import build_network, load_scenario_config, read_case
from gridval.uncertainty import DEFAULT_CLUSTERS_33, ClusterSet, feature_index_map


@pytest.fixture(scope="session")
def net33():
    return build_network(read_case())


@pytest.fixture(scope="session")
def assets_high(net33):
    return load_scenario_config({"pv": {"case": "high"}}, net33)


@pytest.fixture(scope="session")
def index33():
    return feature_index_map(ClusterSet.by_nodes(DEFAULT_CLUSTERS_33))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 33-bus solves taking minutes")
