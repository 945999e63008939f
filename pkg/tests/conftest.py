import json

import pytest

from digit.fixtures import grid4_demand, grid4_dict, grid4_network
from digit.network import RoadNetwork, RoadSegment, network_from_dict
from digit.simulator import DemandProfile


@pytest.fixture(scope="session")
def grid_net():
    return grid4_network()


@pytest.fixture()
def grid_file(tmp_path):
    path = tmp_path / "grid4.json"
    path.write_text(json.dumps(grid4_dict()))
    return path


@pytest.fixture()
def grid_demand():
    return grid4_demand()


def single_segment_net(sat_flow=1.0, length=300.0, vf=10.0, jam=0.2):
    seg = RoadSegment(id="s1", from_node="A", to_node="B", length=length,
                      lanes=1, free_flow_speed=vf, saturation_flow=sat_flow,
                      jam_density=jam)
    return RoadNetwork(nodes={"A", "B"}, segments=[seg], signals={},
                       sensors={"s-1": "s1"})


@pytest.fixture()
def line_net():
    return single_segment_net()


@pytest.fixture()
def no_demand():
    return DemandProfile.flat((), 0.0)


def make_net(doc):
    return network_from_dict(doc)
