import numpy as np
import pytest

from deepist.geo import Edge, Node, NodeType, PathRecord, RoadNetwork, RoadType, make_edge
from deepist.synth import SynthConfig, generate_network, generate_paths


def chain_network(n_edges=3, length_m=100.0):
    """Nodes 0..n on a line, edges i: i -> i+1 with a fixed nominal length."""
    nodes = [Node(i, -8.6 + 0.001 * i, 41.15) for i in range(n_edges + 1)]
    edges = [Edge(i, i, i + 1, RoadType.OTHER, length_m) for i in range(n_edges)]
    return RoadNetwork.from_lists(nodes, edges)


def record(pieces, anchors, rid="r", departure=None, raw=None):
    dep = anchors[0][1] if departure is None else departure
    return PathRecord(rid, list(pieces), dep, list(anchors), raw)


@pytest.fixture
def chain():
    return chain_network()


@pytest.fixture(scope="session")
def small_city():
    cfg = SynthConfig(grid_size=8, n_paths=60, min_edges=4, max_edges=12, seed=3)
    net = generate_network(cfg)
    return cfg, net, generate_paths(net, cfg)


@pytest.fixture(scope="session")
def partial_city():
    cfg = SynthConfig(grid_size=10, n_paths=200, min_edges=2, max_edges=14, seed=5, partial_ends=True)
    net = generate_network(cfg)
    return cfg, net, generate_paths(net, cfg)


# acceptance verdicts, echoed once more at the end of the run
ACCEPTANCE_LINES: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
