import random

import pytest
from hypothesis import given, settings, strategies as st

from deepist.geo import RoadType, ValidationError
from deepist.traffic import (TrafficTable, build_traffic_table, load_traffic_table, local_hour,
                             normalized_speed, save_traffic_table)

from conftest import chain_network, record

H8 = 8 * 3600.0


def test_single_traversal_speed(chain):
    table = build_traffic_table([record([(0, 0, 1)], [(0, H8), (100, H8 + 10)])], chain)
    assert table.speeds[(0, 8)] == 10.0


def test_two_traversals_averaged(chain):
    recs = [record([(0, 0, 1)], [(0, H8), (100, H8 + 10)], rid="a"),
            record([(0, 0, 1)], [(0, H8), (100, H8 + 5)], rid="b")]
    table = build_traffic_table(recs, chain)
    assert table.speeds[(0, 8)] == 15.0
    assert table.global_max_speed == 20.0


def test_hour_keyed_by_edge_entry(chain):
    # second edge is entered after the hour boundary
    start = H8 + 3590
    r = record([(0, 0, 1), (1, 0, 1)], [(0, start), (100, start + 20), (200, start + 40)])
    table = build_traffic_table([r], chain)
    assert set(table.speeds) == {(0, 8), (1, 9)}


def test_untraversed_edge_falls_back(chain):
    table = build_traffic_table([record([(0, 0, 1)], [(0, H8), (100, H8 + 10)])], chain)
    assert table.speed(2, 8) == table.type_means[RoadType.OTHER] == 10.0
    assert table.speed(0, 3) == 10.0  # edge all-hours mean


def test_fallback_hierarchy_constructed():
    table = TrafficTable({(0, 8): 16.0, (1, 8): 8.0}, 16.0, {0: RoadType.HIGHWAY, 1: RoadType.OTHER, 2: RoadType.OTHER})
    assert normalized_speed(table, 1, 3) == 0.5
    assert normalized_speed(table, 2, 8) == 0.5  # road-type mean
    sparse = TrafficTable({(0, 8): 16.0, (1, 8): 8.0}, 16.0, {0: RoadType.OTHER, 1: RoadType.OTHER, 2: RoadType.HIGHWAY})
    assert normalized_speed(sparse, 2, 8) == 0.75  # no highway observed: dataset mean


def test_normalized_examples():
    table = TrafficTable({(0, 1): 15.0, (1, 1): 30.0}, 30.0, {})
    assert normalized_speed(table, 0, 1) == 0.5
    assert normalized_speed(table, 1, 1) == 1.0


def test_empty_input_is_error(chain):
    with pytest.raises(ValidationError):
        build_traffic_table([], chain)


def test_invariants_enforced():
    with pytest.raises(ValidationError):
        TrafficTable({(0, 0): 0.0}, 1.0, {})
    with pytest.raises(ValidationError):
        TrafficTable({(0, 0): 5.0}, 4.0, {})


def test_normalized_in_unit_interval(small_city):
    _, net, recs = small_city
    table = build_traffic_table(recs, net)
    for eid in net.edges:
        for h in range(24):
            assert 0 < table.normalized_speed(eid, h) <= 1


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_build_is_order_independent(small_city, seed):
    _, net, recs = small_city
    shuffled = list(recs)
    random.Random(seed).shuffle(shuffled)
    a, b = build_traffic_table(recs, net), build_traffic_table(shuffled, net)
    assert a.speeds == b.speeds and a.global_max_speed == b.global_max_speed
    assert a.edge_means == b.edge_means and a.dataset_mean == b.dataset_mean


def test_csv_round_trip(tmp_path, small_city):
    _, net, recs = small_city
    table = build_traffic_table(recs, net, tz="Europe/Lisbon")
    save_traffic_table(table, tmp_path / "t.csv")
    back = load_traffic_table(tmp_path / "t.csv", net)
    assert back.speeds == table.speeds
    assert back.global_max_speed == table.global_max_speed
    assert back.timezone == "Europe/Lisbon"
    assert (tmp_path / "t.csv").read_text().splitlines()[1] == "edge_id,hour,mean_speed_mps"


def test_local_hour_timezones():
    # 2013-07-01 00:30 UTC is 01:30 in Lisbon (summer time)
    t = 1372638600.0
    assert local_hour(t) == 0
    assert local_hour(t, "Europe/Lisbon") == 1
    assert local_hour(t, "Asia/Shanghai") == 8
