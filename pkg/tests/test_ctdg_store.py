import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynllm.ctdg_store import (EventLog, IngestError, InteractionEvent, SplitError, TemporalAdjacency,
                               TemporalGraph, ValidationError, chronological_split, ingest_events,
                               load_event_file, split_sizes, write_event_file)


def lines(*rows):
    return ["\t".join(map(str, r)) + "\n" for r in rows]


def test_ingest_sorts_and_indexes():
    log = ingest_events(lines(("b", "x", 5, "X"), ("a", "y", 1, "Y"), ("a", "x", 5, "")))
    assert [(e.user_id, e.item_id, e.timestamp) for e in log] == [("a", "y", 1), ("a", "x", 5), ("b", "x", 5)]
    assert log.user_index == {"a": 0, "b": 1} and log.item_index == {"x": 0, "y": 1}
    assert log.users.tolist() == [0, 0, 1] and log.items.tolist() == [1, 0, 0]
    assert log.item_titles() == ["X", "Y"]


def test_ingest_skips_header_and_keeps_duplicates():
    log = ingest_events(["user\titem\ttimestamp\ttitle\n"] + lines(("u", "i", 1, "t"), ("u", "i", 1, "t")))
    assert len(log) == 2


@pytest.mark.parametrize("row,cls,line", [
    (("u", "i", "soon", "t"), IngestError, 2),
    (("u", "i", -1, "t"), ValidationError, 2),
    (("u", "i", "nan", "t"), ValidationError, 2),
    (("", "i", 3, "t"), ValidationError, 2),
])
def test_ingest_reports_offending_line(row, cls, line):
    with pytest.raises(cls) as info:
        ingest_events(lines(("u", "i", 1, "t"), row))
    assert info.value.line == line


def test_wrong_field_count():
    with pytest.raises(IngestError, match="4 tab-separated"):
        ingest_events(["u\ti\t1\n"])


def test_event_file_round_trip(tmp_path):
    log = ingest_events(lines(("u1", "i1", 1.25, "red shoe"), ("u2", "i1", 3.0, "red shoe")))
    write_event_file(log, tmp_path / "e.tsv")
    back = load_event_file(tmp_path / "e.tsv")
    assert back.events == log.events


def test_split_sizes_100():
    assert split_sizes(100) == (70, 15, 15)


def test_split_preserves_order_and_id_maps():
    log = EventLog([InteractionEvent(f"u{k % 3}", f"i{k % 5}", float(k)) for k in range(20)])
    train, val, test = chronological_split(log)
    assert (len(train), len(val), len(test)) == (14, 3, 3)
    assert train.times.max() <= val.times.min() and val.times.max() <= test.times.min()
    assert test.user_index is log.user_index


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.8, 0.3, -0.1), (0.3, 0.3, 0.3)])
def test_bad_ratios(ratios):
    with pytest.raises(SplitError):
        split_sizes(100, ratios)


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 100_000))
def test_split_sizes_partition(n):
    a, b, c = split_sizes(n)
    assert a + b + c == n and a == (7 * n) // 10 and b == (15 * n) // 100


def test_neighbors_strictly_before_and_tie_order():
    # user 0: items 1@1, 2@2, 3@2 (later index), 4@3
    adj = TemporalAdjacency([0, 0, 0, 0, 1], [1, 2, 3, 4, 9], [1.0, 2.0, 2.0, 3.0, 0.5], 2)
    assert adj.neighbors(0, 3.0, 5) == [(3, 2.0), (2, 2.0), (1, 1.0)]
    assert adj.neighbors(0, 3.0, 2) == [(3, 2.0), (2, 2.0)]
    assert adj.neighbors(0, 1.0, 5) == []
    assert adj.neighbors(1, 10.0, 5) == [(9, 0.5)]


def test_graph_both_sides():
    log = EventLog([InteractionEvent("a", "x", 1.0), InteractionEvent("b", "x", 2.0),
                    InteractionEvent("a", "y", 3.0)])
    g = TemporalGraph(log)
    assert g.temporal_neighbors(0, 10.0, 5, "user") == [(1, 3.0), (0, 1.0)]
    assert g.temporal_neighbors(0, 2.5, 5, "item") == [(1, 2.0), (0, 1.0)]


def brute_neighbors(nodes, partners, times, node, t, n):
    hits = [(k, partners[k], times[k]) for k in range(len(nodes)) if nodes[k] == node and times[k] < t]
    hits.sort(key=lambda h: (h[2], h[0]), reverse=True)
    return [(p, tm) for _, p, tm in hits[:n]]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5), st.integers(0, 6)), max_size=40),
       st.integers(0, 3), st.integers(0, 7), st.integers(1, 6))
def test_neighbors_match_brute_force(events, node, t, n):
    nodes = [e[0] for e in events]
    partners = [e[1] for e in events]
    times = [float(e[2]) for e in events]
    adj = TemporalAdjacency(nodes, partners, times, 4)
    assert adj.neighbors(node, float(t), n) == brute_neighbors(nodes, partners, times, node, t, n)


def test_query_vectorised_matches_scalar():
    rng = np.random.default_rng(3)
    nodes = rng.integers(0, 6, 200)
    adj = TemporalAdjacency(nodes, rng.integers(0, 9, 200), rng.integers(0, 50, 200).astype(float), 6)
    q_nodes, q_t = rng.integers(0, 6, 30), rng.integers(0, 60, 30).astype(float)
    ids, tms, mask = adj.query(q_nodes, q_t, 4)
    for k in range(30):
        ref = adj.neighbors(int(q_nodes[k]), float(q_t[k]), 4)
        assert list(zip(ids[k][mask[k]].tolist(), tms[k][mask[k]].tolist())) == ref
