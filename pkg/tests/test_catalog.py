import datetime

import numpy as np
import pytest

from tracesynth import catalog as cat
from tracesynth.values import date_to_days


def test_demo_layout_matches_reference(demo_catalog):
    orders = demo_catalog.table("orders")
    assert orders.row_count == 1000
    widths = {c.name: (c.value_kind, c.bytes_per_value) for c in orders.columns}
    assert widths == {
        "o_id": ("integer", 8),
        "o_custkey": ("integer", 8),
        "o_total": ("decimal", 8),
        "o_date": ("date", 4),
        "o_comment": ("text", 40),
    }
    customer = demo_catalog.table("customer")
    assert customer.row_count == 100
    assert {c.name: c.bytes_per_value for c in customer.columns} == {
        "c_id": 8, "c_name": 20, "c_region": 4,
    }
    edges = demo_catalog.join_graph.edges
    assert len(edges) == 1
    assert edges[0].key() == (("customer", "c_id"), ("orders", "o_custkey"))


def test_scan_weight_arithmetic(demo_catalog):
    assert demo_catalog.table("orders").column("o_comment").scan_weight == 1000 * 40
    assert demo_catalog.table("customer").column("c_name").scan_weight == 100 * 20


def test_same_seed_identical():
    c1, d1 = cat.gen_synthetic_catalog(3, 500, seed=21)
    c2, d2 = cat.gen_synthetic_catalog(3, 500, seed=21)
    assert c1 == c2
    for table in c1.table_names():
        for col, arr in d1[table].items():
            assert np.array_equal(arr, d2[table][col])
    c3, _ = cat.gen_synthetic_catalog(3, 500, seed=22)
    assert c3 != c1


def test_stats_match_materialized_data(demo):
    catalog, dataset = demo
    for table in catalog.tables:
        data = dataset[table.name]
        for col in table.columns:
            arr = data[col.name]
            assert len(arr) == table.row_count
            assert col.scan_weight == table.row_count * col.bytes_per_value
            assert col.distinct_count == len(np.unique(arr))
            if col.value_kind == "text":
                assert col.min_value is None and col.max_value is None
            elif col.value_kind == "date":
                assert date_to_days(col.min_value) == int(arr.min())
                assert date_to_days(col.max_value) == int(arr.max())
            else:
                assert col.min_value == arr.min()
                assert col.max_value == arr.max()


def test_save_load_round_trip_bytes(demo_catalog, tmp_path):
    path = tmp_path / "catalog.json"
    cat.save_catalog(demo_catalog, path)
    first = path.read_bytes()
    loaded = cat.load_catalog(path)
    cat.save_catalog(loaded, path)
    assert path.read_bytes() == first
    assert loaded == demo_catalog


def test_dataset_round_trip(demo, tmp_path):
    catalog, dataset = demo
    cat.save_dataset(catalog, dataset, tmp_path)
    loaded_catalog, loaded = cat.load_dataset(tmp_path)
    assert loaded_catalog == catalog
    for table in catalog.table_names():
        for col, arr in dataset[table].items():
            assert np.array_equal(arr, loaded[table][col])


def test_load_rejects_dangling_edge(demo_catalog, tmp_path):
    path = tmp_path / "catalog.json"
    cat.save_catalog(demo_catalog, path)
    text = path.read_text().replace('"table_b": "customer"', '"table_b": "missing"')
    path.write_text(text)
    with pytest.raises(cat.CatalogValidationError):
        cat.load_catalog(path)


def test_load_rejects_malformed_file(tmp_path):
    path = tmp_path / "catalog.json"
    path.write_text("not json at all{{{")
    with pytest.raises(cat.CatalogFormatError):
        cat.load_catalog(path)


def test_minimal_one_table_catalog(tmp_path):
    catalog, _ = cat.gen_synthetic_catalog(1, 10, seed=0)
    assert len(catalog.tables) == 1
    assert catalog.join_graph.edges == ()
    path = tmp_path / "one.json"
    cat.save_catalog(catalog, path)
    assert cat.load_catalog(path) == catalog


def test_connected_subsets_demo(demo_catalog):
    assert cat.connected_table_subsets(demo_catalog, 2) == [("customer", "orders")]
    singles = cat.connected_table_subsets(demo_catalog, 1)
    assert singles == [("customer",), ("orders",)]


def test_connected_subsets_disconnected_pair():
    c1, _ = cat.gen_synthetic_catalog(1, 10, seed=0)
    lonely = cat.TableStats(
        name="island",
        row_count=5,
        columns=(cat.ColumnStats("i_id", "island", "integer", 8, 40,
                                 1, 5, 5),),
    )
    catalog = cat.Catalog(
        tables=c1.tables + (lonely,),
        join_graph=cat.SchemaJoinGraph(
            nodes=c1.join_graph.nodes + ("island",), edges=()
        ),
        dataset_id="disc",
    )
    assert cat.connected_table_subsets(catalog, 2) == []


def _bfs_connected(edges, tables) -> bool:
    ts = set(tables)
    if len(ts) <= 1:
        return True
    adj = {t: set() for t in ts}
    for a, b in edges:
        if a in ts and b in ts:
            adj[a].add(b)
            adj[b].add(a)
    start = sorted(ts)[0]
    seen, queue = {start}, [start]
    while queue:
        for nb in adj[queue.pop()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen == ts


def test_connected_subsets_against_bfs_oracle():
    import itertools

    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(2, 6))
        names = [f"t{i}" for i in range(n)]
        tables = tuple(
            cat.TableStats(
                name=t, row_count=10,
                columns=(cat.ColumnStats(f"{t}_k", t, "integer", 8, 80, 1, 10, 10),),
            )
            for t in names
        )
        pairs = list(itertools.combinations(names, 2))
        chosen = [p for p in pairs if rng.random() < 0.4]
        edges = tuple(cat.JoinEdge(a, f"{a}_k", b, f"{b}_k") for a, b in chosen)
        catalog = cat.Catalog(tables, cat.SchemaJoinGraph(tuple(names), edges), "rnd")
        simple_edges = [(e.table_a, e.table_b) for e in edges]
        for k in range(1, n + 1):
            got = set(cat.connected_table_subsets(catalog, k))
            want = {
                combo for combo in itertools.combinations(sorted(names), k)
                if _bfs_connected(simple_edges, combo)
            }
            assert got == want


def test_spanning_join_tree(demo_catalog):
    edges = cat.spanning_join_tree(demo_catalog, ("orders", "customer"))
    assert len(edges) == 1
    assert edges[0].key() == (("customer", "c_id"), ("orders", "o_custkey"))
    assert cat.spanning_join_tree(demo_catalog, ("orders",)) == []
    c4, _ = cat.gen_synthetic_catalog(4, 100, seed=1)
    with pytest.raises(cat.CatalogValidationError):
        cat.spanning_join_tree(c4, ("customer", "dim2"))  # only linked via orders


def test_generated_date_window():
    catalog, dataset = cat.gen_synthetic_catalog(2, 200, seed=9)
    col = catalog.table("orders").column("o_date")
    assert col.min_value >= datetime.date(1992, 1, 1)
    assert col.max_value <= datetime.date(1998, 12, 31)
