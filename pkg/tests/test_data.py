import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damba_st.data import (
    DomainSpec,
    IngestionError,
    NodeIdError,
    NonFiniteError,
    RowCountError,
    SymmetryError,
    bfs_depth,
    default_corpus,
    gather_windows,
    generate_domain,
    grid_adjacency,
    load_dataset,
    make_windows,
    prepare_domain,
    synthesize,
    time_channels,
)
from damba_st.delay import estimate_delay
from damba_st.spatial import TrafficGraph
from damba_st.ssm import ContractError


def small_spec(**kw):
    base = dict(name="d", n_nodes=5, graph="cycle", steps_per_day=48, n_steps=480, seed=3)
    base.update(kw)
    return DomainSpec(**base)


def test_spec_validation():
    with pytest.raises(ContractError):
        small_spec(n_nodes=1)
    with pytest.raises(ContractError):
        small_spec(graph="star")
    with pytest.raises(ContractError):
        small_spec(n_steps=100)  # 48 does not divide 100
    with pytest.raises(ContractError):
        small_spec(noise=-1.0)


def test_noise_free_node_is_sinusoid_at_daily_period():
    spec = small_spec(noise=0.0, trend=0.0, weekly=0.0, n_steps=960)
    _, series = synthesize(spec)
    v = series[:, 0, 0] - series[:, 0, 0].mean()
    freq = np.fft.rfftfreq(v.size)
    peak = freq[np.argmax(np.abs(np.fft.rfft(v)))]
    assert peak == pytest.approx(1.0 / spec.steps_per_day)


def test_planted_delay_recovered():
    spec = small_spec(n_nodes=6, noise=0.05, delay_steps=5, trend=0.0, n_steps=960)
    graph, series = synthesize(spec)
    depth = bfs_depth(graph.adjacency)
    a, b = next((a, b) for a, b in graph.edges() if depth[b] == depth[a] + 1)
    assert estimate_delay(series[:, a, 0], series[:, b, 0], 10) == 5


def test_time_channels_in_unit_interval():
    tod, dow = time_channels(2016, 288)
    assert tod[0] == 0.0 and tod[287] == pytest.approx(287 / 288)
    assert np.all((0 <= dow) & (dow < 1)) and dow[288] == pytest.approx(1 / 7)


def test_grid_adjacency_connected_and_symmetric():
    for n in (2, 5, 20):
        adj = grid_adjacency(n)
        assert np.array_equal(adj, adj.T)
        assert np.all(bfs_depth(adj) >= 0)


@pytest.mark.parametrize("family", ["cycle", "grid", "geometric"])
def test_generate_and_load_roundtrip(tmp_path, family):
    spec = small_spec(graph=family)
    out = generate_domain(spec, tmp_path / family)
    meta = json.loads((out / "meta.json").read_text())
    assert (meta["N"], meta["T"], meta["C_in"]) == (5, 480, 3)
    loaded = load_dataset(out)
    assert loaded.series.size == spec.n_nodes * spec.n_steps * 3
    _, series = synthesize(spec)
    np.testing.assert_allclose(loaded.series, series, rtol=1e-8, atol=1e-12)
    assert loaded.steps_per_day == 48


def test_generation_byte_identical(tmp_path):
    a = generate_domain(small_spec(), tmp_path / "a")
    b = generate_domain(small_spec(), tmp_path / "b")
    for f in ("adjacency.csv", "series.csv", "meta.json"):
        assert filecmp.cmp(a / f, b / f, shallow=False)
    c = generate_domain(small_spec(seed=4), tmp_path / "c")
    assert not filecmp.cmp(a / "series.csv", c / "series.csv", shallow=False)


def test_nine_significant_digits(tmp_path):
    out = generate_domain(small_spec(), tmp_path / "d")
    row = (out / "series.csv").read_text().splitlines()[1].split(",")
    assert all(len(x.lstrip("-").replace(".", "").lstrip("0").split("e")[0]) <= 9 for x in row)


def test_truncated_series_rejected(tmp_path):
    out = generate_domain(small_spec(), tmp_path / "d")
    lines = (out / "series.csv").read_text().splitlines()
    (out / "series.csv").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(RowCountError, match="expected 480 rows, found 477"):
        load_dataset(out)


def test_asymmetric_adjacency_rejected(tmp_path):
    out = generate_domain(small_spec(), tmp_path / "d")
    with open(out / "adjacency.csv", "a") as fh:
        fh.write("0,2,0.5\n")
    with pytest.raises(SymmetryError):
        load_dataset(out)


def test_nan_and_bad_node_rejected(tmp_path):
    out = generate_domain(small_spec(), tmp_path / "d")
    lines = (out / "series.csv").read_text().splitlines()
    cells = lines[5].split(",")
    cells[3] = "nan"
    lines[5] = ",".join(cells)
    (out / "series.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(NonFiniteError, match="row 4, node 1, channel 0"):
        load_dataset(out)
    out2 = generate_domain(small_spec(), tmp_path / "e")
    with open(out2 / "adjacency.csv", "a") as fh:
        fh.write("0,9,1\n")
    with pytest.raises(NodeIdError):
        load_dataset(out2)


def test_missing_file(tmp_path):
    out = generate_domain(small_spec(), tmp_path / "d")
    (out / "meta.json").unlink()
    with pytest.raises(FileNotFoundError):
        load_dataset(out)


def test_ingestion_errors_are_value_errors():
    assert issubclass(RowCountError, IngestionError) and issubclass(IngestionError, ValueError)


def test_window_count_examples():
    assert len(make_windows(100, 48, 48, 48)) == 1
    assert len(make_windows(96, 48, 48, 48)) == 1
    assert len(make_windows(np.zeros((2016, 3)), 48, 48, 48)) == 41
    with pytest.raises(ContractError):
        make_windows(95, 48, 48, 48)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 30), st.integers(0, 200))
def test_window_count_brute_force(H, F, stride, extra):
    T = H + F + extra
    ws = make_windows(T, H, F, stride)
    brute = [t for t in range(T + 1) if t >= H and t + F <= T and (t - H) % stride == 0]
    assert list(ws.ends) == brute
    assert len(ws) == (T - H - F) // stride + 1


def test_gather_windows_slices():
    series = np.arange(20 * 2 * 3, dtype=float).reshape(20, 2, 3)
    ws = make_windows(series, 6, 4, 5)
    w = gather_windows(series, ws)
    assert w.x.shape == (3, 6, 2, 3) and w.y.shape == (3, 4, 2) and w.ts.shape == (3, 2)
    t = ws.ends[1]
    np.testing.assert_array_equal(w.x[1], series[t - 6:t])
    np.testing.assert_array_equal(w.y[1], series[t:t + 4, :, 0])
    np.testing.assert_array_equal(w.ts[1], series[t - 1, 0, 1:])


def test_prepare_domain_split_and_context(tmp_path):
    spec = small_spec(n_steps=480)
    loaded = load_dataset(generate_domain(spec, tmp_path / "d"))
    b = prepare_domain(loaded, 24, 24, 3, 6, train_fraction=0.8, index=2)
    assert b.index == 2 and b.context.name == "d"
    assert len(b.train) == (384 - 48) // 24 + 1 and len(b.test) == (96 - 48) // 24 + 1
    # the test targets start after the training series ends
    np.testing.assert_array_equal(b.test.x[0], loaded.series[384:408])
    assert b.context.tau.defined.any()
    assert b.context.phi.shape == (5, 3)


def test_default_corpus_shape():
    train, held = default_corpus()
    assert len(train) == 3 and all(s.n_nodes == 20 and s.n_steps == 2016 for s in train)
    assert held.name not in {s.name for s in train}
    assert len({s.steps_per_day for s in train}) == 3  # heterogeneous periods


def test_loaded_graph_is_valid(tmp_path):
    loaded = load_dataset(generate_domain(small_spec(graph="geometric"), tmp_path / "g"))
    assert isinstance(loaded.graph, TrafficGraph)
    assert np.all(bfs_depth(loaded.graph.adjacency) >= 0)
