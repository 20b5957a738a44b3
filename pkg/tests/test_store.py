import hashlib
import json

import numpy as np
import pandas as pd
import pytest

from excitonforge import store as store_module
from excitonforge.exceptions import StoreError
from excitonforge.geometry import sample_random_structure
from excitonforge.network import ClusterPartition, EfficiencyNetwork, LayoutCoordinates, NodeRef
from excitonforge.store import CENSUS_DTYPE, StructureStore


def census_records(seeds, epsilon=0.95):
    records = np.zeros(len(seeds), dtype=CENSUS_DTYPE)
    records["seed"] = seeds
    records["epsilon"] = epsilon
    records["t_star"] = 0.5
    records["epsilon_int"] = 0.3
    return records


def append_structures(store, seeds, next_index):
    positions = np.stack([sample_random_structure(store.n_sites, s).positions for s in seeds])
    histogram = store_module.efficiency_histogram(np.full(len(seeds), 0.95))
    store.append_batch(np.array(seeds, dtype=np.uint64), positions, census_records(seeds), histogram, next_index)
    return positions


@pytest.fixture
def filled_store(tmp_path):
    store = StructureStore.create(tmp_path / "store", n_sites=5, config_hash="abc")
    append_structures(store, [11, 12], next_index=10)
    append_structures(store, [23], next_index=20)
    return store


def test_appended_batches_survive_reopening(filled_store):
    # Act
    reopened = StructureStore.open(filled_store.directory)

    # Assert
    assert len(reopened) == 3
    assert reopened.next_index == 20
    assert reopened.config_hash == "abc"
    assert reopened.n_samples == 3
    assert reopened.census()["seed"].tolist() == [11, 12, 23]
    assert np.array_equal(reopened.get(12).positions, sample_random_structure(5, 12).positions)
    assert [s.seed for s in reopened.structures()] == [11, 12, 23]

def test_appending_hashes_only_the_new_bytes(mocker, tmp_path):
    # Arrange
    store = StructureStore.create(tmp_path / "store", n_sites=5, config_hash="abc")
    full_rehash = mocker.spy(store_module, "_sha256")

    # Act
    for k in range(4):
        append_structures(store, [100 + 2 * k, 101 + 2 * k], next_index=10 * (k + 1))

    # Assert
    assert full_rehash.call_count == 0
    with open(store.directory / store_module.CHECKPOINT_FILE) as f:
        digests = json.load(f)["sha256"]
    for name in (store_module.STRUCTURES_FILE, store_module.CENSUS_FILE):
        assert digests[name] == hashlib.sha256((store.directory / name).read_bytes()).hexdigest()


def test_reopened_store_keeps_hashing_where_it_left_off(filled_store):
    reopened = StructureStore.open(filled_store.directory)
    append_structures(reopened, [31], next_index=30)

    again = StructureStore.open(filled_store.directory)

    assert [s.seed for s in again.structures()] == [11, 12, 23, 31]



def test_unknown_seed_raises_key_error(filled_store):
    with pytest.raises(KeyError):
        filled_store.get(99)


def test_uncommitted_tail_is_truncated(filled_store):
    path = filled_store.directory / store_module.STRUCTURES_FILE
    committed = path.stat().st_size
    with open(path, "ab") as f:
        f.write(b"\x00" * 17)

    reopened = StructureStore.open(filled_store.directory)

    assert path.stat().st_size == committed
    assert len(reopened) == 3


def test_corrupted_content_is_fatal(filled_store):
    path = filled_store.directory / store_module.CENSUS_FILE
    data = bytearray(path.read_bytes())
    data[10] ^= 0xFF
    path.write_bytes(bytes(data))

    with pytest.raises(StoreError) as excinfo:
        StructureStore.open(filled_store.directory)
    assert excinfo.value.resumable is False


def test_shortened_file_is_fatal(filled_store):
    path = filled_store.directory / store_module.STRUCTURES_FILE
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(StoreError):
        StructureStore.open(filled_store.directory)


def test_missing_checkpoint_is_fatal(tmp_path):
    with pytest.raises(StoreError) as excinfo:
        StructureStore.open(tmp_path / "nowhere")
    assert excinfo.value.resumable is False


def test_open_or_create_restarts_on_config_change(filled_store):
    same = StructureStore.open_or_create(filled_store.directory, 5, "abc")
    assert len(same) == 3

    fresh = StructureStore.open_or_create(filled_store.directory, 5, "other")
    assert len(fresh) == 0
    assert fresh.next_index == 0
    assert fresh.n_samples == 0


def test_histogram_uses_thousand_bins():
    counts = store_module.efficiency_histogram(np.array([0.0, 0.0005, 0.9995, 1.0, 1.2]))
    assert counts.shape == (1000,)
    assert counts[0] == 2
    assert counts[-1] == 3


def test_export_csv_mirrors_records(filled_store, tmp_path):
    path = filled_store.export_csv(tmp_path / "structures.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns[:5]) == ["seed", "n_sites", "x0", "y0", "z0"]
    assert frame["seed"].tolist() == [11, 12, 23]
    assert frame["x4"].tolist() == [1.0, 1.0, 1.0]


def test_census_frame_has_named_columns(filled_store):
    frame = filled_store.census_frame()
    assert list(frame.columns) == ["seed", "epsilon", "t_star", "epsilon_int"]


def test_edge_list_round_trip_keeps_exact_values(tmp_path):
    net = EfficiencyNetwork(
        nodes=tuple(NodeRef(i, 0.9) for i in range(3)),
        edges=np.array([[0, 1], [1, 2]]),
        s_squared=np.array([1 / 3, 0.0123456789]),
        cutoff=0.0125,
    )
    path = tmp_path / "edges.txt"

    store_module.write_edge_list(path, net)
    edges, weights = store_module.read_edge_list(path)

    assert edges.tolist() == [[0, 1], [1, 2]]
    assert weights.tolist() == [1 / 3, 0.0123456789]


def test_empty_edge_list_reads_as_no_edges(tmp_path):
    path = tmp_path / "edges.txt"
    path.write_text("")
    edges, weights = store_module.read_edge_list(path)
    assert edges.shape == (0, 2)
    assert weights.shape == (0,)


def test_partition_and_layout_files(tmp_path):
    partition = ClusterPartition(np.array([1, 1, 2, 1]), {1: 0.75, 2: 0.25})
    layout = LayoutCoordinates(np.array([[0.0, 1.0], [0.5, -0.25], [2.0, 0.0], [1e-3, 3.0]]))

    store_module.write_partition(tmp_path / "partition.txt", partition)
    store_module.write_layout(tmp_path / "layout.txt", layout)
    restored = store_module.read_partition(tmp_path / "partition.txt", noise_floor=0.3)
    restored_layout = store_module.read_layout(tmp_path / "layout.txt")

    assert restored.assignment.tolist() == [1, 1, 2, 1]
    assert restored.populations == {1: 0.75, 2: 0.25}
    assert restored.noise_clusters == (2,)
    assert np.array_equal(restored_layout.coordinates, layout.coordinates)
