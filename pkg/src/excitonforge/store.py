"""
Persistence: the append-only structure store and the text formats of the
network artifacts.

A store directory holds three files:

    structures.bin   one record per surviving structure:
                     seed (<u8), n_sites (u1), 3N positions (<f8)
    census.bin       one record per surviving structure:
                     seed (<u8), epsilon, t_star, epsilon_int (<f8)
    checkpoint.json  the committed state: next sample index, byte counts and
                     SHA-256 of both files, the efficiency histogram of all
                     samples and the config hash

Bytes past the committed counts belong to an interrupted batch and are
truncated when the store is reopened.
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .exceptions import StoreError
from .geometry import SiteConfiguration
from .network import ClusterPartition, EfficiencyNetwork, LayoutCoordinates

logger = logging.getLogger(__name__)

STRUCTURES_FILE = "structures.bin"
CENSUS_FILE = "census.bin"
CHECKPOINT_FILE = "checkpoint.json"
HISTOGRAM_BINS = 1000

CENSUS_DTYPE = np.dtype([("seed", "<u8"), ("epsilon", "<f8"), ("t_star", "<f8"), ("epsilon_int", "<f8")])


def structure_dtype(n_sites: int) -> np.dtype:
    """Packed little-endian record of one structure."""
    return np.dtype([("seed", "<u8"), ("n_sites", "u1"), ("positions", "<f8", (3 * n_sites,))])


def efficiency_histogram(epsilons: np.ndarray) -> np.ndarray:
    """Counts on 1000 bins of width 1e-3 over [0, 1]."""
    counts, _ = np.histogram(np.clip(epsilons, 0.0, 1.0), bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return counts.astype(np.int64)


def _sha256(path: Path, length: int):
    """Running SHA-256 of the first `length` bytes of `path`."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        remaining = length
        while remaining > 0:
            chunk = f.read(min(remaining, 1 << 20))
            if not chunk:
                break
            digest.update(chunk)
            remaining -= len(chunk)
    return digest


class StructureStore:
    """Append-only store of efficient structures and their census records."""

    def __init__(self, directory: Path, n_sites: int, config_hash: str = ""):
        self.directory = Path(directory)
        self.n_sites = int(n_sites)
        self.config_hash = config_hash
        self.dtype = structure_dtype(self.n_sites)
        self.next_index = 0
        self.histogram = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
        self._committed = {STRUCTURES_FILE: 0, CENSUS_FILE: 0}
        self._hashers = {STRUCTURES_FILE: hashlib.sha256(), CENSUS_FILE: hashlib.sha256()}
        self._digests = {name: h.hexdigest() for name, h in self._hashers.items()}
        self._index: Optional[Dict[int, int]] = None

    # --- lifecycle ---

    @classmethod
    def create(cls, directory: Path, n_sites: int, config_hash: str = "") -> "StructureStore":
        """Creates an empty store, replacing any previous one in `directory`."""
        store = cls(directory, n_sites, config_hash)
        try:
            store.directory.mkdir(parents=True, exist_ok=True)
            for name in (STRUCTURES_FILE, CENSUS_FILE):
                (store.directory / name).write_bytes(b"")
        except OSError as e:
            raise StoreError(f"Could not create store in {store.directory}: {e}", resumable=False) from e
        store._write_checkpoint()
        return store

    @classmethod
    def open(cls, directory: Path) -> "StructureStore":
        """
        Opens an existing store, discarding uncommitted bytes.

        Raises:
            StoreError: if the checkpoint is missing or the committed content
                        fails its checksum.
        """
        directory = Path(directory)
        path = directory / CHECKPOINT_FILE
        try:
            with open(path, "r") as f:
                state = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise StoreError(f"No readable checkpoint at {path}: {e}", resumable=False) from e

        store = cls(directory, state["n_sites"], state.get("config_hash", ""))
        store.next_index = int(state["next_index"])
        store.histogram = np.asarray(state["histogram"], dtype=np.int64)
        store._committed = {k: int(v) for k, v in state["committed_bytes"].items()}
        store._digests = dict(state["sha256"])
        store._recover()
        return store

    @classmethod
    def open_or_create(cls, directory: Path, n_sites: int, config_hash: str) -> "StructureStore":
        """Reopens a store written with the same config hash, or starts a new one."""
        if (Path(directory) / CHECKPOINT_FILE).exists():
            store = cls.open(directory)
            if store.config_hash == config_hash and store.n_sites == n_sites:
                return store
            logger.warning("Store in %s was written with another configuration; starting over", directory)
        return cls.create(directory, n_sites, config_hash)

    def _recover(self):
        for name, committed in self._committed.items():
            path = self.directory / name
            try:
                size = path.stat().st_size
                if size < committed:
                    raise StoreError(f"{path} is shorter than its committed length", resumable=False)
                if size > committed:
                    logger.warning("Truncating %d uncommitted bytes from %s", size - committed, path)
                    with open(path, "r+b") as f:
                        f.truncate(committed)
                hasher = _sha256(path, committed)
                if hasher.hexdigest() != self._digests[name]:
                    raise StoreError(f"Checksum mismatch in {path}", resumable=False)
                self._hashers[name] = hasher
            except OSError as e:
                raise StoreError(f"Could not verify {path}: {e}", resumable=False) from e

    def _write_checkpoint(self):
        state = {
            "n_sites": self.n_sites,
            "config_hash": self.config_hash,
            "next_index": self.next_index,
            "committed_bytes": self._committed,
            "sha256": self._digests,
            "histogram": self.histogram.tolist(),
        }
        path = self.directory / CHECKPOINT_FILE
        tmp = path.with_suffix(".json.tmp")
        try:
            with open(tmp, "w") as f:
                json.dump(state, f, indent=1, sort_keys=True)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except OSError as e:
            raise StoreError(f"Could not write checkpoint {path}: {e}") from e

    # --- writing ---

    def append_batch(
        self,
        seeds: np.ndarray,
        positions: np.ndarray,
        census: np.ndarray,
        histogram: np.ndarray,
        next_index: int,
    ):
        """
        Appends the survivors of one batch and commits the new state.

        Args:
            seeds: Seeds of the surviving structures.
            positions: Their positions, shape (K, N, 3).
            census: CENSUS_DTYPE records of the survivors.
            histogram: Efficiency counts of every sample in the batch.
            next_index: First sample index not yet processed.
        """
        records = np.zeros(len(seeds), dtype=self.dtype)
        records["seed"] = seeds
        records["n_sites"] = self.n_sites
        records["positions"] = np.asarray(positions, dtype=float).reshape(len(seeds), -1)
        try:
            for name, payload in ((STRUCTURES_FILE, records), (CENSUS_FILE, np.asarray(census, dtype=CENSUS_DTYPE))):
                path = self.directory / name
                data = payload.tobytes()
                with open(path, "ab") as f:
                    f.write(data)
                    f.flush()
                    os.fsync(f.fileno())
                # only the appended bytes are hashed
                hasher = self._hashers[name].copy()
                hasher.update(data)
                self._hashers[name] = hasher
                self._committed[name] += len(data)
                self._digests[name] = hasher.hexdigest()
        except OSError as e:
            raise StoreError(f"Could not append to store in {self.directory}: {e}") from e
        self.histogram = self.histogram + np.asarray(histogram, dtype=np.int64)
        self.next_index = int(next_index)
        self._index = None
        self._write_checkpoint()

    # --- reading ---

    def __len__(self) -> int:
        return self._committed[STRUCTURES_FILE] // self.dtype.itemsize

    @property
    def n_samples(self) -> int:
        return int(self.histogram.sum())

    def records(self) -> np.ndarray:
        try:
            raw = (self.directory / STRUCTURES_FILE).read_bytes()[: self._committed[STRUCTURES_FILE]]
        except OSError as e:
            raise StoreError(f"Could not read structures: {e}") from e
        return np.frombuffer(raw, dtype=self.dtype)

    def census(self) -> np.ndarray:
        try:
            raw = (self.directory / CENSUS_FILE).read_bytes()[: self._committed[CENSUS_FILE]]
        except OSError as e:
            raise StoreError(f"Could not read census: {e}") from e
        return np.frombuffer(raw, dtype=CENSUS_DTYPE)

    def structures(self):
        return [
            SiteConfiguration(r["positions"].reshape(self.n_sites, 3), seed=int(r["seed"]))
            for r in self.records()
        ]

    @property
    def index(self) -> Dict[int, int]:
        """Seed to byte offset in structures.bin."""
        if self._index is None:
            self._index = {int(seed): k * self.dtype.itemsize for k, seed in enumerate(self.records()["seed"])}
        return self._index

    def get(self, seed: int) -> SiteConfiguration:
        offset = self.index.get(int(seed))
        if offset is None:
            raise KeyError(seed)
        record = self.records()[offset // self.dtype.itemsize]
        return SiteConfiguration(record["positions"].reshape(self.n_sites, 3), seed=int(record["seed"]))

    def census_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.census())

    def export_csv(self, path: Path) -> Path:
        """Plain-text mirror of structures.bin: seed, n_sites, x0, y0, z0, ..."""
        records = self.records()
        columns = [f"{axis}{k}" for k in range(self.n_sites) for axis in "xyz"]
        frame = pd.DataFrame(records["positions"].reshape(len(records), -1), columns=columns)
        frame.insert(0, "n_sites", records["n_sites"].astype(int))
        frame.insert(0, "seed", records["seed"])
        frame.to_csv(path, index=False, float_format="%.17g")
        return Path(path)


# --- network artifacts ---


def _read_table(path: Path, names, dtype=None) -> pd.DataFrame:
    path = Path(path)
    if path.stat().st_size == 0:
        return pd.DataFrame({name: pd.Series(dtype=float) for name in names})
    return pd.read_csv(path, sep=" ", header=None, names=names, dtype=dtype)


def write_edge_list(path: Path, net: EfficiencyNetwork):
    with open(path, "w") as f:
        for (a, b), s2 in zip(net.edges, net.s_squared):
            f.write(f"{int(a)} {int(b)} {float(s2):.17g}\n")


def read_edge_list(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (edges of shape (E, 2), s_squared)."""
    frame = _read_table(path, ["a", "b", "s_squared"])
    return frame[["a", "b"]].to_numpy(dtype=np.int64).reshape(-1, 2), frame["s_squared"].to_numpy(dtype=float)


def write_partition(path: Path, partition: ClusterPartition):
    with open(path, "w") as f:
        for node, cluster in enumerate(partition.assignment):
            f.write(f"{node} {int(cluster)}\n")


def read_partition(path: Path, noise_floor: float = 0.005, inflation: float = 1.4) -> ClusterPartition:
    frame = _read_table(path, ["node", "cluster"])
    assignment = np.zeros(len(frame), dtype=np.int64)
    assignment[frame["node"].to_numpy(dtype=int)] = frame["cluster"].to_numpy(dtype=int)
    ids, counts = np.unique(assignment, return_counts=True)
    populations = {int(c): n / len(assignment) for c, n in zip(ids, counts)}
    noise = tuple(c for c, fraction in populations.items() if fraction < noise_floor)
    return ClusterPartition(assignment, populations, noise_clusters=noise, inflation=inflation)


def write_layout(path: Path, layout: LayoutCoordinates):
    with open(path, "w") as f:
        for node, (x, y) in enumerate(layout.coordinates):
            f.write(f"{node} {x:.17g} {y:.17g}\n")


def read_layout(path: Path) -> LayoutCoordinates:
    frame = _read_table(path, ["node", "x", "y"])
    coordinates = np.zeros((len(frame), 2))
    coordinates[frame["node"].to_numpy(dtype=int)] = frame[["x", "y"]].to_numpy(dtype=float)
    return LayoutCoordinates(coordinates)
