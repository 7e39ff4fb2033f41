import csv
import json
import logging
import struct
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from src.config import config
from src.models import BoundComparison, EnergyLedgerEntry, FieldRank, FixedPointTrace, GridSpec, SnapshotHeader

logger = logging.getLogger(__name__)

MAGIC = b"WLRY"
HEADER = struct.Struct("<4sI3IdBd")
COMPONENTS = {FieldRank.SCALAR: 1, FieldRank.VECTOR: 3, FieldRank.TENSOR: 9}
LEDGER_COLUMNS = list(EnergyLedgerEntry.model_fields)
TRACE_COLUMNS = ["k", "residual", "x_norm"]
BOUND_COLUMNS = ["name", "measured", "bound", "ratio"]

PathLike = Union[str, Path]


class SnapshotService:
    def __init__(self):
        harness_config = config.harness
        self.version = harness_config.snapshot_version
        self.number_format = f"%.{harness_config.csv_digits}g"

    # Binary field snapshots

    @staticmethod
    def rank_of(field: np.ndarray) -> FieldRank:
        leading = field.ndim - 3
        if leading not in (0, 1, 2):
            raise ValueError(f"Cannot snapshot a field of shape {field.shape}")
        return FieldRank(leading)

    def encode(self, field: np.ndarray, grid: GridSpec, t: float = 0.0) -> bytes:
        """Header followed by little-endian f64 values, components interleaved last."""
        rank = self.rank_of(field)
        n = grid.n
        if field.shape[-3:] != (n, n, n):
            raise ValueError(f"Field of shape {field.shape} does not match grid n={n}")
        flat = field.reshape((COMPONENTS[rank], n, n, n))
        payload = np.ascontiguousarray(np.moveaxis(flat, 0, -1), dtype="<f8").tobytes()
        header = HEADER.pack(MAGIC, self.version, n, n, n, grid.half_width, int(rank), t)
        return header + payload

    def decode(self, data: bytes) -> Tuple[SnapshotHeader, np.ndarray]:
        header = self.decode_header(data)
        nx, ny, nz = header.shape
        count = COMPONENTS[header.rank]
        expected = HEADER.size + count * nx * ny * nz * 8
        if len(data) != expected:
            raise ValueError(f"Snapshot payload has {len(data)} bytes, expected {expected}")
        values = np.frombuffer(data, dtype="<f8", offset=HEADER.size).reshape((nx, ny, nz, count))
        field = np.moveaxis(values, -1, 0).astype(np.float64)
        if header.rank == FieldRank.SCALAR:
            field = field[0]
        elif header.rank == FieldRank.TENSOR:
            field = field.reshape((3, 3, nx, ny, nz))
        return header, field

    @staticmethod
    def decode_header(data: bytes) -> SnapshotHeader:
        if len(data) < HEADER.size:
            raise ValueError("Snapshot is shorter than its header")
        magic, version, nx, ny, nz, half_width, rank, t = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError(f"Bad snapshot magic {magic!r}")
        return SnapshotHeader(magic=magic.decode("ascii"), version=version, shape=(nx, ny, nz),
                              half_width=half_width, rank=FieldRank(rank), time=t)

    def write_snapshot(self, path: PathLike, field: np.ndarray, grid: GridSpec, t: float = 0.0) -> str:
        try:
            target = Path(path)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(self.encode(field, grid, t))
            return str(target)
        except OSError as e:
            raise RuntimeError(f"Failed to write snapshot: {e}")

    def read_snapshot(self, path: PathLike) -> Tuple[SnapshotHeader, np.ndarray]:
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise RuntimeError(f"Failed to read snapshot: {e}")
        return self.decode(data)

    def snapshot_info(self, path: PathLike) -> SnapshotHeader:
        try:
            with open(path, "rb") as handle:
                data = handle.read(HEADER.size)
        except OSError as e:
            raise RuntimeError(f"Failed to read snapshot: {e}")
        return self.decode_header(data)

    @staticmethod
    def grid_of(header: SnapshotHeader) -> GridSpec:
        nx, ny, nz = header.shape
        if not nx == ny == nz:
            raise ValueError(f"Only cubic snapshots are supported, got {header.shape}")
        return GridSpec(n=nx, half_width=header.half_width)

    # Tabular outputs

    def _format(self, value: float) -> str:
        return self.number_format % value

    def write_ledger(self, path: PathLike, entries: Sequence[EnergyLedgerEntry]) -> str:
        rows = [[self._format(getattr(entry, column)) for column in LEDGER_COLUMNS] for entry in entries]
        return self._write_csv(path, LEDGER_COLUMNS, rows)

    def read_ledger(self, path: PathLike) -> List[EnergyLedgerEntry]:
        try:
            with open(path, newline="") as handle:
                reader = csv.DictReader(handle)
                missing = set(LEDGER_COLUMNS) - set(reader.fieldnames or [])
                if missing:
                    raise ValueError(f"Ledger {path} is missing columns: {sorted(missing)}")
                return [EnergyLedgerEntry(**{key: float(row[key]) for key in LEDGER_COLUMNS}) for row in reader]
        except OSError as e:
            raise RuntimeError(f"Failed to read ledger: {e}")

    def write_trace(self, path: PathLike, trace: FixedPointTrace) -> str:
        rows = [[str(item.k), self._format(item.residual), self._format(item.x_norm)] for item in trace.iterates]
        return self._write_csv(path, TRACE_COLUMNS, rows)

    def write_bounds(self, path: PathLike, comparisons: Sequence[BoundComparison]) -> str:
        rows = [[item.name, self._format(item.measured), self._format(item.bound), self._format(item.ratio)]
                for item in comparisons]
        return self._write_csv(path, BOUND_COLUMNS, rows)

    def write_table(self, path: PathLike, columns: Sequence[str], rows: Sequence[Sequence[float]]) -> str:
        formatted = [[self._format(value) for value in row] for row in rows]
        return self._write_csv(path, list(columns), formatted)

    def _write_csv(self, path: PathLike, columns: List[str], rows: List[List[str]]) -> str:
        try:
            target = Path(path)
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, "w", newline="") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(columns)
                writer.writerows(rows)
            return str(target)
        except OSError as e:
            raise RuntimeError(f"Failed to write {path}: {e}")

    def write_json(self, path: PathLike, payload: dict) -> str:
        try:
            target = Path(path)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
            return str(target)
        except OSError as e:
            raise RuntimeError(f"Failed to write {path}: {e}")
