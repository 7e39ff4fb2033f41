import struct

from src.models import FixedPointIterate, FixedPointTrace
from src.services.snapshot_service import HEADER, LEDGER_COLUMNS
from tests.conftest import *  # Import all fixtures


@pytest.mark.unit
class TestSnapshotService:
    def test_vector_snapshot_round_trip_is_bitwise(self, snapshot_service, field_service, small_grid, tmp_path,
                                                   test_data):
        u = field_service.random_solenoidal(small_grid, test_data["seed"])
        path = snapshot_service.write_snapshot(tmp_path / "u.wlry", u, small_grid, t=0.25)
        header, decoded = snapshot_service.read_snapshot(path)
        assert np.array_equal(decoded, u)
        assert header.magic == "WLRY"
        assert header.shape == (16, 16, 16)
        assert header.half_width == small_grid.half_width
        assert header.rank == FieldRank.VECTOR
        assert header.time == 0.25

    def test_components_are_interleaved_last(self, snapshot_service, small_grid):
        u = np.zeros((3, 16, 16, 16))
        u[0], u[1], u[2] = 1.0, 2.0, 3.0
        data = snapshot_service.encode(u, small_grid)
        first = struct.unpack_from("<3d", data, HEADER.size)
        assert first == (1.0, 2.0, 3.0)
        assert len(data) == HEADER.size + 3 * 16 ** 3 * 8

    def test_tensor_and_scalar_shapes(self, snapshot_service, field_service, small_grid):
        F = field_service.gaussian_forcing_profile(small_grid)
        header, decoded = snapshot_service.decode(snapshot_service.encode(F, small_grid))
        assert header.rank == FieldRank.TENSOR
        assert np.array_equal(decoded, F)
        scalar = field_service.gaussian(small_grid)
        header, decoded = snapshot_service.decode(snapshot_service.encode(scalar, small_grid))
        assert header.rank == FieldRank.SCALAR
        assert decoded.shape == (16, 16, 16)

    def test_bad_magic_is_rejected(self, snapshot_service, small_grid):
        data = bytearray(snapshot_service.encode(np.zeros((16, 16, 16)), small_grid))
        data[:4] = b"NOPE"
        with pytest.raises(ValueError) as excinfo:
            snapshot_service.decode(bytes(data))
        assert "magic" in str(excinfo.value)

    def test_truncated_payload_is_rejected(self, snapshot_service, small_grid):
        data = snapshot_service.encode(np.zeros((16, 16, 16)), small_grid)
        with pytest.raises(ValueError):
            snapshot_service.decode(data[:-8])
        with pytest.raises(ValueError):
            snapshot_service.decode_header(data[:10])

    def test_unsupported_rank_is_rejected(self, snapshot_service, small_grid):
        with pytest.raises(ValueError):
            snapshot_service.encode(np.zeros((2, 3, 3, 16, 16, 16)), small_grid)
        with pytest.raises(ValueError):
            snapshot_service.encode(np.zeros((3, 8, 8, 8)), small_grid)

    def test_missing_snapshot(self, snapshot_service, tmp_path):
        with pytest.raises(RuntimeError) as excinfo:
            snapshot_service.read_snapshot(tmp_path / "missing.wlry")
        assert "Failed to read snapshot" in str(excinfo.value)
        with pytest.raises(RuntimeError):
            snapshot_service.snapshot_info(tmp_path / "missing.wlry")

    def test_snapshot_info_and_grid(self, snapshot_service, small_grid, tmp_path):
        path = snapshot_service.write_snapshot(tmp_path / "p.wlry", np.ones((16, 16, 16)), small_grid, t=1.5)
        header = snapshot_service.snapshot_info(path)
        assert header.time == 1.5
        assert snapshot_service.grid_of(header) == small_grid

    def test_ledger_round_trip(self, snapshot_service, ledger_entries, tmp_path):
        path = snapshot_service.write_ledger(tmp_path / "ledger.csv", ledger_entries)
        with open(path) as handle:
            assert handle.readline().strip().split(",") == LEDGER_COLUMNS
        assert snapshot_service.read_ledger(path) == ledger_entries

    def test_ledger_with_missing_columns(self, snapshot_service, tmp_path):
        path = tmp_path / "broken.csv"
        path.write_text("t,lhs_energy\n0,1\n")
        with pytest.raises(ValueError) as excinfo:
            snapshot_service.read_ledger(path)
        assert "missing columns" in str(excinfo.value)

    def test_trace_and_tables(self, snapshot_service, tmp_path):
        trace = FixedPointTrace(iterates=[FixedPointIterate(k=0, residual=0.5, x_norm=1.0)], converged=False,
                                relaxation=0.5)
        path = snapshot_service.write_trace(tmp_path / "trace.csv", trace)
        assert Path(path).read_text().splitlines() == ["k,residual,x_norm", "0,0.5,1"]
        table = snapshot_service.write_table(tmp_path / "t.csv", ["a", "b"], [[1.0, 0.1]])
        assert Path(table).read_text().splitlines()[1] == "1,0.10000000000000001"

    def test_write_json(self, snapshot_service, tmp_path):
        path = snapshot_service.write_json(tmp_path / "nested" / "report.json", {"b": 1, "a": [1.5]})
        assert json.loads(Path(path).read_text()) == {"a": [1.5], "b": 1}
