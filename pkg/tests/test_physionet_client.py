import httpx
import pandas as pd
import pytest

from src.audiofuse.errors import DataNotFoundError, ManifestParseError, RefusalError
from src.utils.physionet_client import PhysioNetClient

ROOT = "/files/challenge-2016/1.0.0/"

FILES = {
    "validation/REFERENCE.csv": b"a0001,1\na0002,-1\nb0001,-1\n",
    "training/training-a/REFERENCE.csv": b"a0001,1\na0002,-1\na0003,1\na0004,-1\n",
    "training/training-b/REFERENCE.csv": b"b0001,-1\nb0002,1\n",
}


def serve(files, calls=None):
    def handler(request: httpx.Request) -> httpx.Response:
        path = request.url.path[len(ROOT) :]
        if calls is not None:
            calls.append(path)
        if path in files:
            return httpx.Response(200, content=files[path])
        if path.endswith(".wav"):
            return httpx.Response(200, content=b"RIFF" + path.encode())
        return httpx.Response(404)

    return httpx.MockTransport(handler)


@pytest.mark.usefixtures("setup_config")
class TestPhysioNetClient:
    def client(self, transport):
        client = PhysioNetClient(self.mock_config, transport=transport)
        client.retry_delay = 0
        return client

    def test_reference_labels_are_mapped(self):
        records = self.client(serve(FILES)).fetch_reference("training/training-a")
        assert records == [("a0001", 1), ("a0002", 0), ("a0003", 1), ("a0004", 0)]

    def test_unparseable_reference(self):
        files = {"validation/REFERENCE.csv": b"a0001,0\n"}
        with pytest.raises(ManifestParseError, match="REFERENCE.csv:1"):
            self.client(serve(files)).fetch_reference("validation")

    def test_missing_file_is_not_retried(self):
        calls = []
        with pytest.raises(DataNotFoundError, match="does not exist"):
            self.client(serve({}, calls)).fetch_reference("training/training-z")
        assert len(calls) == 1

    def test_server_errors_are_retried(self):
        calls = []

        def handler(request):
            calls.append(request.url.path)
            return httpx.Response(503)

        client = self.client(httpx.MockTransport(handler))
        client.max_retries = 3
        with pytest.raises(DataNotFoundError, match="unreachable after 3 attempts"):
            client.fetch_reference("validation")
        assert len(calls) == 3

    def test_connection_errors_are_retried(self):
        attempts = []

        def handler(request):
            attempts.append(1)
            if len(attempts) < 2:
                raise httpx.ConnectError("connection refused", request=request)
            return httpx.Response(200, content=FILES["validation/REFERENCE.csv"])

        records = self.client(httpx.MockTransport(handler)).fetch_reference("validation")
        assert len(records) == 3
        assert len(attempts) == 2

    def test_fetch_dataset_layout_and_duplicates(self, tmp_path):
        out = tmp_path / "physionet"
        entries = self.client(serve(FILES)).fetch_dataset(out, ["a", "b"])

        train = [e for e in entries if e.split == "train"]
        validation = [e for e in entries if e.split == "validation"]
        assert sorted(e.patient_id for e in train) == ["a0003", "a0004", "b0002"]
        assert sorted(e.patient_id for e in validation) == ["a0001", "a0002", "b0001"]
        assert (out / "training-a" / "a0003.wav").read_bytes().startswith(b"RIFF")
        assert (out / "validation" / "a0001.wav").is_file()
        assert not (out / "training-a" / "a0001.wav").exists()

        manifest = pd.read_csv(out / "manifest.csv")
        assert len(manifest) == 6
        assert manifest.loc[manifest["patient_id"] == "b0002", "label"].item() == 1
        assert manifest.loc[manifest["patient_id"] == "a0002", "label"].item() == 0

    def test_fetch_dataset_keeps_validation_of_selected_subsets(self, tmp_path):
        entries = self.client(serve(FILES)).fetch_dataset(tmp_path / "d", ["b"])
        assert sorted(e.patient_id for e in entries if e.split == "validation") == ["b0001"]

    def test_fetch_dataset_refuses_non_empty_directory(self, tmp_path):
        (tmp_path / "keep.txt").write_text("x")
        with pytest.raises(RefusalError):
            self.client(serve(FILES)).fetch_dataset(tmp_path, ["a"])

    def test_unknown_subset(self, tmp_path):
        with pytest.raises(DataNotFoundError, match="unknown training subsets"):
            self.client(serve(FILES)).fetch_dataset(tmp_path / "d", ["g"])
