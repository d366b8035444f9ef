import time
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from httpx import BaseTransport, Client, ConnectTimeout, HTTPStatusError, ReadTimeout, RequestError

from src.audiofuse.errors import DataNotFoundError, ManifestParseError, RefusalError
from src.audiofuse.signal_io import ManifestEntry, check_leakage, save_manifest
from src.utils.app_logger import AppLogger
from src.utils.config_variables import Config

TRAINING_SUBSETS = ("a", "b", "c", "d", "e", "f")
LABELS = {"-1": 0, "1": 1}


class PhysioNetClient:
    """
    Client for the PhysioNet/CinC 2016 heart sound database
    """

    def __init__(self, config: Config, transport: Optional[BaseTransport] = None):
        """
        Initialize the client with the base URL and cooldown from the environment configuration
        :param config: Environment configuration
        :param transport: Optional httpx transport, used to serve responses without a network
        """
        self.config = config
        self.logger = AppLogger(__name__)
        self.base_url = str(self.config.physionet_base_url).rstrip("/") + "/"
        self.cooldown_seconds = float(self.config.physionet_cooldown)
        self.max_retries = 5
        self.retry_delay = 10  # seconds
        self.transport = transport

    def _client(self) -> Client:
        return Client(base_url=self.base_url, timeout=60.0, transport=self.transport)

    def _get_with_retry(self, path: str) -> bytes:
        """
        GET a file with retry on timeouts and connection errors
        :param path: Path relative to the database root
        :return: Response body
        """
        for attempt in range(self.max_retries):
            try:
                with self._client() as client:
                    response = client.get(path)
                    response.raise_for_status()
                    if self.cooldown_seconds:
                        time.sleep(self.cooldown_seconds)
                    return response.content

            except HTTPStatusError as err:
                if err.response.status_code == 404:
                    raise DataNotFoundError(f"{self.base_url}{path} does not exist") from None
                self.logger.warning(
                    "[PHYSIONET] HTTP error",
                    {"path": path, "status": err.response.status_code, "attempt": attempt + 1},
                )

            except (ReadTimeout, ConnectTimeout, RequestError) as err:
                self.logger.warning(
                    "[PHYSIONET] Request failed",
                    {"path": path, "error": str(err), "attempt": attempt + 1},
                )

            if attempt < self.max_retries - 1:
                time.sleep(self.retry_delay)

        self.logger.error("[PHYSIONET] Max retries exceeded", {"path": path})
        raise DataNotFoundError(f"{self.base_url}{path} unreachable after {self.max_retries} attempts")

    def fetch_reference(self, folder: str) -> List[Tuple[str, int]]:
        """
        Read the REFERENCE.csv of a folder
        :param folder: e.g. `training/training-a` or `validation`
        :return: (record name, label) pairs, labels mapped -1 -> 0 and 1 -> 1
        """
        text = self._get_with_retry(f"{folder}/REFERENCE.csv").decode("utf-8")
        records = []
        for line_number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) < 2 or fields[1] not in LABELS:
                raise ManifestParseError(f"{folder}/REFERENCE.csv:{line_number}: cannot parse {line!r}")
            records.append((fields[0], LABELS[fields[1]]))
        return records

    def download_record(self, folder: str, record: str, destination: Path) -> None:
        destination.parent.mkdir(parents=True, exist_ok=True)
        destination.write_bytes(self._get_with_retry(f"{folder}/{record}.wav"))

    def fetch_dataset(
        self, out_dir, subsets: Iterable[str] = TRAINING_SUBSETS, force: bool = False
    ) -> List[ManifestEntry]:
        """
        Download the chosen training subsets and the official validation records, then write
        `manifest.csv`. Training records duplicated in the validation set are dropped from
        training; the record name is the patient id.
        :param out_dir: Output directory
        :param subsets: Training subset letters
        :param force: Allow a non-empty output directory
        :return: Manifest entries
        """
        out_dir = Path(out_dir)
        subsets = [s.strip().lower() for s in subsets]
        unknown = sorted(set(subsets) - set(TRAINING_SUBSETS))
        if unknown:
            raise DataNotFoundError(f"unknown training subsets {unknown}, expected {TRAINING_SUBSETS}")
        if out_dir.exists() and any(out_dir.iterdir()) and not force:
            raise RefusalError(f"output directory {out_dir} is not empty; pass --force to overwrite")
        out_dir.mkdir(parents=True, exist_ok=True)

        validation = [
            (record, label)
            for record, label in self.fetch_reference("validation")
            if record[:1].lower() in subsets
        ]
        validation_names = {record for record, _ in validation}
        entries: List[ManifestEntry] = []
        removed: Dict[str, int] = {}

        for subset in subsets:
            folder = f"training/training-{subset}"
            for record, label in self.fetch_reference(folder):
                if record in validation_names:
                    removed[subset] = removed.get(subset, 0) + 1
                    continue
                relative = Path(f"training-{subset}") / f"{record}.wav"
                self.download_record(folder, record, out_dir / relative)
                entries.append(ManifestEntry(relative.as_posix(), label, record, "train"))

        for record, label in validation:
            relative = Path("validation") / f"{record}.wav"
            self.download_record("validation", record, out_dir / relative)
            entries.append(ManifestEntry(relative.as_posix(), label, record, "validation"))

        check_leakage(entries)
        save_manifest(entries, out_dir / "manifest.csv")
        self.logger.info(
            "[PHYSIONET] Dataset downloaded",
            {
                "out_dir": str(out_dir),
                "train": sum(e.split == "train" for e in entries),
                "validation": len(validation),
                "removed_duplicates": removed,
            },
        )
        return entries
