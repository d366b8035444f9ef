import datetime
import logging
from typing import Optional

from pythonjsonlogger import jsonlogger

LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}


class CustomJsonFormatter(jsonlogger.JsonFormatter):
    def add_fields(self, log_record, record, message_dict):
        super().add_fields(log_record, record, message_dict)
        if not log_record.get("timestamp"):
            now = datetime.datetime.now(datetime.timezone.utc).strftime(
                "%Y-%m-%dT%H:%M:%S.%fZ"
            )
            log_record["timestamp"] = now
        if log_record.get("level"):
            log_record["level"] = log_record["level"].upper()
        else:
            log_record["level"] = record.levelname


def setup_logging(level: str = "info", json_logging: bool = True) -> None:
    """
    Configure the root handler once per process
    :param level: One of debug, info, warn, error
    :param json_logging: Emit JSON lines instead of plain text
    :return: None
    """
    numeric_level = LOG_LEVELS.get(str(level).lower(), logging.INFO)
    logging.getLogger("httpx").setLevel(logging.WARNING)
    log_handler = logging.StreamHandler()
    log_handler.setLevel(numeric_level)
    if json_logging:
        log_handler.setFormatter(
            CustomJsonFormatter("%(timestamp)s %(level)s %(name)s %(message)s")
        )
    else:
        log_handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s")
        )
    logging.basicConfig(handlers=[log_handler], level=numeric_level, force=True)


class AppLogger:
    """
    Named logger taking an optional metadata dict with every message
    """

    def __init__(self, name: str):
        self.local_logger = logging.getLogger(name)

    @staticmethod
    def prepare_meta(meta: Optional[dict]) -> Optional[dict]:
        return None if meta is None else {"attributes": meta}

    def debug(self, message: str, meta: Optional[dict] = None) -> None:
        self.local_logger.debug(message, extra=self.prepare_meta(meta))

    def info(self, message: str, meta: Optional[dict] = None) -> None:
        self.local_logger.info(message, extra=self.prepare_meta(meta))

    def warning(self, message: str, meta: Optional[dict] = None) -> None:
        self.local_logger.warning(message, extra=self.prepare_meta(meta))

    def error(self, message: str, meta: Optional[dict] = None) -> None:
        self.local_logger.error(message, exc_info=1, extra=self.prepare_meta(meta))
