"""
This module stores the global logging configuration dictionary
"""

import logging.config
import os
from typing import Any

from clockdistill.config import LOG_DIR

AREAS: tuple[str, ...] = ("geometry", "detector", "distill", "data", "harness")


def build_logging_config(log_dir: str = LOG_DIR) -> dict[str, Any]:
    """
    Builds the dictConfig dictionary, one rotating json file per feature area
    :param log_dir: directory receiving the *.log files
    :return: dict accepted by logging.config.dictConfig
    """
    handlers: dict[str, Any] = {
        f"{area}_file": {
            "class": "logging.handlers.RotatingFileHandler",
            "filename": os.path.join(log_dir, f"{area}.log"),
            "maxBytes": 10485760,  # 10MB
            "formatter": "json",
            "backupCount": 5,
        }
        for area in AREAS
    }
    handlers["console"] = {"class": "logging.StreamHandler", "formatter": "json"}
    loggers: dict[str, Any] = {
        area: {
            "handlers": [f"{area}_file", "console"],
            "level": "INFO",
            "propagate": False,
        }
        for area in AREAS
    }
    # per-run file handler is attached by harness.reports
    loggers["metrics"] = {"handlers": [], "level": "INFO", "propagate": False}
    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "json": {
                "()": "pythonjsonlogger.json.JsonFormatter",
                "format": "%(asctime)s %(name)s %(levelname)s %(message)s",
            }
        },
        "handlers": handlers,
        "loggers": loggers,
    }


LOGGING_CONFIG: dict[str, Any] = build_logging_config()


def configure_logging(log_dir: str | None = None) -> None:
    """
    Applies the logging configuration, creating the log directory on demand
    :param log_dir: overrides CLOCKDISTILL_LOG_DIR when given
    """
    target = log_dir or LOG_DIR
    os.makedirs(target, exist_ok=True)
    config = LOGGING_CONFIG if log_dir is None else build_logging_config(target)
    logging.config.dictConfig(config)
