"""
Logging setup shared by the command line and the training loop.
"""

from __future__ import annotations

import logging
from pathlib import Path

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(run_dir: str | Path | None = None,
                      level: int = logging.INFO) -> logging.Logger:
    """
    Attach a stream handler (and a ``train.log`` file handler when a run
    directory is given) to the ``promptseg`` logger.

    Calling it again replaces the handlers installed by a previous call, so
    consecutive runs in one process do not write into each other's logs.

    :param run_dir: Directory receiving ``train.log``.
    :type run_dir: str | Path | None
    :param level: Logging level for the package logger.
    :type level: int
    :return: The configured package logger.
    :rtype: logging.Logger
    """
    root = logging.getLogger("promptseg")
    root.setLevel(level)

    for handler in list(root.handlers):
        if getattr(handler, "_promptseg_owned", False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if run_dir is not None:
        path = Path(run_dir)
        path.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(path / "train.log"))

    for handler in handlers:
        handler.setFormatter(formatter)
        handler._promptseg_owned = True  # type: ignore[attr-defined]
        root.addHandler(handler)

    root.propagate = False
    return root
