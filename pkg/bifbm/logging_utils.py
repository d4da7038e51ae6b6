from __future__ import annotations

import logging
import sys
import time
from collections import deque
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

LOG_FORMAT = "%(asctime)s %(levelname)s %(message)s"
LOG_DATEFMT = "%Y-%m-%dT%H:%M:%S%z"


class LineCappedFileHandler(logging.FileHandler):
    """File handler that keeps only the newest ``max_lines`` lines on disk.

    Long Monte Carlo sweeps log one line per ensemble block, so the file is
    cut back to its tail every ``trim_every`` records and again on close.
    """

    def __init__(self, filename: Path, max_lines: int, trim_every: int = 20) -> None:
        filename.parent.mkdir(parents=True, exist_ok=True)
        super().__init__(filename, encoding="utf-8")
        self.path = filename
        self.max_lines = max(1, max_lines)
        self.trim_every = max(1, trim_every)
        self._pending = 0

    def emit(self, record: logging.LogRecord) -> None:
        super().emit(record)
        self._pending += 1
        if self._pending >= self.trim_every:
            self.trim()

    def close(self) -> None:
        try:
            self.trim()
        finally:
            super().close()

    def trim(self) -> None:
        self._pending = 0
        if self.stream is not None:
            self.flush()
        try:
            with self.path.open(encoding="utf-8", errors="replace") as handle:
                total = 0
                tail: deque[str] = deque(maxlen=self.max_lines)
                for line in handle:
                    total += 1
                    tail.append(line.rstrip("\n"))
            if total <= self.max_lines:
                return
            self.path.write_text("\n".join(tail) + "\n", encoding="utf-8")
        except OSError:
            return


def configure_logging(log_file: Path | None, max_lines: int, level: int = logging.INFO) -> None:
    # stdout carries the PASS/FAIL summary lines, so log records go to stderr
    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=LOG_DATEFMT)
    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    root.addHandler(console)

    if log_file is None:
        return
    try:
        capped = LineCappedFileHandler(log_file, max_lines)
    except OSError as exc:
        logging.warning("file logging disabled for %s: %s", log_file, exc)
        return
    capped.setFormatter(formatter)
    root.addHandler(capped)


def _field(value: object) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def log_event(
    component: str,
    action: str,
    check: str | None = None,
    result: str | None = None,
    message: str = "",
    level: int = logging.INFO,
    **fields: object,
) -> None:
    parts = [f"component={component}", f"action={action}"]
    if check:
        parts.append(f"check={check}")
    if result:
        parts.append(f"result={result}")
    parts.extend(f"{key}={_field(value)}" for key, value in fields.items() if value is not None)
    if message:
        parts.append(f"message={message}")
    logging.log(level, " ".join(parts))


@contextmanager
def timed(component: str, action: str, message: str = "") -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    except Exception as exc:
        log_event(component, action, result="error", message=str(exc), level=logging.WARNING)
        raise
    log_event(
        component,
        action,
        result="ok",
        elapsed=f"{time.perf_counter() - start:.3f}s",
        message=message,
        level=logging.DEBUG,
    )
