"""Structured logging and stage timing."""

import io
import json

import pytest

from aseg import configure_logging, get_logger
from aseg.logging import (
    ConsoleFormatter,
    JSONFormatter,
    Logger,
    LogLevel,
    StageTimer,
    StreamHandler,
)


def _json_logger(level=LogLevel.DEBUG):
    buf = io.StringIO()
    handler = StreamHandler(buf, formatter=JSONFormatter(include_timestamp=False))
    return Logger("aseg.test", level=level, handlers=[handler]), buf


def _lines(buf):
    return [json.loads(line) for line in buf.getvalue().splitlines()]


@pytest.mark.unit
def test_json_records_carry_fields():
    logger, buf = _json_logger()
    logger.info("Plan applied", channels=12, technique="masked")
    assert _lines(buf) == [{"level": "INFO", "logger": "aseg.test", "message": "Plan applied",
                            "channels": 12, "technique": "masked"}]


@pytest.mark.unit
def test_bind_adds_context_to_child_only():
    logger, buf = _json_logger()
    child = logger.bind(stage="transfer")
    child.info("Training step", iteration=3)
    logger.info("Checkpoint written")
    first, second = _lines(buf)
    assert first["stage"] == "transfer" and first["iteration"] == 3
    assert "stage" not in second


@pytest.mark.unit
def test_level_filtering():
    logger, buf = _json_logger(level=LogLevel.WARNING)
    logger.debug("hidden")
    logger.info("hidden")
    logger.warning("Groups floored at one channel", groups=["g1"])
    assert [r["message"] for r in _lines(buf)] == ["Groups floored at one channel"]
    assert _lines(buf)[0]["level"] == "WARN"


@pytest.mark.unit
def test_console_formatter_without_color():
    buf = io.StringIO()
    logger = Logger("aseg.test", handlers=[StreamHandler(buf, formatter=ConsoleFormatter(colorize=False))])
    logger.info("Gate statistics", split="val")
    text = buf.getvalue()
    assert "Gate statistics" in text and "val" in text
    assert "\033[" not in text


@pytest.mark.unit
def test_broken_stream_does_not_raise():
    buf = io.StringIO()
    logger = Logger("aseg.test", handlers=[StreamHandler(buf)])
    buf.close()
    logger.error("still fine")


@pytest.mark.unit
def test_stage_timer_logs_duration():
    logger, buf = _json_logger()
    with StageTimer(logger, "prune-stage", index=0) as timer:
        pass
    records = _lines(buf)
    assert [r["message"] for r in records] == ["prune-stage started", "prune-stage finished"]
    assert records[1]["index"] == 0
    assert records[1]["duration_ms"] == timer.duration_ms >= 0.0


@pytest.mark.unit
def test_stage_timer_reports_failure():
    logger, buf = _json_logger()
    with pytest.raises(RuntimeError):
        with StageTimer(logger, "train-stage"):
            raise RuntimeError("diverged")
    last = _lines(buf)[-1]
    assert last["message"] == "train-stage failed"
    assert last["level"] == "ERROR" and last["error"] == "diverged"


@pytest.mark.unit
def test_configure_logging_writes_json_file(tmp_path):
    path = tmp_path / "run.log"
    configure_logging(level="info", log_file=str(path), colorize=False)
    logger = get_logger("aseg.test.file")
    logger.debug("not written")
    logger.info("Checkpoint written", sha256="abc")
    configure_logging(level="warning", colorize=False)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["message"] for r in records] == ["Checkpoint written"]
    assert records[0]["sha256"] == "abc" and "timestamp" in records[0]
