"""
Unit tests for logging configuration and line-delimited record logs.
"""

import json
import logging
import os
import sys

import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rekall.logging_config import (
    JSONFormatter,
    MetricsFormatter,
    RunContextFilter,
    StructuredFormatter,
    close_record_log,
    get_logger,
    open_record_log,
    run_logging,
    setup_logging,
)


def _record(msg="step", **extra):
    record = logging.LogRecord("rekall.test", logging.INFO, __file__, 1, msg, None, None)
    record.__dict__.update(extra)
    return record


class TestFormatters:
    """Test suite for the formatters."""

    def test_metrics_formatter_only_writes_extra_sorted(self):
        """Metrics lines hold the payload only, with sorted keys."""
        line = MetricsFormatter().format(_record(task=1, L_tri=0.5, event="student_step"))
        assert line == '{"L_tri": 0.5, "event": "student_step", "task": 1}'

    def test_metrics_formatter_has_no_timestamp(self):
        """Two records with the same payload format identically."""
        formatter = MetricsFormatter()
        first = formatter.format(_record(step=1))
        second = formatter.format(_record(step=1))
        assert first == second
        assert "time" not in first

    def test_json_formatter_includes_extra(self):
        """JSON console records carry extra fields next to the message."""
        payload = json.loads(JSONFormatter().format(_record("hello", run="r1")))
        assert payload["message"] == "hello"
        assert payload["run"] == "r1"
        assert payload["level"] == "INFO"

    def test_structured_formatter_tags_run(self):
        formatter = StructuredFormatter(fmt="%(run_tag)s%(message)s")
        assert formatter.format(_record("epoch done", run="cifar10-full-seed0")) == (
            "[cifar10-full-seed0] epoch done"
        )
        assert formatter.format(_record("epoch done")) == "epoch done"

    def test_run_filter_keeps_existing_run(self):
        record = _record(run="explicit")
        assert RunContextFilter("other").filter(record)
        assert record.run == "explicit"

    def test_structured_fields_stay_out_of_json(self):
        record = _record("hello", run="r1")
        StructuredFormatter(fmt="%(run_tag)s%(message)s").format(record)
        payload = json.loads(JSONFormatter().format(record))
        assert "run_tag" not in payload
        assert "rel_path" not in payload


class TestRecordLog:
    """Test suite for open_record_log."""

    def test_writes_json_lines(self, tmp_path):
        path = tmp_path / "metrics.log"
        log = open_record_log("rekall.test.lines", path)
        log.info("student_step", extra={"task": 1, "step": 1})
        log.info("student_step", extra={"task": 1, "step": 2})
        close_record_log(log)

        lines = path.read_text().splitlines()
        assert [json.loads(x)["step"] for x in lines] == [1, 2]

    def test_does_not_propagate(self, tmp_path):
        log = open_record_log("rekall.test.propagate", tmp_path / "m.log")
        assert log.propagate is False
        close_record_log(log)
        assert log.handlers == []

    def test_truncates_on_reopen(self, tmp_path):
        """Reopening with truncate_to keeps only the first N lines."""
        path = tmp_path / "metrics.log"
        log = open_record_log("rekall.test.truncate", path)
        for step in range(5):
            log.info("x", extra={"step": step})
        close_record_log(log)

        log = open_record_log("rekall.test.truncate", path, truncate_to=2)
        log.info("x", extra={"step": 99})
        close_record_log(log)

        steps = [json.loads(x)["step"] for x in path.read_text().splitlines()]
        assert steps == [0, 1, 99]

    def test_truncate_zero_starts_fresh(self, tmp_path):
        path = tmp_path / "metrics.log"
        path.write_text('{"stale": true}\n')
        log = open_record_log("rekall.test.fresh", path, truncate_to=0)
        close_record_log(log)
        assert path.read_text() == ""


class TestSetupLogging:
    """Test suite for setup_logging."""

    @pytest.fixture(autouse=True)
    def restore_root(self):
        """Put the root logger back the way pytest configured it."""
        root = logging.getLogger()
        handlers, level = list(root.handlers), root.level
        yield
        for handler in root.handlers:
            if handler not in handlers:
                handler.close()
        root.handlers[:] = handlers
        root.setLevel(level)

    def test_module_levels(self):
        setup_logging(log_level="WARNING", module_levels={"rekall.trainer": "DEBUG"})
        assert logging.getLogger().level == logging.WARNING
        assert logging.getLogger("rekall.trainer").level == logging.DEBUG
        logging.getLogger("rekall.trainer").setLevel(logging.NOTSET)

    def test_run_logging_tags_console_lines(self, capsys):
        setup_logging(log_level="INFO")
        log = get_logger("rekall.trainer")
        with run_logging("oct-full-seed1"):
            log.info("task 1 closed")
        log.info("between runs")
        out = capsys.readouterr().out.splitlines()
        assert out[-2].endswith("[oct-full-seed1] task 1 closed")
        assert out[-1].endswith("| between runs")
        assert all(not h.filters for h in logging.getLogger().handlers)

    def test_run_logging_leaves_record_logs_alone(self, tmp_path):
        setup_logging(log_level="INFO")
        path = tmp_path / "metrics.log"
        log = open_record_log("rekall.test.run_tag", path)
        with run_logging("oct-full-seed1"):
            log.info("student_step", extra={"step": 1})
        close_record_log(log)
        assert json.loads(path.read_text()) == {"step": 1}

    def test_get_logger(self):
        assert get_logger("rekall.cli") is logging.getLogger("rekall.cli")

    def test_log_file_created(self, tmp_path):
        setup_logging(log_file="run.log", log_dir=str(tmp_path))
        logging.getLogger("rekall.test").info("written")
        for handler in logging.getLogger().handlers:
            handler.flush()
        assert "written" in (tmp_path / "run.log").read_text()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
