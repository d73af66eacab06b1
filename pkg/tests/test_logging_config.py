import logging

from logging_config import FORMAT, ExtraFormatter, RunIdFilter
from run_context import bind_run_id


def _record(**extra):
    record = logging.LogRecord("em", logging.INFO, __file__, 1, "iteration done", None, None)
    record.__dict__.update(extra)
    return record


class TestExtraFormatter:
    def test_extra_fields_are_appended_sorted(self):
        line = ExtraFormatter("%(message)s").format(_record(iteration=3, free_energy=-1234.56789))
        assert line == "iteration done | free_energy=-1234.57 iteration=3"

    def test_plain_record_is_unchanged(self):
        assert ExtraFormatter("%(message)s").format(_record()) == "iteration done"

    def test_long_values_are_shortened(self):
        line = ExtraFormatter("%(message)s").format(_record(path="x" * 500))
        assert line.endswith("...")
        assert len(line) < 200


class TestRunIdFilter:
    def test_uses_the_bound_run_id(self):
        bind_run_id("exp-rep01")
        record = _record()
        assert RunIdFilter().filter(record)
        assert record.run_id == "exp-rep01"
        assert "[run=exp-rep01]" in ExtraFormatter(FORMAT).format(record)

    def test_explicit_run_id_wins(self):
        record = _record(run_id="other")
        RunIdFilter().filter(record)
        assert record.run_id == "other"
