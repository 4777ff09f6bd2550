import logging
import threading

import pytest

from utils import StageTimer, WarningCounter, available_threads, log_performance, parallel_map, setup_logging


class TestSetupLogging:
    @pytest.mark.parametrize('verbosity, level', [(0, logging.WARNING), (1, logging.INFO), (2, logging.DEBUG)])
    def test_verbosity_levels(self, monkeypatch, verbosity, level):
        monkeypatch.delenv('PANOCOLOR_LOG_LEVEL', raising=False)
        monkeypatch.delenv('PANOCOLOR_LOG_FILE', raising=False)
        assert setup_logging(verbosity) == level
        assert logging.getLogger().level == level

    def test_environment_level(self, monkeypatch):
        monkeypatch.setenv('PANOCOLOR_LOG_LEVEL', 'debug')
        assert setup_logging(0) == logging.DEBUG

    def test_log_file(self, tmp_path, monkeypatch):
        monkeypatch.delenv('PANOCOLOR_LOG_LEVEL', raising=False)
        setup_logging(1, tmp_path / 'run.log')
        logging.getLogger('panocolor.test').info("hello file")
        for handler in logging.getLogger().handlers:
            handler.flush()
        assert 'hello file' in (tmp_path / 'run.log').read_text()


class TestWarningCounter:
    def test_counts_warnings_and_errors_only(self):
        log = logging.getLogger('panocolor.test')
        with WarningCounter() as counter:
            log.warning("one")
            log.error("two")
            log.info("ignored")
        log.warning("after")
        assert counter.count == 2


class _Stage:
    def __init__(self):
        self.timer = StageTimer()

    @log_performance('work')
    def work(self, fail=False):
        if fail:
            raise RuntimeError("boom")
        return 5


class TestLogPerformance:
    def test_records_on_timer(self):
        stage = _Stage()
        assert stage.work() == 5
        stage.work()
        assert list(stage.timer.timings) == ['work']
        assert stage.timer.lines()[0].startswith('work = ')

    def test_logs_and_reraises(self, caplog):
        with pytest.raises(RuntimeError):
            _Stage().work(fail=True)
        assert 'work failed' in caplog.text


class TestParallelMap:
    def test_preserves_order(self):
        items = list(range(50))
        assert parallel_map(lambda x: x * x, items, threads=4) == [x * x for x in items]

    def test_single_thread_runs_inline(self):
        seen = []
        parallel_map(lambda _: seen.append(threading.current_thread()), range(3), threads=1)
        assert all(thread is threading.main_thread() for thread in seen)

    def test_zero_means_all_cores(self):
        assert available_threads() >= 1
        assert parallel_map(str, [1, 2], threads=0) == ['1', '2']
