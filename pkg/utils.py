"""
Utility functions for the colorization pipeline
Logging setup, stage timing and the bounded worker pool
"""

import os
import sys
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from functools import wraps

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(verbosity=0, log_file=None):
    """Configure the root logger: standard error plus an optional log file"""
    env_level = os.getenv('PANOCOLOR_LOG_LEVEL')
    if verbosity <= 0 and env_level:
        level = getattr(logging, env_level.upper(), logging.WARNING)
    elif verbosity <= 0:
        level = logging.WARNING
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.DEBUG

    handlers = [logging.StreamHandler(sys.stderr)]
    log_file = log_file or os.getenv('PANOCOLOR_LOG_FILE')
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    return level


class WarningCounter(logging.Handler):
    """Counts WARNING-and-above records emitted while attached"""

    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.count = 0

    def emit(self, record):
        self.count += 1

    def __enter__(self):
        logging.getLogger().addHandler(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        logging.getLogger().removeHandler(self)
        return False


class StageTimer:
    """Wall time per named stage, accumulated across calls"""

    def __init__(self):
        self.timings = {}

    def add(self, name, seconds):
        self.timings[name] = self.timings.get(name, 0.0) + seconds

    def lines(self):
        return [f"{name} = {seconds:.3f}s" for name, seconds in self.timings.items()]


def log_performance(stage=None):
    """Decorator to log function performance and record it on ``self.timer`` when present"""
    def decorator(func):
        name = stage or func.__name__

        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                execution_time = time.perf_counter() - start_time
                logger.error(f"{name} failed after {execution_time:.2f} seconds: {str(e)}")
                raise
            execution_time = time.perf_counter() - start_time
            logger.debug(f"{name} executed in {execution_time:.2f} seconds")
            timer = getattr(args[0], 'timer', None) if args else None
            if isinstance(timer, StageTimer):
                timer.add(name, execution_time)
            return result

        return wrapper
    return decorator


def available_threads():
    """Worker count when run.threads is 0: the number of usable cores"""
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def parallel_map(func, items, threads=1):
    """Map ``func`` over ``items`` preserving order; ``threads == 1`` runs inline"""
    items = list(items)
    if threads is None or threads <= 0:
        threads = available_threads()
    if threads == 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(func, items))

