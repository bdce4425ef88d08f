import logging
import os
import io

from config import LOG_LEVEL

_log_stream = io.StringIO()
_formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')


def get_log_stream():
    return _log_stream


def setup_logger(name, log_file=None, level=None, to_memory=True):
    logger = logging.getLogger(name)
    if level is None:
        level = getattr(logging, str(LOG_LEVEL).upper(), logging.INFO)
    if not logger.handlers:
        logger.setLevel(level)
        logger.propagate = False

        # Console / terminal logs
        ch = logging.StreamHandler()
        ch.setLevel(level)
        ch.setFormatter(_formatter)
        logger.addHandler(ch)

        # Memory log, copied into run reports
        if to_memory:
            mh = logging.StreamHandler(_log_stream)
            mh.setLevel(level)
            mh.setFormatter(_formatter)
            logger.addHandler(mh)

    if log_file:
        attach_log_file(logger, log_file, level)

    return logger


def attach_log_file(logger, log_file, level=logging.INFO):
    target = os.path.abspath(log_file)
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == target:
            return handler
    os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
    fh = logging.FileHandler(target, encoding="utf-8")
    fh.setLevel(level)
    fh.setFormatter(_formatter)
    logger.addHandler(fh)
    return fh


def log_to_file(log_file, names):
    """Route the named module loggers into one run log."""
    for name in names:
        attach_log_file(setup_logger(name), log_file)
