import logging
import os
import sys

class CustomColors:
    CRITICAL = "\033[1;31m"  # Bright Red
    ERROR = "\033[0;31m"    # Red
    WARNING = "\033[1;33m"  # Bright Yellow
    INFO = "\033[0;34m"     # Blue
    DEBUG = "\033[0;35m"    # Magenta
    RESET = "\033[0m"       # Reset

LOG_COLORS = {
    'CRITICAL': CustomColors.CRITICAL,
    'ERROR': CustomColors.ERROR,
    'WARNING': CustomColors.WARNING,
    'INFO': CustomColors.INFO,
    'DEBUG': CustomColors.DEBUG,
}

LOG_FORMAT = '%(asctime)s %(levelname)s %(message)s'

class ColoredFormatter(logging.Formatter):
    def format(self, record):
        log_msg = logging.Formatter.format(self, record)
        return LOG_COLORS.get(record.levelname, CustomColors.RESET) + log_msg + CustomColors.RESET


def level_from_env(default=logging.INFO):
    """Read KAM_LOG_LEVEL (e.g. DEBUG), falling back to `default`"""
    name = os.environ.get('KAM_LOG_LEVEL', '').upper()
    level = logging.getLevelName(name) if name else default
    return level if isinstance(level, int) else default


def setup_logger(name, level=logging.DEBUG, log_file=None):
    """Console handler on stderr (coloured on a terminal), plus a plain file handler when `log_file` is given"""
    handler = logging.StreamHandler(sys.stderr)
    colored = hasattr(sys.stderr, 'isatty') and sys.stderr.isatty()
    handler.setFormatter(ColoredFormatter(LOG_FORMAT) if colored else logging.Formatter(LOG_FORMAT))

    logger = logging.getLogger(name)
    logger.setLevel(level)
    logger.handlers = [handler]

    if log_file:
        file_handler = logging.FileHandler(log_file, mode='w', encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.handlers.append(file_handler)

    # run.log only sees the kam logger
    logger.propagate = False
    return logger


kam_logger = setup_logger('kam', level=level_from_env())
