"""
The `logging` module configures the `loguru` library for logging.
It sets up a console sink at import time and lets the command-line entry
point attach a rotating file sink, so that simulation, training and
evaluation runs are recorded for later inspection.
"""

from loguru import logger
import sys

from src.utils.config import LOG_LEVEL, LOG_FILE

CONSOLE_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"

# Configure loguru
logger.remove()
logger.add(sys.stderr, format=CONSOLE_FORMAT, level=LOG_LEVEL)


def configure_logging(level: str = LOG_LEVEL, log_file: str = LOG_FILE, verbose: bool = False):
    """Reinstall the console sink at `level` and add the file sink unless disabled"""
    logger.remove()
    logger.add(sys.stderr, format=CONSOLE_FORMAT, level="DEBUG" if verbose else level)

    # Add file logging
    if log_file:
        logger.add(
            log_file,
            rotation="500 MB",
            retention="10 days",
            format=FILE_FORMAT,
            level="DEBUG"
        )
