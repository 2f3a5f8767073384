import logging
import sys
from datetime import datetime
import os


# Configure logging
def setup_logger(name: str = 'graphlower', log_dir: str = None, console_level: str = None):
    """Return the shared project logger, attaching handlers only once."""
    logger = logging.getLogger(name)
    if getattr(logger, '_graphlower_configured', False):
        return logger

    # Settings import is local so that logger_config stays importable on its own
    from graphlower.settings import get_settings
    settings = get_settings()
    log_dir = log_dir or settings.log_dir
    console_level = console_level or settings.log_level

    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    # Console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(getattr(logging, console_level.upper(), logging.INFO))
    console_format = logging.Formatter(
        '%(asctime)s - %(levelname)s - [%(name)s] %(message)s',
        datefmt='%H:%M:%S'
    )
    console_handler.setFormatter(console_format)
    logger.addHandler(console_handler)

    # File handler for detailed logging
    try:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(
            os.path.join(log_dir, f'graphlower_{datetime.now().strftime("%Y%m%d")}.log')
        )
        file_handler.setLevel(logging.DEBUG)
        file_format = logging.Formatter(
            '%(asctime)s - %(levelname)s - [%(name)s] %(message)s'
        )
        file_handler.setFormatter(file_format)
        logger.addHandler(file_handler)
    except OSError as e:
        logger.warning(f"File logging disabled: {e}")

    logger._graphlower_configured = True
    return logger
