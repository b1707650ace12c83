import logging

from rich.logging import RichHandler

from .config import settings


def configure_logging(level: str | None = None) -> None:
    """
    Install a rich console handler on the root logger.

    Args:
        level (str | None, optional): Logging level name. Defaults to the
            configured `log_level` setting (DEBUG when `debug` is on).
    """
    if level is None:
        level = "DEBUG" if settings.debug else settings.log_level
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=settings.debug, show_path=False)],
        force=True,
    )
