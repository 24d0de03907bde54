"""Main entry point - parses the command line and runs one subcommand."""
import asyncio
import logging
import signal
import sys
from typing import Optional, Sequence

from sture.cli import build_parser, run_command
from sture.config import settings
from sture.errors import ConfigError, StureError, UsageError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def setup_logging() -> None:
    level = logging.DEBUG if settings.DEBUG else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run a subcommand and map its outcome to an exit code."""
    setup_logging()
    args = build_parser().parse_args(argv)
    logger.info(f"Starting '{args.command_name}'")
    try:
        return asyncio.run(run_command(args))
    except (UsageError, ConfigError) as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except StureError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_FAILURE


def signal_handler(sig, frame):
    """Handle shutdown signals."""
    logger.info("Received shutdown signal")
    sys.exit(EXIT_FAILURE)


if __name__ == "__main__":
    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)
    sys.exit(main())
