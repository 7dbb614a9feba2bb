import sys

from cli.commands import run
from core import __version__
from core.logger import logger


def main():
    logger.info(f"Launching smrecovery v{__version__}")
    sys.exit(run())

if __name__ == "__main__":
    main()
