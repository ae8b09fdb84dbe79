#!/usr/bin/env python3
"""Run script for gdvae.

Checks for a .env file, then hands the remaining arguments to the gdvae CLI.
"""

import logging
import os
import sys
from typing import List, Optional

# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger("gdvae_runner")

ENV_TEMPLATE = """# Logging Configuration
# Set log level: DEBUG, INFO, WARNING, ERROR, CRITICAL
LOG_LEVEL=INFO
# Set to true to enable more verbose debugging output
DEBUG_MODE=false

# Worker cap for ablation runs
GDVAE_THREADS=1

# Directory for run outputs when --out is not given
GDVAE_RUN_ROOT=runs

# Show progress bars for graph construction and training
GDVAE_SHOW_PROGRESS=false
"""


def check_env_file() -> bool:
    """Check if .env file exists and create it if needed."""
    if not os.path.exists(".env"):
        logger.info("No .env file found. Creating a template .env file.")
        with open(".env", "w") as f:
            f.write(ENV_TEMPLATE)
        logger.info("Template .env file created. Please review it before running again.")
        return False

    return True


def main(argv: Optional[List[str]] = None) -> int:
    """Run the gdvae command line."""
    if not check_env_file():
        return 1

    try:
        from gdvae.cli import main as cli_main
    except ImportError:
        logger.error("Failed to import gdvae. Make sure the package is installed.")
        return 1

    return cli_main(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
