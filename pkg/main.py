#!/usr/bin/env python3
"""mvssl command-line entry point. See ``python main.py --help``."""
from dotenv import load_dotenv

# MVSSL_LOG_LEVEL must be in the environment before the mvssl loggers are created
load_dotenv()

from mvssl.cli import main  # noqa: E402

if __name__ == "__main__":
    main()
