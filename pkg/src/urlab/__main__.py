"""Module entry point: ``python -m urlab`` mirrors the console script."""

import sys

from .cli import main

sys.exit(main())
