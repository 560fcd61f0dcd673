"""Allow running the CLI as `python -m fedq`."""

import sys

from .cli import main

sys.exit(main())
