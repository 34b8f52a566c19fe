"""Allow `python -m factorsearch`."""
import sys

from .cli import main

sys.exit(main())
