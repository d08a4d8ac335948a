import sys

from .xharness.cli import main

sys.exit(main())
