"""Allow ``python3 -m afford3d``."""
import sys

from .traineval.cli import main

sys.exit(main())
