"""Allow running as ``python -m mbrw``."""

from mbrw.main import main

main()
