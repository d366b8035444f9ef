import sys
import traceback

from src.audiofuse.cli import main

if __name__ == "__main__":
    """
    Entry point of the script

    - Expected failures (bad configuration, unreadable data, numeric blow-ups) are reported by
    the CLI as a single `ERROR <category>:` line and mapped to exit codes 1, 2 or 3.
    - traceback.print_exc(): anything unexpected prints its traceback to stderr and the
    process exits with 1.
    """
    try:
        sys.exit(main())
    except Exception:
        traceback.print_exc()
        exit(1)
