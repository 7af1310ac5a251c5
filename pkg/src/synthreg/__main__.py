"""Execute this package to run the synthreg command line"""

import sys
from synthreg.command_line import run_cli

if __name__ == "__main__":
    sys.exit(run_cli())
