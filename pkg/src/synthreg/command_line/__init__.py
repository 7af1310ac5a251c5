"""
NAME
command_line

DESCRIPTION
This package defines the command line of synthreg. It reads the run configuration (runconfig), dispatches
the subcommands (cli), plots training curves (plotting) and runs the gradient self test (selftest).
The packaged default configuration is config/default.cfg.

PACKAGE CONTENTS
cli
runconfig
plotting
selftest
config (package)
"""

import sys
from .cli import cli_main


def run_cli(argv=None):
    return cli_main(sys.argv[1:] if argv is None else argv)
