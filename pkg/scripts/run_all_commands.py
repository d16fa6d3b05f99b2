"""Run every CLI command on one config, e.g. configs/keyword_desk.ini."""

import sys

from guardlab.harness.cli import HELP, main

if __name__ == "__main__":
    config = sys.argv[1] if len(sys.argv) > 1 else "configs/smoke.ini"
    for command in HELP:
        print(f"== {command}", flush=True)
        code = main([command, config])
        if code:
            sys.exit(code)
