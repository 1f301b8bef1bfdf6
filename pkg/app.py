"""
HOLD Diffusion Toolkit
======================
Main entry point with centralized command dispatch.

    python app.py verify
    python app.py train  --config data/configs/gmm1d.yaml
    python app.py sample --config data/configs/gmm1d.yaml --sampler lt --steps 1000

Exit codes: 0 success, 1 verification failed, 2 configuration/runtime error.
"""

import logging
import sys
from pathlib import Path
from typing import List, Optional

# Add current directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from components.commands import COMMAND_TABLE
from components.navigation import configure_logging, parse_args
from modules.errors import HoldError

logger = logging.getLogger("hold")

EXIT_ERROR = 2


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    configure_logging(args.verbosity)
    try:
        return COMMAND_TABLE[args.command](args)
    except HoldError as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
