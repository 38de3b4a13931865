"""
python3 -m seasonmatch <subcommand> ...

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
import sys

from .cli import main

sys.exit(main())
