"""
Permite executar ``python -m src <comando>``
"""

import sys

from .harness_utils import cli

if __name__ == '__main__':
    sys.exit(cli())
