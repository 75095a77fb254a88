"""
Run context handed from the CLI group to its subcommands.
"""

from dataclasses import dataclass
from typing import Dict

from .config import Config


@dataclass
class RunContext:
    """Effective configuration plus the flags every subcommand reads."""

    config: Config
    progress: bool = False
    debug_mode: bool = False

    @property
    def jobs(self) -> int:
        return self.config.jobs

    @property
    def meta(self) -> Dict[str, str]:
        return self.config.meta()
